//! Template grammar for synthetic 1-best hypotheses.

use crate::rng::Rng;

/// One element of a template.
#[derive(Debug, Clone, Copy)]
pub enum Piece {
    /// Fixed text, possibly several words.
    Word(&'static str),
    /// One entry drawn uniformly.
    Choice(&'static [&'static str]),
    /// Body included with probability `p`.
    Tail { p: f64, body: &'static [Piece] },
}

pub type Template = &'static [Piece];

/// Templates drawn uniformly.
#[derive(Debug, Clone, Copy)]
pub struct TemplateSet {
    pub name: &'static str,
    pub templates: &'static [Template],
}

use Piece::{Choice as C, Tail as T, Word as W};

const HOURS: &[&str] = &["1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12"];
const AM_PM: &[&str] = &["AM", "PM"];
const MINUTES: &[&str] = &["5", "10", "15", "20", "30", "45"];
const CITIES: &[&str] = &["London", "Paris", "Tokyo", "Boston", "Seattle", "Berlin", "Chicago", "Denver"];
const NAMES: &[&str] = &["mom", "dad", "John", "Sarah", "Alex", "Emma", "David", "Lisa"];
const DEVICES: &[&str] = &["lights", "fan", "heater", "TV", "radio", "lamp"];
const ROOMS: &[&str] = &["kitchen", "bedroom", "living room", "office", "garage"];
const GENRES: &[&str] = &["jazz", "rock", "classical", "pop", "country", "blues"];
const TASKS: &[&str] =
    &["call the dentist", "buy milk", "pick up the kids", "water the plants", "pay the rent", "take out the trash"];
const WHEN: &[&str] = &["tomorrow", "tonight", "at noon", "this evening", "on Monday", "next week"];
const ITEMS: &[&str] = &["eggs", "bread", "apples", "coffee", "butter", "rice"];
const APPS: &[&str] = &["Spotify", "maps", "the camera", "settings", "my calendar", "messages"];
const NOTES: &[&str] = &["I'm running late", "I'll be home soon", "call me back", "see you there"];
const DEGREES: &[&str] = &["65", "68", "70", "72", "75"];
const PLACES: &[&str] = &["the airport", "the nearest gas station", "work", "the train station", "the office"];

const DIRECTED: &[Template] = &[
    &[W("set an alarm for"), C(HOURS), C(AM_PM), T { p: 0.3, body: &[C(&["tomorrow", "every day", "on Monday"])] }],
    &[W("tell me a joke"), T { p: 0.3, body: &[W("about"), C(GENRES), W("music")] }],
    &[W("what's the temperature"), T { p: 0.7, body: &[W("in"), C(CITIES)] }],
    &[W("set a timer for"), C(MINUTES), W("minutes")],
    &[W("turn"), C(&["on", "off"]), W("the"), C(DEVICES), T { p: 0.5, body: &[W("in the"), C(ROOMS)] }],
    &[W("play some"), C(GENRES), W("music"), T { p: 0.3, body: &[W("in the"), C(ROOMS)] }],
    &[W("remind me to"), C(TASKS), C(WHEN)],
    &[W("what's the weather like"), C(WHEN), T { p: 0.3, body: &[W("in"), C(CITIES)] }],
    &[W("call"), C(NAMES), T { p: 0.7, body: &[W("on speaker")] }],
    &[W("add"), C(ITEMS), W("to my shopping list")],
    &[W("send a message to"), C(NAMES), W("saying"), C(NOTES)],
    &[W("open"), C(APPS), T { p: 0.5, body: &[W("on my phone")] }],
    &[W("what time is it in"), C(CITIES)],
    &[C(&["turn up", "turn down"]), W("the volume"), T { p: 0.5, body: &[W("a little")] }],
    &[W("navigate to"), C(PLACES), T { p: 0.5, body: &[W("avoiding the highway")] }],
    &[W("how long will it take to get to"), C(PLACES)],
    &[W("what's on my calendar for"), C(WHEN)],
    &[W("read my latest messages from"), C(NAMES)],
    &[W("set the thermostat to"), C(DEGREES), W("degrees"), T { p: 0.5, body: &[W("in the"), C(ROOMS)] }],
];

const CLAUSES: &[&str] = &[
    "we went to the beach",
    "she was really upset about it",
    "he forgot the keys again",
    "it started raining",
    "nobody showed up",
    "the movie was great",
    "I fell asleep",
];
const ACTIVITIES: &[&str] =
    &["grab some lunch", "go for a walk", "watch a movie", "clean the house", "visit grandma", "get some coffee"];
const ADJECTIVES: &[&str] = &["funny", "weird", "good", "bad", "awkward", "loud"];
const PAST: &[&str] = &["yesterday", "last night", "this morning", "at the party"];
const RELATIVES: &[&str] = &["sister", "brother", "mother", "uncle", "cousin", "neighbor"];
const EVENTS: &[&str] = &["the party", "dinner", "the game", "they leave"];
const TOPICS: &[&str] = &["work", "the kids", "dinner", "the trip", "your sister"];
const SETBACKS: &[&str] = &["it didn't work", "I gave up", "it was too hard", "I ran out of time"];

/// Conversational continuation, nested so that long utterances stay possible.
const AND_THEN: &[Piece] = &[W("and then"), C(CLAUSES), T { p: 0.35, body: &[W("and"), C(CLAUSES)] }];

const NON_DIRECTED: &[Template] = &[
    &[W("excellent thank you very much")],
    &[W("can we talk"), T { p: 0.5, body: &[W("about"), C(TOPICS), C(WHEN)] }],
    &[W("I was trying to do it"), T { p: 0.5, body: &[W("but"), C(SETBACKS)] }],
    &[W("did you see"), C(NAMES), C(PAST), T { p: 0.4, body: AND_THEN }],
    &[W("I think we should"), C(ACTIVITIES), C(WHEN), T { p: 0.4, body: AND_THEN }],
    &[W("oh my god that was so"), C(ADJECTIVES)],
    &[C(NAMES), W("said that"), C(CLAUSES), T { p: 0.4, body: AND_THEN }],
    &[W("we need to"), C(ACTIVITIES), W("before"), C(EVENTS)],
    &[W("so anyway I told him that"), C(CLAUSES), T { p: 0.4, body: AND_THEN }],
    &[W("have you ever been to"), C(CITIES)],
    &[W("my"), C(RELATIVES), W("is coming over"), C(WHEN), T { p: 0.4, body: AND_THEN }],
    &[W("honestly I don't remember"), T { p: 0.5, body: &[W("what happened"), C(PAST)] }],
];

/// Utterances plausible in either class; drawn identically for both.
const AMBIGUOUS: &[Template] = &[
    &[],
    &[W("yeah")],
    &[W("okay")],
    &[W("what")],
    &[W("stop")],
    &[W("hello")],
    &[W("thank you")],
    &[W("yes please")],
    &[W("no thanks")],
    &[W("never mind")],
    &[W("what time is it")],
    &[W("good morning")],
    &[W("play it again")],
    &[W("hey are you there")],
    &[W("cancel that")],
    &[W("how are you doing today")],
    &[W("not right now")],
    &[W("I don't know")],
    &[W("tell me more about it")],
    &[W("that sounds good to me")],
];

const SPEAKERS: &[&str] = &["I", "she", "he", "they", "we"];

/// Sentences in which `yes` and `no` follow other words, with cues that
/// tell the two apart; used only for pretraining.
const ANSWERS: &[Template] = &[
    &[W("that is right so the answer is yes")],
    &[W("that is wrong so the answer is no")],
    &[C(SPEAKERS), W("agreed and said yes"), T { p: 0.4, body: &[W("to"), C(NAMES)] }],
    &[C(SPEAKERS), W("refused and said no"), T { p: 0.4, body: &[W("to"), C(NAMES)] }],
    &[W("of course yes"), T { p: 0.5, body: &[C(&["please", "thank you"])] }],
    &[W("absolutely not no"), T { p: 0.5, body: &[C(&["thanks", "not right now"])] }],
    &[W("can you say yes or no")],
];

/// Optional leading marker for directed utterances.
pub const TRIGGER_WORD: &str = "assistant";

pub const DIRECTED_SET: TemplateSet = TemplateSet { name: "directed", templates: DIRECTED };
pub const NON_DIRECTED_SET: TemplateSet = TemplateSet { name: "non_directed", templates: NON_DIRECTED };
pub const AMBIGUOUS_SET: TemplateSet = TemplateSet { name: "ambiguous", templates: AMBIGUOUS };
pub const ANSWER_SET: TemplateSet = TemplateSet { name: "answers", templates: ANSWERS };

impl TemplateSet {
    /// Words of one random utterance, in display case.
    pub fn sample(&self, rng: &mut Rng) -> Vec<&'static str> {
        let t = self.templates[rng.below(self.templates.len())];
        let mut out = Vec::new();
        expand(t, rng, &mut out);
        out
    }
}

fn expand(pieces: &[Piece], rng: &mut Rng, out: &mut Vec<&'static str>) {
    for p in pieces {
        match *p {
            Piece::Word(w) => out.extend(w.split(' ')),
            Piece::Choice(opts) => out.extend(opts[rng.below(opts.len())].split(' ')),
            Piece::Tail { p, body } => {
                if rng.bernoulli(p) {
                    expand(body, rng, out);
                }
            }
        }
    }
}

/// Joins words and capitalises the first letter.
pub fn display(words: &[&str]) -> String {
    let s = words.join(" ");
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => s,
    }
}

/// Every word the grammar can emit, including the trigger marker.
pub fn grammar_words() -> Vec<&'static str> {
    fn walk(pieces: &[Piece], out: &mut Vec<&'static str>) {
        for p in pieces {
            match *p {
                Piece::Word(w) => out.extend(w.split(' ')),
                Piece::Choice(opts) => opts.iter().for_each(|o| out.extend(o.split(' '))),
                Piece::Tail { body, .. } => walk(body, out),
            }
        }
    }
    let mut out = vec![TRIGGER_WORD];
    for set in [DIRECTED_SET, NON_DIRECTED_SET, AMBIGUOUS_SET, ANSWER_SET] {
        for t in set.templates {
            walk(t, &mut out);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{vocab::normalize_words, Vocabulary, DEFAULT_VOCAB_SIZE};

    #[test]
    fn vocabulary_covers_grammar() {
        let words = grammar_words();
        let v = Vocabulary::build(words.iter().copied(), DEFAULT_VOCAB_SIZE).unwrap();
        for w in words {
            for n in normalize_words(w) {
                assert!(v.id(&n).is_some(), "{n}");
            }
        }
    }

    #[test]
    fn display_capitalises_first_letter() {
        assert_eq!(display(&["set", "an", "alarm", "for", "8", "AM"]), "Set an alarm for 8 AM");
        assert_eq!(display(&[]), "");
    }

    #[test]
    fn table_examples_are_reachable() {
        let has = |set: &TemplateSet, words: &[&str]| {
            let mut rng = Rng::stream(1, "reach", 0);
            (0..20_000).any(|_| set.sample(&mut rng) == words)
        };
        assert!(has(&DIRECTED_SET, &["set", "an", "alarm", "for", "8", "AM"]));
        assert!(has(&DIRECTED_SET, &["tell", "me", "a", "joke"]));
        assert!(has(&DIRECTED_SET, &["what's", "the", "temperature"]));
        assert!(has(&NON_DIRECTED_SET, &["excellent", "thank", "you", "very", "much"]));
        assert!(has(&NON_DIRECTED_SET, &["can", "we", "talk"]));
        assert!(has(&NON_DIRECTED_SET, &["I", "was", "trying", "to", "do", "it"]));
    }
}
