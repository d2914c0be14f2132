use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked fully.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, coords_per_param: 8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Compares backward-pass gradients of every trainable parameter against
/// central finite differences of the scalar returned by `forward`.
///
/// `forward` must be deterministic: it is re-run twice per sampled coordinate.
pub fn check_gradients<F>(params: &mut ParamStore, cfg: &GradCheckConfig, forward: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a ParamStore, &mut Graph<'a>) -> Result<Var>,
{
    fn store(p: &mut ParamStore) -> &mut ParamStore {
        p
    }
    check_gradients_in(params, store, cfg, forward)
}

/// [`check_gradients`] for a model that owns its parameter store; `store`
/// selects the store whose trainable tensors are checked.
pub fn check_gradients_in<T, S, F>(
    model: &mut T,
    store: S,
    cfg: &GradCheckConfig,
    forward: F,
) -> Result<GradCheckReport>
where
    S: Fn(&mut T) -> &mut ParamStore,
    F: for<'a> Fn(&'a T, &mut Graph<'a>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new();
        let loss = forward(model, &mut g)?;
        g.backward(loss)?
    };
    let eval = |m: &T| -> Result<f64> {
        let mut g = Graph::new();
        let loss = forward(m, &mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let ids: Vec<_> = {
        let params = store(model);
        params.ids().filter(|&id| params.is_trainable(id)).collect()
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), coords_checked: 0 };
    for (n, id) in ids.into_iter().enumerate() {
        let len = store(model).get(id).len();
        let coords: Vec<usize> = if len <= cfg.coords_per_param {
            (0..len).collect()
        } else {
            let mut rng = Rng::stream(cfg.seed, "gradcheck", n as u64);
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(cfg.coords_per_param);
            all
        };
        for c in coords {
            let name = store(model).name(id).to_string();
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            if !analytic.is_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
            let orig = store(model).get(id).data()[c];
            store(model).get_mut(id).data_mut()[c] = orig + cfg.step;
            let up = eval(model);
            store(model).get_mut(id).data_mut()[c] = orig - cfg.step;
            let down = eval(model);
            store(model).get_mut(id).data_mut()[c] = orig;
            let numeric = (up? - down?) / (2.0 * cfg.step);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{AttentionLayout, Tensor};

    #[test]
    fn linear_loss_has_exact_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::matrix(1, 3, vec![0.2, -0.4, 0.9]).unwrap(), true).unwrap();
        let x = Tensor::matrix(1, 3, vec![1.5, 2.0, -3.0]).unwrap();
        let report = check_gradients(&mut store, &GradCheckConfig::default(), |p, g| {
            let wv = g.param(p, w);
            let xv = g.constant(x.clone());
            let y = g.matmul_t(xv, wv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    /// Every op in one small network, compared to finite differences.
    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = Rng::stream(3, "gradcheck-test", 0);
        let mut store = ParamStore::new();
        let width = 8;
        let table = store.insert("table", rng.gaussian(&[10, width], 0.5), true).unwrap();
        let wq = store.insert("wq", rng.gaussian(&[width, width], 0.4), true).unwrap();
        let wk = store.insert("wk", rng.gaussian(&[width, width], 0.4), true).unwrap();
        let wv = store.insert("wv", rng.gaussian(&[width, width], 0.4), true).unwrap();
        let gain = store.insert("gain", rng.gaussian(&[width], 0.3), true).unwrap();
        let bias = store.insert("bias", rng.gaussian(&[width], 0.3), true).unwrap();
        let w1 = store.insert("w1", rng.gaussian(&[6, width], 0.4), true).unwrap();
        let b1 = store.insert("b1", rng.gaussian(&[6], 0.1), true).unwrap();
        let w2 = store.insert("w2", rng.gaussian(&[10, 6], 0.4), true).unwrap();
        let layout = AttentionLayout::new(vec![0..4, 4..7], vec![true, false, true, true, true, true, false]).unwrap();
        let ids = [1usize, 2, 3, 4, 5, 6, 7];
        let cfg = GradCheckConfig { step: 1e-4, coords_per_param: 12, seed: 1 };
        let report = check_gradients(&mut store, &cfg, |p, g| {
            let t = g.param(p, table);
            let x = g.gather(t, &ids)?;
            let (gv, bv) = (g.param(p, gain), g.param(p, bias));
            let x = g.layer_norm(x, gv, bv)?;
            let q = g.param(p, wq);
            let q = g.matmul_t(x, q)?;
            let k = g.param(p, wk);
            let k = g.matmul_t(x, k)?;
            let v = g.param(p, wv);
            let v = g.matmul_t(x, v)?;
            let a = g.attention(q, k, v, 2, &layout)?;
            let h = g.add(a, x)?;
            let w1v = g.param(p, w1);
            let h = g.matmul_t(h, w1v)?;
            let b1v = g.param(p, b1);
            let h = g.add_bias(h, b1v)?;
            let h = g.gelu(h);
            let h = g.tanh(h);
            let h = g.scale(h, 1.7);
            let sel = g.select_rows(h, &[0, 3, 5, 6])?;
            let extra = g.select_rows(h, &[2])?;
            let sel = g.concat_rows(&[sel, extra])?;
            let w2v = g.param(p, w2);
            let logits = g.matmul_t(sel, w2v)?;
            g.cross_entropy(logits, &[1, 4, 9, 0, 2], &[0.5, 0.25, 1.0, 0.2, 0.3])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn dropout_gradient_follows_its_mask() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7]).unwrap(), true).unwrap();
        let report = check_gradients(&mut store, &GradCheckConfig::default(), |p, g| {
            let mut rng = Rng::stream(9, "dropout", 0);
            let x = g.param(p, w);
            let y = g.dropout(x, 0.5, &mut rng);
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn masked_keys_are_ignored() {
        // Changing a masked row's key and value leaves every other output alone.
        let mut rng = Rng::stream(5, "attn", 0);
        let q = rng.gaussian(&[4, 4], 1.0);
        let k = rng.gaussian(&[4, 4], 1.0);
        let v = rng.gaussian(&[4, 4], 1.0);
        let layout = AttentionLayout::new(vec![0..4], vec![true, false, true, true]).unwrap();
        let run = |k: Tensor, v: Tensor| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k), g.constant(v));
            let o = g.attention(qv, kv, vv, 2, &layout).unwrap();
            g.value(o).clone()
        };
        let base = run(k.clone(), v.clone());
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for c in 0..4 {
            k2.data_mut()[4 + c] = 100.0;
            v2.data_mut()[4 + c] = -50.0;
        }
        let other = run(k2, v2);
        for r in [0, 2, 3] {
            assert_eq!(base.row(r), other.row(r));
        }
    }

    #[test]
    fn disconnected_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let used = store.insert("used", Tensor::scalar(2.0), true).unwrap();
        let unused = store.insert("unused", Tensor::scalar(3.0), true).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let y = g.scale(u, 4.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(used).unwrap().data(), &[4.0]);
        assert!(grads.get(unused).is_none());
    }
}
