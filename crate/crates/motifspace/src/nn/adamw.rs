//! AdamW with decoupled weight decay over named parameters.

use std::collections::BTreeMap;

use super::{GradStore, ParamMut};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment state lives in flat vectors keyed by parameter name,
/// matching each tensor's standard (row-major) layout.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update over every parameter the walker visits. Parameters with
    /// no gradient in `grads` (for example frozen or off-path tensors) are
    /// left untouched, state included.
    pub fn step<V>(&mut self, grads: &GradStore, skip: impl Fn(&str) -> bool, walk: V)
    where
        V: FnOnce(&mut dyn FnMut(&str, ParamMut<'_>)),
    {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let lr = self.lr;
        let wd = self.weight_decay;
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        walk(&mut |name, param| {
            if skip(name) {
                return;
            }
            let Some(g) = grads.slice(name) else { return };
            let p: &mut [f64] = match param {
                ParamMut::Mat(w) => w.as_slice_mut().expect("standard layout"),
                ParamMut::Vec1(b) => b.as_slice_mut().expect("contiguous"),
            };
            debug_assert_eq!(p.len(), g.len(), "gradient shape mismatch for {name}");
            let m = m_map.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = v_map.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p[i]);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    #[test]
    fn single_step_matches_the_reference_formulas() {
        let mut opt = AdamW::new(0.1, 0.01);
        let mut w = Array2::from_elem((1, 2), 1.0);
        let mut grads = GradStore::default();
        grads.add_mat("p.w".into(), Array2::from_shape_vec((1, 2), vec![0.5, -0.25]).unwrap());
        opt.step(&grads, |_| false, |f| {
            f("p.w", ParamMut::Mat(&mut w));
        });
        // With zero initial state: mhat = g, vhat = g^2, so the Adam term is
        // sign(g) / (1 + eps/|g|) and decay subtracts lr * wd * p.
        for (i, &g) in [0.5f64, -0.25].iter().enumerate() {
            let adam = g / (g.abs() + ADAM_EPS);
            let want = 1.0 - 0.1 * (adam + 0.01 * 1.0);
            assert!((w[(0, i)] - want).abs() < 1e-12);
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn skipped_and_gradient_free_parameters_do_not_move() {
        let mut opt = AdamW::new(0.1, 0.01);
        let mut frozen = Array1::from_elem(3, 2.0);
        let mut unused = Array1::from_elem(3, 3.0);
        let mut live = Array1::from_elem(3, 1.0);
        let mut grads = GradStore::default();
        grads.add_vec("live.b".into(), Array1::ones(3));
        grads.add_vec("frozen.b".into(), Array1::ones(3));
        opt.step(&grads, |name| name.starts_with("frozen."), |f| {
            f("frozen.b", ParamMut::Vec1(&mut frozen));
            f("unused.b", ParamMut::Vec1(&mut unused));
            f("live.b", ParamMut::Vec1(&mut live));
        });
        assert_eq!(frozen, Array1::from_elem(3, 2.0));
        assert_eq!(unused, Array1::from_elem(3, 3.0));
        assert!(live.iter().all(|&x| x < 1.0));
        assert!(!opt.m.contains_key("frozen.b"));
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        // With zero gradient present in the store, only decay applies.
        let mut opt = AdamW::new(0.5, 0.1);
        let mut w = Array1::from_elem(1, 2.0);
        let mut grads = GradStore::default();
        grads.add_vec("w.b".into(), Array1::zeros(1));
        opt.step(&grads, |_| false, |f| f("w.b", ParamMut::Vec1(&mut w)));
        assert!((w[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }
}
