//! Named parameter storage with per-parameter Adamax state.

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;

/// One learned tensor plus its optimizer state.
///
/// `grad` is `Some` once gradients have been accumulated and is cleared by
/// the optimizer step. `m` is the first-moment estimate, `u` the running
/// infinity norm.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub step: u64,
}

/// Parameters keyed by path-like names. Iteration order is the sorted name
/// order, which keeps every reduction and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::ShapeMismatch {
                op: "param insert",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                value,
                grad: None,
                m: vec![0.0; n],
                u: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    /// Matrix initialized uniformly in +-sqrt(6 / (fan_in + fan_out)).
    pub fn insert_xavier(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, &[rows, cols], data)
    }

    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], fill: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![fill; n])
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sorted iteration over (name, param).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if delta.len() != p.value.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = p.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adamax update with a single learning rate for every parameter.
    ///
    /// Per element: `m <- b1*m + (1-b1)*g`, `u <- max(b2*u, |g|)`,
    /// `p <- p - (lr / (1 - b1^t)) * m / (u + eps)`. Gradients are cleared
    /// afterwards.
    pub fn adamax_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        self.adamax_step_with(|_| lr, beta1, beta2, eps)
    }

    /// Adamax update with a per-parameter learning rate, used to hold the
    /// question-encoder group at its own fixed rate.
    pub fn adamax_step_with(
        &mut self,
        lr_for: impl Fn(&str) -> f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        for (name, p) in self.params.iter() {
            if p.grad.is_none() {
                return Err(Error::Usage(format!(
                    "adamax_step before any gradient reached parameter {name:?}"
                )));
            }
        }
        for (name, p) in self.params.iter_mut() {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let bias = 1.0 - beta1.powi(p.step as i32);
            let lr_t = lr_for(name) / bias;
            for i in 0..p.value.len() {
                p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g[i];
                p.u[i] = (beta2 * p.u[i]).max(g[i].abs());
                p.value[i] -= lr_t * p.m[i] / (p.u[i] + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent three-line recurrence used as the update oracle.
    fn adamax_reference(
        p0: f64,
        grads: &[f64],
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
    ) -> f64 {
        let (mut p, mut m, mut u) = (p0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            u = (b2 * u).max(g.abs());
            let lr_t = lr / (1.0 - b1.powi(t as i32 + 1));
            p -= lr_t * m / (u + eps);
        }
        p
    }

    #[test]
    fn zero_gradient_fresh_state_is_noop() {
        let mut s = ParameterStore::new();
        s.insert("w", &[2], vec![1.5, -2.0]).unwrap();
        s.accumulate_grad("w", &[0.0, 0.0]).unwrap();
        s.adamax_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(s.get("w").unwrap().value, vec![1.5, -2.0]);
    }

    #[test]
    fn single_step_matches_reference_recurrence() {
        let mut s = ParameterStore::new();
        s.insert("w", &[1], vec![1.0]).unwrap();
        s.accumulate_grad("w", &[1.0]).unwrap();
        s.adamax_step(0.1, 0.9, 0.999, 1e-8).unwrap();
        let expected = adamax_reference(1.0, &[1.0], 0.1, 0.9, 0.999, 1e-8);
        let got = s.get("w").unwrap().value[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn two_steps_constant_gradient_match_reference() {
        let mut s = ParameterStore::new();
        s.insert("w", &[1], vec![0.3]).unwrap();
        for _ in 0..2 {
            s.accumulate_grad("w", &[0.5]).unwrap();
            s.adamax_step(0.05, 0.9, 0.999, 1e-8).unwrap();
        }
        let expected = adamax_reference(0.3, &[0.5, 0.5], 0.05, 0.9, 0.999, 1e-8);
        let got = s.get("w").unwrap().value[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn step_without_grad_is_usage_error() {
        let mut s = ParameterStore::new();
        s.insert("a", &[1], vec![0.0]).unwrap();
        s.insert("b", &[1], vec![0.0]).unwrap();
        s.accumulate_grad("a", &[1.0]).unwrap();
        let err = s.adamax_step(0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.is_usage(), "{err}");
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", &[1], vec![0.0]).unwrap();
        assert!(s.insert("w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn iteration_is_name_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new();
        s.insert_xavier("z.w", 2, 2, &mut rng).unwrap();
        s.insert_xavier("a.w", 2, 2, &mut rng).unwrap();
        s.insert_xavier("m.w", 2, 2, &mut rng).unwrap();
        let names: Vec<_> = s.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, vec!["a.w", "m.w", "z.w"]);
    }

    #[test]
    fn grouped_learning_rates_apply_per_prefix() {
        let mut s = ParameterStore::new();
        s.insert("enc.w", &[1], vec![1.0]).unwrap();
        s.insert("head.w", &[1], vec![1.0]).unwrap();
        s.accumulate_grad("enc.w", &[1.0]).unwrap();
        s.accumulate_grad("head.w", &[1.0]).unwrap();
        s.adamax_step_with(
            |n| if n.starts_with("enc.") { 0.0 } else { 0.1 },
            0.9,
            0.999,
            1e-8,
        )
        .unwrap();
        assert_eq!(s.get("enc.w").unwrap().value[0], 1.0);
        assert!(s.get("head.w").unwrap().value[0] < 1.0);
    }
}
