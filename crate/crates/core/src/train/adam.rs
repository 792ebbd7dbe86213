use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Coupled L2 penalty: added to the gradient before the moments.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Array2::zeros(s), Array2::zeros(s)))
            .unzip();
        Self { config, step: 0, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Gradients are checked for non-finite
    /// entries before any parameter is touched.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::param(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dim() != g.dim() || p.dim() != self.m[i].dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.dim(),
                    right: g.dim(),
                });
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                let name = names.get(i).map_or("?", String::as_str);
                return Err(Error::Numerical(format!("gradient of `{name}` contains {bad}")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.into_iter().enumerate() {
            Zip::from(p)
                .and(&grads[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|theta, &g, m, v| {
                    let g = g + weight_decay * *theta;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *theta -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::random_matrix;
    use ndarray::array;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = random_matrix(3, 2, 1);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::new(0.1, 0.0), [(3, 2)]);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Array2::zeros((3, 2))], &names(1)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = array![[2.0]];
        let mut adam = AdamState::new(AdamConfig::new(0.1, 0.0), [(1, 1)]);
        adam.step(vec![&mut p], &[array![[1.0]]], &names(1)).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        assert!((p[[0, 0]] - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = random_matrix(4, 4, 3);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::new(0.0, 0.01), [(4, 4)]);
        adam.step(vec![&mut p], &[random_matrix(4, 4, 4)], &names(1)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn coupled_decay_enters_gradient() {
        // with g = 0 the decay term alone drives the first step
        let mut p = array![[3.0]];
        let mut adam = AdamState::new(AdamConfig::new(0.1, 0.5), [(1, 1)]);
        adam.step(vec![&mut p], &[array![[0.0]]], &names(1)).unwrap();
        assert!((p[[0, 0]] - (3.0 - 0.1 * 1.5 / (1.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn deterministic_over_ten_steps() {
        let run = || {
            let mut a = random_matrix(3, 3, 7);
            let mut b = random_matrix(1, 3, 8);
            let mut adam = AdamState::new(AdamConfig::new(0.01, 1e-3), [(3, 3), (1, 3)]);
            for s in 0..10 {
                let g = [random_matrix(3, 3, 100 + s), random_matrix(1, 3, 200 + s)];
                adam.step(vec![&mut a, &mut b], &g, &names(2)).unwrap();
            }
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut a = array![[1.0]];
        let mut b = array![[1.0, 2.0]];
        let mut adam = AdamState::new(AdamConfig::new(0.1, 0.0), [(1, 1), (1, 2)]);
        let err = adam
            .step(vec![&mut a, &mut b], &[array![[0.5]], array![[0.0, f64::NAN]]], &["w".into(), "bias".into()])
            .unwrap_err();
        assert!(err.to_string().contains("`bias`"), "{err}");
        assert_eq!(a, array![[1.0]]);
        assert_eq!(adam.steps(), 0);
    }
}
