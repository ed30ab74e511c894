//! Parameter updates. The plain rule is `w -= lr * g`; an adaptive
//! first/second-moment mode is the default for fine-tuning. Firing
//! thresholds are never part of the update.

use crate::error::{Result, SnnError};
use crate::network::NetworkParams;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step_count: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T, params: &NetworkParams<T>) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (params.zeros_like(), params.zeros_like()),
        };
        Optimizer {
            kind,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step_count: 0,
            m,
            v,
        }
    }

    /// Apply one update from per-slot gradients. `clip` bounds the global
    /// gradient norm when set.
    pub fn step(
        &mut self,
        params: &mut NetworkParams<T>,
        grads: &[Tensor<T>],
        clip: Option<T>,
    ) -> Result<()> {
        if grads.len() != params.weights.len() {
            return Err(SnnError::Config(format!(
                "optimizer got {} gradient slots for {} weight slots",
                grads.len(),
                params.weights.len()
            )));
        }
        let scale = match clip {
            Some(max_norm) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|&g| g.to_f64() * g.to_f64())
                    .sum();
                let norm = sq.sqrt();
                if norm > max_norm.to_f64() && norm > 0.0 {
                    T::from_f64(max_norm.to_f64() / norm)
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.weights.iter_mut().zip(grads.iter()) {
                    let wd = w.data_mut();
                    for (wi, &gi) in wd.iter_mut().zip(g.data().iter()) {
                        *wi = *wi - self.lr * scale * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = T::one() - self.beta1.powi(t);
                let bc2 = T::one() - self.beta2.powi(t);
                for (((w, g), m), v) in params
                    .weights
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    let wd = w.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for i in 0..wd.len() {
                        let gi = g.data()[i] * scale;
                        md[i] = self.beta1 * md[i] + (T::one() - self.beta1) * gi;
                        vd[i] = self.beta2 * vd[i] + (T::one() - self.beta2) * gi * gi;
                        let m_hat = md[i] / bc1;
                        let v_hat = vd[i] / bc2;
                        wd[i] = wd[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        for (i, w) in params.weights.iter().enumerate() {
            w.ensure_finite(&format!("weights of slot {i} after optimizer step"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchitectureSpec, Layer};

    fn tiny() -> (ArchitectureSpec, NetworkParams<f64>) {
        let arch = ArchitectureSpec::new(
            (1, 1, 1),
            2,
            vec![Layer::Linear { out: 2 }],
        )
        .unwrap();
        let params = NetworkParams::random_init(&arch, 0).unwrap();
        (arch, params)
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let (_, mut params) = tiny();
        params.weights[0] = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &params);
        let grads = vec![Tensor::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap()];
        opt.step(&mut params, &grads, None).unwrap();
        assert!((params.weights[0].data()[0] - 0.9).abs() < 1e-12);
        assert!((params.weights[0].data()[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_leave_weights_unchanged() {
        let (_, mut params) = tiny();
        let before = params.weights.clone();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.05, &params);
            let grads = params.zeros_like();
            opt.step(&mut params, &grads, None).unwrap();
            assert_eq!(params.weights, before);
        }
    }

    #[test]
    fn thresholds_never_updated() {
        let (_, mut params) = tiny();
        params.thresholds[0] = Some(1.25);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &params);
        let grads = vec![Tensor::filled(params.weights[0].shape(), 1.0)];
        for _ in 0..5 {
            opt.step(&mut params, &grads, None).unwrap();
        }
        assert_eq!(params.thresholds[0], Some(1.25));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize 0.5 * w^2 elementwise; gradient is w
        let (_, mut params) = tiny();
        params.weights[0] = Tensor::from_vec(&[2, 1], vec![3.0, -2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, &params);
        let mut last = f64::INFINITY;
        for i in 0..100 {
            let g = vec![params.weights[0].clone()];
            opt.step(&mut params, &g, None).unwrap();
            let loss: f64 = params.weights[0]
                .data()
                .iter()
                .map(|&w| 0.5 * w * w)
                .sum();
            if i % 10 == 9 {
                assert!(loss < last, "loss not decreasing at step {i}");
                last = loss;
            }
        }
        assert!(last < 0.5);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let (_, mut params) = tiny();
        params.weights[0] = Tensor::from_vec(&[2, 1], vec![0.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, &params);
        let grads = vec![Tensor::from_vec(&[2, 1], vec![30.0, 40.0]).unwrap()];
        opt.step(&mut params, &grads, Some(5.0)).unwrap();
        // gradient norm 50 clipped to 5: scaled by 0.1
        assert!((params.weights[0].data()[0] + 3.0).abs() < 1e-9);
        assert!((params.weights[0].data()[1] + 4.0).abs() < 1e-9);
    }
}
