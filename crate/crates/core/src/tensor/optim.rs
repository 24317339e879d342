use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
///
/// Buffers are allocated on the first step and keyed by position, so callers
/// must pass the same parameter list in the same order on every step.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f32> {
    pub learning_rate: f64,
    pub kind: OptimizerKind,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn adam(learning_rate: f64) -> Self {
        Self::new(learning_rate, OptimizerKind::default())
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(learning_rate, OptimizerKind::Sgd)
    }

    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Self {
        OptimizerState {
            learning_rate,
            kind,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.second_moment
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TensorError::Usage(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if params.len() != grads.len() {
            return Err(TensorError::dim(
                "optimizer_step",
                "params",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::dim(
                    "optimizer_step",
                    format!("param {i}"),
                    format!("{:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.numel())
        {
            return Err(TensorError::dim(
                "optimizer_step",
                "moments",
                "parameter list changed between steps".to_string(),
            ));
        }
        self.step_count += 1;
        let lr = T::from_f64_lossy(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.add_scaled(g, -lr)?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                let bc1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                let bc2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                let eps = T::from_f64_lossy(eps);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (((w, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
