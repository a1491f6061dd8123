use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Adam optimizer state over a fixed list of parameter tensors.
///
/// Moment estimates are kept per parameter and the update applies the usual
/// bias correction. `step_count` increases by one per [`Adam::step`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    /// Fresh state with the defaults beta1=0.9, beta2=0.999, epsilon=1e-8.
    pub fn new(learning_rate: f64, param_shapes: &[(usize, usize)]) -> Self {
        Adam::with_betas(learning_rate, 0.9, 0.999, 1e-8, param_shapes)
    }

    pub fn with_betas(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        param_shapes: &[(usize, usize)],
    ) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: param_shapes
                .iter()
                .map(|&(r, c)| Tensor::zeros(r, c))
                .collect(),
            second_moment: param_shapes
                .iter()
                .map(|&(r, c)| Tensor::zeros(r, c))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One Adam update over all parameters, in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params / {} grads for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "param {i}: param {:?}, grad {:?}, moment {:?}",
                        p.shape(),
                        g.shape(),
                        self.first_moment[i].shape()
                    ),
                ));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for idx in 0..pd.len() {
                let g = grad.data()[idx];
                md[idx] = self.beta1 * md[idx] + (1.0 - self.beta1) * g;
                vd[idx] = self.beta2 * vd[idx] + (1.0 - self.beta2) * g * g;
                let m_hat = md[idx] / bias1;
                let v_hat = vd[idx] / bias2;
                pd[idx] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::row_vector(&[0.3, -1.2, 4.5]);
        let orig = p.clone();
        let mut adam = Adam::new(0.002, &[(1, 3)]);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        // With gradient 1.0 on a fresh state, m_hat = v_hat = 1, so the update
        // is lr / (1 + eps) which is 0.002 up to the epsilon perturbation.
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::with_betas(0.002, 0.9, 0.999, 1e-8, &[(1, 1)]);
        adam.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let delta = 1.0 - p.item();
        assert!((delta - 0.002).abs() < 1e-9, "delta={delta}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_seeds_give_bit_identical_trajectories() {
        let run = || {
            let mut p = Tensor::row_vector(&[0.5, -0.25]);
            let mut adam = Adam::new(0.01, &[(1, 2)]);
            for k in 0..20 {
                // Deterministic pseudo-gradient sequence.
                let g = Tensor::row_vector(&[(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()]);
                adam.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(2, 2);
        let mut adam = Adam::new(0.002, &[(2, 2)]);
        let err = adam
            .step(&mut [&mut p], &[Tensor::zeros(1, 4)])
            .unwrap_err();
        assert!(err.to_string().contains("adam_step"));
    }
}
