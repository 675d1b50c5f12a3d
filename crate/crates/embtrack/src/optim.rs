//! ADAM with L2 regularization, and He initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

/// ADAM hyperparameters and per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
    /// L2 coefficient; `l2 * weight` is added to the raw gradient.
    pub l2: Real,
    pub step: u64,
    first_moment: Vec<Vec<Real>>,
    second_moment: Vec<Vec<Real>>,
}

impl AdamState {
    /// Moment buffers are allocated to match `param_sizes` (one entry per
    /// parameter tensor, in a fixed order).
    pub fn new(learning_rate: Real, l2: Real, param_sizes: &[usize]) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2,
            step: 0,
            first_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.first_moment.len()
    }

    pub fn moments(&self, index: usize) -> (&[Real], &[Real]) {
        (&self.first_moment[index], &self.second_moment[index])
    }

    pub fn restore_moments(&mut self, index: usize, m: Vec<Real>, v: Vec<Real>) {
        assert_eq!(m.len(), self.first_moment[index].len());
        assert_eq!(v.len(), self.second_moment[index].len());
        self.first_moment[index] = m;
        self.second_moment[index] = v;
    }

    /// One bias-corrected ADAM update over all parameters. Panics on
    /// non-finite gradients.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "adam_step: param/grad count mismatch");
        assert_eq!(params.len(), self.first_moment.len(), "adam_step: state shape mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(param.len(), grad.len(), "adam_step: parameter {i} shape mismatch");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for ((w, &g_raw), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                assert!(g_raw.is_finite(), "adam_step: non-finite gradient");
                let g = g_raw + self.l2 * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// He initialization: zero-mean normal with variance `2 / fan_in`.
///
/// For a conv kernel `[Cout, Cin, kh, kw]` the fan-in is `Cin * kh * kw`;
/// for a bias (1-d shape) the tensor is zero.
pub fn he_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    if shape.len() <= 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<Real> = (0..n).map(|_| normal.sample(rng) as Real).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_only_shrinks_weights() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut adam = AdamState::new(0.1, 1e-5, &[2]);
        adam.step(&mut params, &grads);
        let w = params[0].data();
        // L2 turns the zero gradient into a pull toward zero.
        assert!(w[0] < 1.0 && w[0] > 0.5);
        assert!(w[1] > -2.0 && w[1] < -1.5);
    }

    #[test]
    fn without_l2_zero_gradient_keeps_params() {
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -2.0])];
        let grads = vec![Tensor::zeros(&[2])];
        let mut adam = AdamState::new(0.1, 0.0, &[2]);
        adam.step(&mut params, &grads);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_descends_quadratic() {
        // f(w) = w^2, gradient 2w; from w=1 the step must reduce w.
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0])];
        let grads = vec![Tensor::from_vec(&[1], vec![2.0])];
        let mut adam = AdamState::new(0.05, 0.0, &[1]);
        adam.step(&mut params, &grads);
        assert!(params[0].data()[0] < 1.0);
        assert!(params[0].data()[0] > 0.8);
    }

    #[test]
    fn converges_on_two_parameter_quadratic() {
        // Known minimum at w = 0; run the optimizer as its own oracle.
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -0.8])];
        let mut adam = AdamState::new(0.05, 0.0, &[2]);
        for _ in 0..200 {
            let grads = vec![params[0].map(|w| 2.0 * w)];
            adam.step(&mut params, &grads);
        }
        for &w in params[0].data() {
            assert!(w.abs() < 1e-2, "w = {w}");
        }
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn rejects_nan_gradient() {
        let mut params = vec![Tensor::from_vec(&[1], vec![1.0])];
        let grads = vec![Tensor::from_vec(&[1], vec![Real::NAN])];
        let mut adam = AdamState::new(0.05, 0.0, &[1]);
        adam.step(&mut params, &grads);
    }

    #[test]
    fn he_init_bias_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bias = he_init(&[64], &mut rng);
        assert!(bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_variance_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // fan_in = 64 * 3 * 3 = 576; 18 output channels give 10368 samples.
        let t = he_init(&[18, 64, 3, 3], &mut rng);
        let n = t.len() as Real;
        let mean: Real = t.data().iter().sum::<Real>() / n;
        let var: Real = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
        let want = 2.0 / 576.0;
        assert!((var - want).abs() < 0.2 * want, "var {var} want {want}");
    }

    #[test]
    fn he_init_is_deterministic_per_seed() {
        let a = he_init(&[4, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(7));
        let b = he_init(&[4, 2, 3, 3], &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.data(), b.data());
    }
}
