//! Bias-corrected ADAM over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfarlError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SfarlError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(SfarlError::InvalidArgument(format!(
                "ADAM betas must lie in (0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(SfarlError::InvalidArgument(
                "ADAM epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One ADAM update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(SfarlError::shape(
            format!("{} parameters", state.len()),
            format!("{} parameters and {} gradients", params.len(), grads.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Rescales `grads` so that its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut s, &mut p, &[0.0, 0.0], &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut s, &mut p, &[0.5, -3.0, 100.0], &cfg).unwrap();
        for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * cfg.learning_rate).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig::default();
        let p0 = vec![0.3, -0.2, 0.1];
        let n0 = p0.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let mut p = p0.clone();
        let mut s = AdamState::new(3);
        let mut norms = Vec::new();
        for _ in 0..500 {
            let g = p.clone();
            adam_step(&mut s, &mut p, &g, &cfg).unwrap();
            norms.push(p.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        // monotone after burn-in
        for w in norms[20..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(
            *norms.last().unwrap() < 0.1 * n0,
            "{}",
            norms.last().unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut s, &mut p, &[0.0; 3], &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![300.0, 400.0];
        assert_eq!(clip_global_norm(&mut g, 100.0), 500.0);
        assert!((g[0] - 60.0).abs() < 1e-12 && (g[1] - 80.0).abs() < 1e-12);
        let mut small = vec![1.0, 1.0];
        clip_global_norm(&mut small, 100.0);
        assert_eq!(small, vec![1.0, 1.0]);
    }
}
