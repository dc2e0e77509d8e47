use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam step, in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                context: "adam update",
                expected: self.m.len(),
                actual: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((w, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut w = [0.0];
        state.update(&mut w, &[1.0], 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-18);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut w = [0.5, -2.0, 7.25];
        state.update(&mut w, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(w, [0.5, -2.0, 7.25]);
    }

    #[test]
    fn two_steps_match_hand_unrolled() {
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 0.01, 0.5);
        let mut w_ref = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut w = [1.0];
        state.update(&mut w, &[g], lr).unwrap();
        state.update(&mut w, &[g], lr).unwrap();
        assert!((w[0] - w_ref).abs() < 1e-15);
        assert!(state.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut state = AdamState::new(2, AdamConfig::default());
        assert!(state.update(&mut [0.0; 3], &[0.0; 3], 1e-3).is_err());
    }
}
