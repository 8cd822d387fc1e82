use serde::{Deserialize, Serialize};

use crate::{CenterId, Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }
}

impl Adam {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// One bias-corrected update. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState, center: Option<CenterId>) -> Result<()> {
        if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, state of {}",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { center });
        }
        state.steps += 1;
        let t = state.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let mh = state.m[i] / c1;
            let vh = state.v[i] / c2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_leaves_parameters() {
        let a = Adam {
            learning_rate: 0.0,
            ..Adam::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        a.step(&mut p, &[0.3, -0.1], &mut s, None).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // At the default rate of 1e-3 the norm is still about 0.06 after 2,000 steps.
        let a = Adam {
            learning_rate: 1e-2,
            ..Adam::default()
        };
        let mut w = vec![1.0; 8];
        let mut s = AdamState::new(8);
        for _ in 0..2000 {
            let g: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
            a.step(&mut w, &g, &mut s, None).unwrap();
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let a = Adam::default();
        let mut w = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        for _ in 0..500 {
            let before = w.clone();
            a.step(&mut w, &[3.0, -0.01], &mut s, None).unwrap();
            let d0 = (w[0] - before[0]) / a.learning_rate;
            let d1 = (w[1] - before[1]) / a.learning_rate;
            assert!((d0 + 1.0).abs() < 1e-5 && (d1 - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn non_finite_gradient_names_center() {
        let a = Adam::default();
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let id = CenterId::new(2, 5);
        let e = a.step(&mut p, &[f64::NAN], &mut s, Some(id)).unwrap_err();
        assert!(matches!(e, Error::NonFiniteGradient { center: Some(c) } if c == id));
        assert_eq!(s.steps, 0);
    }
}
