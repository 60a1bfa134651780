use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam moments and hyperparameters for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Argument(format!(
            "adam: {} params, {} gradient entries, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {} at parameter index {i} (step {})",
            grad[i],
            state.t + 1
        )));
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_from_fresh_state() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((s.m[0] - 0.1).abs() < 1e-16);
        assert!((s.v[0] - 0.001).abs() < 1e-18);
        assert!((p[0] + 0.000999999990).abs() < 1e-14, "{}", p[0]);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let (lr, b1, b2, eps) = (0.001f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut x, mut m, mut v) = (0.25f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = vec![0.25];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] - x).abs() < 1e-15);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let err = adam_step(&mut p, &[0.0, f64::NAN, 1.0], &mut s).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("index 1")));
        assert_eq!(s.t, 0);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s).is_err());
    }

    proptest! {
        // Zero gradients leave parameters fixed whenever the first moment is
        // zero, whatever the step count and second moments.
        #[test]
        fn zero_gradient_identity(
            p in proptest::collection::vec(-5.0f64..5.0, 1..20),
            t in 0u64..10_000,
            vs in proptest::collection::vec(0.0f64..10.0, 20),
        ) {
            let mut s = AdamState::new(p.len());
            s.t = t;
            s.v.copy_from_slice(&vs[..p.len()]);
            let mut q = p.clone();
            adam_step(&mut q, &vec![0.0; p.len()], &mut s).unwrap();
            prop_assert_eq!(q, p);
            prop_assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }
}
