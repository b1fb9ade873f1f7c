use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// `(1/batch) · Σ_samples Σ_targets (y − ŷ)²`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    if pred.rows() == 0 {
        return Err(Error::Argument("mse_loss on an empty batch".into()));
    }
    let sse: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sse / pred.rows() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain `θ ← θ − η·g`.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let m: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params / {} moments", params.len(), state.m.len()),
            format!("{} grads", grads.len()),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let AdamHyper {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        eps,
    } = *hyper;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, theta) in p.as_mut_slice().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", params.len(), grads.len()));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for (theta, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *theta -= learning_rate * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        let y = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mse_loss(&y, &y).unwrap(), 0.0);
        let p = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0], [0.0]]).unwrap();
        assert_eq!(mse_loss(&p, &t).unwrap(), 5.0);
        let p = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(mse_loss(&p, &t).unwrap(), 5.0);
        assert!(matches!(mse_loss(&p, &y), Err(Error::Shape { .. })));
    }

    fn scalar_step(theta: f64, g: f64, state: &mut AdamState, hyper: &AdamHyper) -> f64 {
        let mut p = Matrix::row_vector(&[theta]);
        adam_step(&mut [&mut p], &[Matrix::row_vector(&[g])], state, hyper).unwrap();
        p.as_slice()[0]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p0 = Matrix::row_vector(&[0.3, -1.0]);
        let mut p = p0.clone();
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Matrix::zeros(1, 2)], &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(p, p0);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_hand_trace() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1 → θ = −0.1·1/(1 + 1e-8)
        let hyper = AdamHyper {
            learning_rate: 0.1,
            ..AdamHyper::default()
        };
        let mut state = AdamState::new([&Matrix::zeros(1, 1)]);
        let theta = scalar_step(0.0, 1.0, &mut state, &hyper);
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((theta - expected).abs() < 1e-15, "{theta}");
        assert!((state.m[0].as_slice()[0] - 0.1).abs() < 1e-15);
        assert!((state.v[0].as_slice()[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let hyper = AdamHyper::default();
        let mut state = AdamState::new([&Matrix::zeros(1, 1)]);
        let a = scalar_step(0.0, 1.0, &mut state, &hyper);
        let b = scalar_step(a, 1.0, &mut state, &hyper);
        assert!(a < 0.0 && b < a);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Matrix::zeros(1, 2);
        let mut state = AdamState::new([&p]);
        let err = adam_step(&mut [&mut p], &[Matrix::zeros(2, 1)], &mut state, &AdamHyper::default());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn sgd_matches_plain_gradient_descent() {
        let mut p = Matrix::row_vector(&[1.0, 2.0]);
        sgd_step(&mut [&mut p], &[Matrix::row_vector(&[0.5, -1.0])], 0.1).unwrap();
        assert_eq!(p.as_slice(), &[0.95, 2.1]);
    }

    proptest! {
        #[test]
        fn zero_learning_rate_is_a_no_op(
            theta in prop::collection::vec(-10.0..10.0f64, 1..8),
            steps in 1usize..5,
            seed_grad in -5.0..5.0f64,
        ) {
            let hyper = AdamHyper { learning_rate: 0.0, ..AdamHyper::default() };
            let mut p = Matrix::row_vector(&theta);
            let mut state = AdamState::new([&p]);
            for s in 0..steps {
                let g: Vec<f64> = theta.iter().map(|t| t * seed_grad + s as f64).collect();
                adam_step(&mut [&mut p], &[Matrix::row_vector(&g)], &mut state, &hyper).unwrap();
            }
            prop_assert_eq!(p.as_slice(), theta.as_slice());
        }
    }
}
