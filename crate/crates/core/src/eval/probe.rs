use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::EvalError;

pub const PROBE_RIDGE: f64 = 1e-6;

/// Linear regressor `y ≈ w·x + b` fitted by ridge-regularised least squares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    /// Closed-form normal equations on centred data, so the intercept is not penalised.
    pub fn fit(x: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Self, EvalError> {
        if x.len() != y.len() {
            return Err(EvalError::LengthMismatch(x.len(), y.len()));
        }
        let n = x.len();
        if n == 0 {
            return Err(EvalError::TooFewPoints(0));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(EvalError::InvalidConfig("probe rows differ in width".into()));
        }
        let mean_x: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mean_y = y.iter().sum::<f64>() / n as f64;
        let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean_x[j]);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean_y));
        let gram = xc.transpose() * &xc + DMatrix::identity(d, d) * ridge;
        let rhs = xc.transpose() * yc;
        let w = gram
            .cholesky()
            .ok_or_else(|| EvalError::InvalidConfig("probe normal equations are not positive definite".into()))?
            .solve(&rhs);
        let weights: Vec<f64> = w.iter().copied().collect();
        let bias = mean_y - weights.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>();
        Ok(Self { weights, bias })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}
