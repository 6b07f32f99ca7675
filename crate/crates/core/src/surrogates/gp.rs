use serde::{Deserialize, Serialize};

use super::{Predictor, SurrogateError};
use crate::linalg::{cholesky, solve_lower, solve_lower_transposed};

const JITTER_START: f64 = 1e-10;
const JITTER_STEPS: i32 = 6;

/// Zero-mean GP posterior mean with a fixed RBF kernel, fitted on
/// standardized targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianProcess {
    length_scale: f64,
    signal_variance: f64,
    x_train: Vec<Vec<f64>>,
    /// Row-major lower Cholesky factor of `K + (noise + jitter) I`.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    jitter: f64,
}

pub fn rbf(a: &[f64], b: &[f64], length_scale: f64, signal_variance: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
    signal_variance * (-d2 / (2.0 * length_scale * length_scale)).exp()
}

pub fn kernel_matrix(x: &[Vec<f64>], length_scale: f64, signal_variance: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rbf(&x[i], &x[j], length_scale, signal_variance);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Mean and population standard deviation; a degenerate spread maps to 1 so
/// constant targets stay finite.
pub fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd < 1e-12 { 1.0 } else { sd })
}

impl GaussianProcess {
    pub fn fit(
        x: &[Vec<f64>],
        y: &[f64],
        length_scale: f64,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self, SurrogateError> {
        let n = x.len();
        let (y_mean, y_scale) = standardization(y);
        let z: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let k = kernel_matrix(x, length_scale, signal_variance);
        let mut last_jitter = 0.0;
        for step in 0..=JITTER_STEPS {
            let jitter = JITTER_START * signal_variance * 10f64.powi(step);
            last_jitter = jitter;
            let mut a = k.clone();
            for i in 0..n {
                a[i * n + i] += noise_variance + jitter;
            }
            if let Some(chol) = cholesky(&a, n) {
                let alpha = solve_lower_transposed(&chol, n, &solve_lower(&chol, n, &z));
                return Ok(Self {
                    length_scale,
                    signal_variance,
                    x_train: x.to_vec(),
                    chol,
                    alpha,
                    y_mean,
                    y_scale,
                    jitter,
                });
            }
        }
        Err(SurrogateError::CholeskyFailed { jitter: last_jitter })
    }

    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    /// Dual weights in standardized units.
    pub fn dual_weights(&self) -> &[f64] {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_scale)
    }
}

impl Predictor for GaussianProcess {
    fn input_dim(&self) -> usize {
        self.x_train[0].len()
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        let standardized: f64 = self
            .x_train
            .iter()
            .zip(&self.alpha)
            .map(|(xi, a)| a * rbf(row, xi, self.length_scale, self.signal_variance))
            .sum();
        self.y_mean + self.y_scale * standardized
    }
}
