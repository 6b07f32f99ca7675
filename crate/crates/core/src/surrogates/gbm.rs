use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, TreeParams};
use super::Predictor;
use crate::rng::rng_from_seed;

/// Stagewise squared-error boosting of depth-limited CART trees, starting
/// from the target mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBoosting {
    init: f64,
    learning_rate: f64,
    trees: Vec<RegressionTree>,
    dim: usize,
}

impl GradientBoosting {
    pub fn fit(x: &[Vec<f64>], y: &[f64], n_rounds: usize, learning_rate: f64, max_depth: usize) -> Self {
        let n = y.len();
        let init = y.iter().sum::<f64>() / n as f64;
        let params = TreeParams {
            max_depth: Some(max_depth),
            min_leaf: 1,
            max_features: None,
        };
        let rows: Vec<usize> = (0..n).collect();
        // no feature subsampling, so the rng is never drawn from
        let mut rng = rng_from_seed(0);
        // boost on the centered target so an offset in y is not carried through every round
        let centered: Vec<f64> = y.iter().map(|t| t - init).collect();
        let mut current = vec![0.0; n];
        let mut trees = Vec::with_capacity(n_rounds);
        for _ in 0..n_rounds {
            let residuals: Vec<f64> = centered.iter().zip(&current).map(|(t, p)| t - p).collect();
            let tree = RegressionTree::fit(x, &residuals, &rows, &params, &mut rng);
            for (p, row) in current.iter_mut().zip(x) {
                *p += learning_rate * tree.predict(row);
            }
            trees.push(tree);
        }
        Self {
            init,
            learning_rate,
            trees,
            dim: x[0].len(),
        }
    }

    /// Training-set predictions after each prefix of rounds, `0..=n_rounds`.
    pub fn staged_predict(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut current = vec![0.0; x.len()];
        let mut stages = vec![vec![self.init; x.len()]];
        for tree in &self.trees {
            for (p, row) in current.iter_mut().zip(x) {
                *p += self.learning_rate * tree.predict(row);
            }
            stages.push(current.iter().map(|p| self.init + p).collect());
        }
        stages
    }

    pub fn init(&self) -> f64 {
        self.init
    }
}

impl Predictor for GradientBoosting {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        self.init
            + self
                .trees
                .iter()
                .fold(0.0, |acc, t| acc + self.learning_rate * t.predict(row))
    }
}
