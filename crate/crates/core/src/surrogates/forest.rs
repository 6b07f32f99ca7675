use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tree::{RegressionTree, TreeParams};
use super::Predictor;
use crate::rng::{derive_seed, rng_from_seed};

/// Bagged CART trees; each split looks at `ceil(d / 3)` random features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<RegressionTree>,
    dim: usize,
}

impl RandomForest {
    pub fn fit(
        x: &[Vec<f64>],
        y: &[f64],
        n_trees: usize,
        max_depth: Option<usize>,
        min_leaf: usize,
        seed: u64,
    ) -> Self {
        let n = x.len();
        let dim = x[0].len();
        let params = TreeParams {
            max_depth,
            min_leaf,
            max_features: Some(dim.div_ceil(3).max(1)),
        };
        let trees = (0..n_trees)
            .map(|t| {
                let mut rng = rng_from_seed(derive_seed(seed, t as u64));
                let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                RegressionTree::fit(x, y, &sample, &params, &mut rng)
            })
            .collect();
        Self { trees, dim }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

impl Predictor for RandomForest {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}
