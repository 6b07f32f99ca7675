//! CART regression trees with variance-reduction splits, shared by the
//! random forest and gradient boosting surrogates.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features considered per split; `None` means all.
    pub max_features: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl RegressionTree {
    /// Fit on the rows named by `sample` (which may repeat, e.g. a bootstrap).
    /// `rng` is consumed only when `max_features` subsamples.
    pub fn fit(x: &[Vec<f64>], y: &[f64], sample: &[usize], params: &TreeParams, rng: &mut Rng) -> Self {
        assert!(!sample.is_empty(), "cannot fit a tree on an empty sample");
        let mut tree = Self { nodes: Vec::new() };
        tree.grow(x, y, sample.to_vec(), 0, params, rng);
        tree
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn grow(
        &mut self,
        x: &[Vec<f64>],
        y: &[f64],
        rows: Vec<usize>,
        depth: usize,
        params: &TreeParams,
        rng: &mut Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: leaf_value(y, &rows),
        });
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || rows.len() < 2 * params.min_leaf.max(1) {
            return id;
        }
        let Some(split) = best_split(x, y, &rows, params, rng) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| x[r][split.feature] <= split.threshold);
        let left = self.grow(x, y, left_rows, depth + 1, params, rng);
        let right = self.grow(x, y, right_rows, depth + 1, params, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Mean of the targets, clamped to their range so float summation can never
/// push a leaf outside `[min, max]`.
fn leaf_value(y: &[f64], rows: &[usize]) -> f64 {
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &r in rows {
        lo = lo.min(y[r]);
        hi = hi.max(y[r]);
        sum += y[r];
    }
    (sum / rows.len() as f64).clamp(lo, hi)
}

/// Largest SSE reduction over candidate features. Ties keep the lowest
/// feature index, then the lowest threshold.
fn best_split(x: &[Vec<f64>], y: &[f64], rows: &[usize], params: &TreeParams, rng: &mut Rng) -> Option<SplitChoice> {
    let n = rows.len();
    let dim = x[rows[0]].len();
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64;
    let node_sse: f64 = rows.iter().map(|&r| (y[r] - mean).powi(2)).sum();
    if node_sse <= 0.0 {
        return None;
    }
    let features: Vec<usize> = match params.max_features {
        Some(m) if m < dim => {
            let mut f = index::sample(rng, dim, m).into_vec();
            f.sort_unstable();
            f
        }
        _ => (0..dim).collect(),
    };
    let min_leaf = params.min_leaf.max(1);
    let total: f64 = rows.iter().map(|&r| y[r] - mean).sum();
    let base = total * total / n as f64;
    let mut best: Option<SplitChoice> = None;
    let mut order = rows.to_vec();
    for &f in &features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left_sum = 0.0;
        for i in 1..n {
            left_sum += y[order[i - 1]] - mean;
            let (lo, hi) = (x[order[i - 1]][f], x[order[i]][f]);
            if i < min_leaf || n - i < min_leaf || lo >= hi {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / i as f64 + right_sum * right_sum / (n - i) as f64 - base;
            if gain > node_sse * 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: lo + (hi - lo) / 2.0,
                    gain,
                });
            }
        }
    }
    best
}
