//! Depth-limited regression trees with exact greedy variance-reduction
//! splits: every threshold between consecutive distinct values of every
//! candidate feature is scored by the weighted child squared error.

use crate::rng::Rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        /// Rows go left when `x[feature] < threshold`.
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Candidate features per split; `None` means all.
    pub features_per_split: Option<usize>,
}

impl RegressionTree {
    /// Fit on the rows selected by `indices`. `rng` drives the per-split
    /// feature subsample; unused when all features are candidates.
    pub fn fit(
        x: &[Vec<f64>],
        y: &[f64],
        indices: &[usize],
        params: &TreeParams,
        rng: &mut Rng,
    ) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        let mut idx = indices.to_vec();
        tree.grow(x, y, &mut idx, 0, params, rng);
        tree
    }

    fn grow(
        &mut self,
        x: &[Vec<f64>],
        y: &[f64],
        indices: &mut [usize],
        depth: usize,
        params: &TreeParams,
        rng: &mut Rng,
    ) -> usize {
        let mean = indices.iter().map(|&i| y[i]).sum::<f64>() / indices.len() as f64;
        let constant = indices.iter().all(|&i| y[i] == y[indices[0]]);
        if depth >= params.max_depth
            || indices.len() < 2 * params.min_samples_leaf
            || constant
        {
            self.nodes.push(TreeNode::Leaf { value: mean });
            return self.nodes.len() - 1;
        }
        let split = match best_split(x, y, indices, params, rng) {
            Some(s) => s,
            None => {
                self.nodes.push(TreeNode::Leaf { value: mean });
                return self.nodes.len() - 1;
            }
        };
        // Partition in place, preserving stability via sort keys.
        let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| x[i][split.feature] < split.threshold);
        let node = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: mean }); // placeholder
        let left = self.grow(x, y, &mut left_idx, depth + 1, params, rng);
        let right = self.grow(x, y, &mut right_idx, depth + 1, params, rng);
        self.nodes[node] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        node
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if row[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }
}

struct Split {
    feature: usize,
    threshold: f64,
}

/// Exhaustive scan for the split minimizing the summed child SSE. Returns
/// `None` when no candidate feature separates the rows.
fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    indices: &[usize],
    params: &TreeParams,
    rng: &mut Rng,
) -> Option<Split> {
    let n_features = x[indices[0]].len();
    let candidates: Vec<usize> = match params.features_per_split {
        Some(k) if k < n_features => {
            let mut all: Vec<usize> = (0..n_features).collect();
            all.shuffle(rng);
            let mut picked: Vec<usize> = all.into_iter().take(k).collect();
            picked.sort_unstable();
            picked
        }
        _ => (0..n_features).collect(),
    };

    let total: f64 = indices.iter().map(|&i| y[i]).sum();
    let n = indices.len();
    let mut best: Option<(f64, Split)> = None;
    let mut sorted = indices.to_vec();
    for &f in &candidates {
        sorted.sort_by(|&a, &b| {
            x[a][f].partial_cmp(&x[b][f]).unwrap().then(a.cmp(&b))
        });
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        let total_sq: f64 = indices.iter().map(|&i| y[i] * y[i]).sum();
        for k in 0..n - 1 {
            let i = sorted[k];
            left_sum += y[i];
            left_sq += y[i] * y[i];
            let (a, b) = (x[sorted[k]][f], x[sorted[k + 1]][f]);
            if a == b {
                continue;
            }
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < params.min_samples_leaf || n_right < params.min_samples_leaf {
                continue;
            }
            // SSE = sum(y^2) - (sum y)^2 / n, per child.
            let right_sum = total - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / n_left as f64)
                + (right_sq - right_sum * right_sum / n_right as f64);
            let threshold = (a + b) / 2.0;
            let better = match &best {
                None => true,
                Some((best_sse, _)) => sse + 1e-12 < *best_sse,
            };
            if better {
                best = Some((sse, Split { feature: f, threshold }));
            }
        }
    }
    best.map(|(_, s)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn params(max_depth: usize) -> TreeParams {
        TreeParams {
            max_depth,
            min_samples_leaf: 1,
            features_per_split: None,
        }
    }

    #[test]
    fn stump_splits_two_points_at_the_midpoint() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![0.0, 10.0];
        let tree = RegressionTree::fit(&x, &y, &[0, 1], &params(1), &mut rng_for(0, 0));
        assert_eq!(tree.predict_row(&[0.0]), 0.0);
        assert_eq!(tree.predict_row(&[0.49]), 0.0);
        assert_eq!(tree.predict_row(&[0.5]), 10.0);
        assert_eq!(tree.predict_row(&[1.3]), 10.0);
        match &tree.nodes[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            other => panic!("expected split at root, got {other:?}"),
        }
    }

    #[test]
    fn constant_labels_make_a_single_leaf() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![4.0; 3];
        let tree = RegressionTree::fit(&x, &y, &[0, 1, 2], &params(5), &mut rng_for(0, 1));
        assert_eq!(tree.nodes, vec![TreeNode::Leaf { value: 4.0 }]);
    }

    #[test]
    fn deep_tree_fits_training_data_exactly_with_distinct_features() {
        let mut rng = rng_for(3, 0);
        use rand::Rng as _;
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let idx: Vec<usize> = (0..64).collect();
        let tree = RegressionTree::fit(&x, &y, &idx, &params(10), &mut rng_for(0, 2));
        for i in 0..64 {
            assert!((tree.predict_row(&x[i]) - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_stay_within_label_range() {
        let mut rng = rng_for(4, 0);
        use rand::Rng as _;
        let x: Vec<Vec<f64>> = (0..128)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let y: Vec<f64> = (0..128).map(|_| rng.gen_range(2.0..7.0)).collect();
        let idx: Vec<usize> = (0..128).collect();
        let tree = RegressionTree::fit(&x, &y, &idx, &params(4), &mut rng_for(0, 3));
        for _ in 0..256 {
            let q = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let p = tree.predict_row(&q);
            assert!((2.0..=7.0).contains(&p));
        }
    }
}
