//! Random forest regression: bootstrapped depth-limited trees with
//! sqrt(p) feature subsampling per split, averaged at predict time.

use super::tree::{RegressionTree, TreeParams};
use crate::features::FeatureTable;
use crate::rng::rng_for;
use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("forest needs at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("training table has no labels")]
    NoLabels,
    #[error("query width {query} does not match training width {train}")]
    WidthMismatch { query: usize, train: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestSpec {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Bootstrap resampling per tree; disable to fit every tree on the
    /// full sample (useful for deterministic single-tree checks).
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 10,
            min_samples_leaf: 1,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub spec: ForestSpec,
    pub input_width: usize,
    pub trees: Vec<RegressionTree>,
}

pub fn forest_fit(spec: &ForestSpec, table: &FeatureTable) -> Result<ForestModel, ForestError> {
    let y = table.labels.as_ref().ok_or(ForestError::NoLabels)?;
    let n = table.len();
    if n < 2 {
        return Err(ForestError::TooFewRows(n));
    }
    let p = table.width();
    let features_per_split = Some(((p as f64).sqrt().floor() as usize).max(1));
    let params = TreeParams {
        max_depth: spec.max_depth,
        min_samples_leaf: spec.min_samples_leaf,
        features_per_split,
    };
    // One derived seed per tree keeps results independent of scheduling.
    let trees: Vec<RegressionTree> = (0..spec.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(spec.seed, t as u64);
            let indices: Vec<usize> = if spec.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            RegressionTree::fit(&table.rows, y, &indices, &params, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        spec: spec.clone(),
        input_width: p,
        trees,
    })
}

pub fn forest_predict(model: &ForestModel, rows: &[Vec<f64>]) -> Result<Vec<f64>, ForestError> {
    if let Some(r) = rows.first() {
        if r.len() != model.input_width {
            return Err(ForestError::WidthMismatch {
                query: r.len(),
                train: model.input_width,
            });
        }
    }
    Ok(rows
        .iter()
        .map(|row| {
            model.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
                / model.trees.len() as f64
        })
        .collect())
}
