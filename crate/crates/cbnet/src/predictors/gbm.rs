//! Plain squared-error gradient boosting: stage zero is the label mean,
//! then each round fits a depth-limited tree to the residuals and adds it
//! scaled by the shrinkage. Training MSE is non-increasing by
//! construction.

use super::tree::{RegressionTree, TreeParams};
use crate::features::FeatureTable;
use crate::rng::rng_for;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("shrinkage {0} outside (0, 1]")]
    BadShrinkage(f64),
    #[error("need at least one boosting round")]
    NoRounds,
    #[error("training table has no labels")]
    NoLabels,
    #[error("training table is empty")]
    Empty,
    #[error("query width {query} does not match training width {train}")]
    WidthMismatch { query: usize, train: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmSpec {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GbmSpec {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            max_depth: 4,
            shrinkage: 0.1,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

impl GbmSpec {
    pub fn validate(&self) -> Result<(), GbmError> {
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(GbmError::BadShrinkage(self.shrinkage));
        }
        if self.n_rounds == 0 {
            return Err(GbmError::NoRounds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbmModel {
    pub spec: GbmSpec,
    pub input_width: usize,
    pub base: f64,
    pub trees: Vec<RegressionTree>,
}

pub fn gbm_fit(spec: &GbmSpec, table: &FeatureTable) -> Result<GbmModel, GbmError> {
    spec.validate()?;
    let y = table.labels.as_ref().ok_or(GbmError::NoLabels)?;
    if table.is_empty() {
        return Err(GbmError::Empty);
    }
    let n = table.len();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut preds = vec![base; n];
    let mut residuals = vec![0.0; n];
    let params = TreeParams {
        max_depth: spec.max_depth,
        min_samples_leaf: spec.min_samples_leaf,
        features_per_split: None,
    };
    let indices: Vec<usize> = (0..n).collect();
    let mut trees = Vec::with_capacity(spec.n_rounds);
    for round in 0..spec.n_rounds {
        for i in 0..n {
            residuals[i] = y[i] - preds[i];
        }
        let mut rng = rng_for(spec.seed, round as u64);
        let tree = RegressionTree::fit(&table.rows, &residuals, &indices, &params, &mut rng);
        for i in 0..n {
            preds[i] += spec.shrinkage * tree.predict_row(&table.rows[i]);
        }
        trees.push(tree);
    }
    Ok(GbmModel {
        spec: spec.clone(),
        input_width: table.width(),
        base,
        trees,
    })
}

pub fn gbm_predict(model: &GbmModel, rows: &[Vec<f64>]) -> Result<Vec<f64>, GbmError> {
    if let Some(r) = rows.first() {
        if r.len() != model.input_width {
            return Err(GbmError::WidthMismatch {
                query: r.len(),
                train: model.input_width,
            });
        }
    }
    Ok(rows
        .iter()
        .map(|row| {
            model.base
                + model.spec.shrinkage
                    * model.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
        })
        .collect())
}
