//! k-nearest-neighbor regression in standardized feature space, with
//! distance ties broken by training-row index.

use crate::features::{FeatureError, FeatureTable, Preprocessor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("k = {k} exceeds the {n} training rows")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("training table has no labels")]
    NoLabels,
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnnSpec {
    pub k: usize,
    pub seed: u64,
}

impl Default for KnnSpec {
    fn default() -> Self {
        Self { k: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub scaler: Preprocessor,
    pub train_rows: Vec<Vec<f64>>,
    pub train_labels: Vec<f64>,
}

pub fn knn_fit(spec: &KnnSpec, table: &FeatureTable) -> Result<KnnModel, KnnError> {
    if spec.k == 0 {
        return Err(KnnError::KZero);
    }
    let labels = table.labels.as_ref().ok_or(KnnError::NoLabels)?;
    if spec.k > table.len() {
        return Err(KnnError::KTooLarge {
            k: spec.k,
            n: table.len(),
        });
    }
    let mut scaler = Preprocessor::new(false);
    let standardized = scaler.fit_apply(table)?;
    Ok(KnnModel {
        k: spec.k,
        scaler,
        train_rows: standardized.rows,
        train_labels: labels.clone(),
    })
}

/// Mean label of the `k` nearest training rows under Euclidean distance in
/// the standardized space.
pub fn knn_predict(model: &KnnModel, queries: &FeatureTable) -> Result<Vec<f64>, KnnError> {
    if !model.scaler.is_fitted() {
        return Err(KnnError::Feature(FeatureError::Unfitted));
    }
    let standardized = model.scaler.apply(queries)?;
    let mut out = Vec::with_capacity(standardized.rows.len());
    for q in &standardized.rows {
        let mut dist: Vec<(f64, usize)> = model
            .train_rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mean = dist[..model.k]
            .iter()
            .map(|&(_, i)| model.train_labels[i])
            .sum::<f64>()
            / model.k as f64;
        out.push(mean);
    }
    Ok(out)
}
