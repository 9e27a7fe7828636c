//! Column preprocessing: the Yeo-Johnson power transform and a standard
//! scaler, fit once on training data and serialized so train and predict
//! runs stay decoupled.

use super::{FeatureError, FeatureTable};
use crate::textio;
use std::path::Path;

pub const PREPROCESSOR_VERSION_LINE: &str = "# cbnet-preprocessor v1";

/// The Yeo-Johnson transform, total over all reals:
///
/// - x >= 0: `((x+1)^l - 1) / l`, or `ln(x+1)` at l = 0
/// - x <  0: `-((-x+1)^(2-l) - 1) / (2-l)`, or `-ln(-x+1)` at l = 2
pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    if x >= 0.0 {
        if lambda.abs() < 1e-12 {
            (x + 1.0).ln()
        } else {
            ((x + 1.0).powf(lambda) - 1.0) / lambda
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        -(-x + 1.0).ln()
    } else {
        -((-x + 1.0).powf(2.0 - lambda) - 1.0) / (2.0 - lambda)
    }
}

/// Gaussian log-likelihood of the transformed column, including the
/// transform's Jacobian.
fn log_likelihood(column: &[f64], lambda: f64) -> f64 {
    let n = column.len() as f64;
    let transformed: Vec<f64> = column.iter().map(|&x| yeo_johnson(x, lambda)).collect();
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let jacobian: f64 = column
        .iter()
        .map(|&x| {
            if x >= 0.0 {
                (lambda - 1.0) * (x + 1.0).ln()
            } else {
                (1.0 - lambda) * (-x + 1.0).ln()
            }
        })
        .sum();
    -n / 2.0 * var.ln() + jacobian
}

/// Maximum-likelihood lambda by golden-section search on `[-2, 2]` with
/// tolerance 1e-4.
pub fn fit_yeo_johnson_lambda(column: &[f64]) -> Result<f64, FeatureError> {
    if column.len() < 2 || !has_two_distinct(column) {
        return Err(FeatureError::ConstantColumn("<yeo-johnson input>".into()));
    }
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (-2.0f64, 2.0f64);
    while b - a > 1e-4 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if log_likelihood(column, c) >= log_likelihood(column, d) {
            b = d;
        } else {
            a = c;
        }
    }
    Ok((a + b) / 2.0)
}

fn has_two_distinct(column: &[f64]) -> bool {
    column.windows(2).any(|w| w[0] != w[1])
}

#[derive(Debug, Clone, PartialEq)]
struct ColumnParams {
    /// Yeo-Johnson lambda applied before scaling; `None` means identity.
    lambda: Option<f64>,
    mean: f64,
    std: f64,
}

/// Per-column Yeo-Johnson (optional) followed by standard scaling.
/// One-hot columns pass through untouched so group sums stay exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    use_yeo_johnson: bool,
    columns: Vec<ColumnParams>,
    one_hot: Vec<bool>,
    fitted: bool,
}

impl Preprocessor {
    pub fn new(use_yeo_johnson: bool) -> Self {
        Self {
            use_yeo_johnson,
            columns: Vec::new(),
            one_hot: Vec::new(),
            fitted: false,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn fit(&mut self, t: &FeatureTable) -> Result<(), FeatureError> {
        if t.is_empty() {
            return Err(FeatureError::Mismatch("cannot fit on an empty table".into()));
        }
        let w = t.width();
        self.one_hot = t.schema.one_hot_columns();
        self.columns.clear();
        let n = t.len() as f64;
        for c in 0..w {
            if self.one_hot[c] {
                self.columns.push(ColumnParams { lambda: None, mean: 0.0, std: 1.0 });
                continue;
            }
            let raw: Vec<f64> = t.rows.iter().map(|r| r[c]).collect();
            let lambda = if self.use_yeo_johnson && has_two_distinct(&raw) {
                Some(fit_yeo_johnson_lambda(&raw)?)
            } else {
                None
            };
            let vals: Vec<f64> = match lambda {
                Some(l) => raw.iter().map(|&x| yeo_johnson(x, l)).collect(),
                None => raw,
            };
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            self.columns.push(ColumnParams { lambda, mean, std });
        }
        self.fitted = true;
        Ok(())
    }

    pub fn apply(&self, t: &FeatureTable) -> Result<FeatureTable, FeatureError> {
        if !self.fitted {
            return Err(FeatureError::Unfitted);
        }
        if t.width() != self.columns.len() {
            return Err(FeatureError::Mismatch(format!(
                "table width {} does not match fitted width {}",
                t.width(),
                self.columns.len()
            )));
        }
        let mut out = t.clone();
        for row in &mut out.rows {
            for (c, p) in self.columns.iter().enumerate() {
                if self.one_hot[c] {
                    continue;
                }
                let mut v = row[c];
                if let Some(l) = p.lambda {
                    v = yeo_johnson(v, l);
                }
                row[c] = (v - p.mean) / p.std;
            }
        }
        Ok(out)
    }

    pub fn fit_apply(&mut self, t: &FeatureTable) -> Result<FeatureTable, FeatureError> {
        self.fit(t)?;
        self.apply(t)
    }

    // -- serialization ------------------------------------------------------

    pub fn to_string_repr(&self) -> String {
        let mut out = String::new();
        out.push_str(PREPROCESSOR_VERSION_LINE);
        out.push('\n');
        out.push_str(&format!(
            "# yeo_johnson={} fitted={}\n",
            self.use_yeo_johnson, self.fitted
        ));
        out.push_str("column,one_hot,lambda,mean,std\n");
        for (c, p) in self.columns.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c,
                if self.one_hot[c] { 1 } else { 0 },
                p.lambda.map(textio::fmt_exact).unwrap_or_default(),
                textio::fmt_exact(p.mean),
                textio::fmt_exact(p.std),
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        textio::write_file(path, &self.to_string_repr())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            FeatureError::Parse(crate::textio::ParseError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
        Self::from_string_repr(&text, &path.display().to_string())
    }

    pub fn from_string_repr(text: &str, origin: &str) -> Result<Self, FeatureError> {
        let rows = textio::read_versioned_str(
            text,
            origin,
            PREPROCESSOR_VERSION_LINE,
            "column,one_hot,lambda,mean,std",
        )?;
        let use_yeo_johnson = rows.meta_value("yeo_johnson")? == "true";
        let fitted = rows.meta_value("fitted")? == "true";
        let mut columns = Vec::new();
        let mut one_hot = Vec::new();
        for row in &rows.rows {
            let oh: u8 = rows.parse(row, 1, "one_hot")?;
            one_hot.push(oh == 1);
            let lambda: Option<f64> = rows.parse_opt(row, 2, "lambda")?;
            let mean: f64 = rows.parse(row, 3, "mean")?;
            let std: f64 = rows.parse(row, 4, "std")?;
            columns.push(ColumnParams { lambda, mean, std });
        }
        Ok(Self {
            use_yeo_johnson,
            columns,
            one_hot,
            fitted,
        })
    }
}
