//! Feature tables for the two prediction granularities.
//!
//! The STA table has one row per station: position, distance to its AP,
//! one-hot channel configuration, measured RSSI/SINR, and the AP-side
//! airtime and interference context. The BSS table aggregates member STAs
//! into means and population standard deviations, keeps the shared channel
//! one-hots, and appends the AP's full 8-channel airtime vector; its label
//! is the sum of the member labels.
//!
//! Splits are deterministic and (by default) at deployment granularity so
//! no deployment leaks across the train/validation boundary.

mod preprocess;

pub use preprocess::{fit_yeo_johnson_lambda, yeo_johnson, Preprocessor};

use crate::deployment::Deployment;
use crate::rng::rng_for;
use crate::sim::SimResult;
use crate::textio::{self, ParseError};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

pub const FEATURES_VERSION_LINE: &str = "# cbnet-features v1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("missing observable for node {0}")]
    MissingObservable(String),
    #[error("BSS {0} has no STA rows to aggregate")]
    EmptyBss(String),
    #[error("column `{0}` is constant; cannot fit")]
    ConstantColumn(String),
    #[error("preprocessor used before fitting")]
    Unfitted,
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Sta,
    Bss,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Sta => "sta",
            Granularity::Bss => "bss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sta" => Some(Granularity::Sta),
            "bss" => Some(Granularity::Bss),
            _ => None,
        }
    }
}

/// A named block of columns: a single numeric or a contiguous one-hot
/// group.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureBlock {
    Numeric { name: String },
    OneHot { name: String, size: usize },
}

impl FeatureBlock {
    pub fn name(&self) -> &str {
        match self {
            FeatureBlock::Numeric { name } | FeatureBlock::OneHot { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureBlock::Numeric { .. } => 1,
            FeatureBlock::OneHot { size, .. } => *size,
        }
    }
}

/// Ordered column layout of a table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub granularity: Granularity,
    pub blocks: Vec<FeatureBlock>,
}

impl FeatureSchema {
    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.width()).sum()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        for b in &self.blocks {
            match b {
                FeatureBlock::Numeric { name } => names.push(name.clone()),
                FeatureBlock::OneHot { name, size } => {
                    for k in 0..*size {
                        names.push(format!("{name}_{k}"));
                    }
                }
            }
        }
        names
    }

    /// Column range of the named block.
    pub fn block_span(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for b in &self.blocks {
            let w = b.width();
            if b.name() == name {
                return Some(offset..offset + w);
            }
            offset += w;
        }
        None
    }

    /// True for columns that belong to a one-hot group.
    pub fn one_hot_columns(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.width());
        for b in &self.blocks {
            let one_hot = matches!(b, FeatureBlock::OneHot { .. });
            for _ in 0..b.width() {
                out.push(one_hot);
            }
        }
        out
    }

    fn encode(&self) -> String {
        self.blocks
            .iter()
            .map(|b| match b {
                FeatureBlock::Numeric { name } => format!("{name}:num"),
                FeatureBlock::OneHot { name, size } => format!("{name}:onehot{size}"),
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    fn decode(granularity: Granularity, s: &str) -> Result<Self, FeatureError> {
        let mut blocks = Vec::new();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            let (name, kind) = part
                .split_once(':')
                .ok_or_else(|| FeatureError::Mismatch(format!("bad schema entry `{part}`")))?;
            if kind == "num" {
                blocks.push(FeatureBlock::Numeric { name: name.to_string() });
            } else if let Some(size) = kind.strip_prefix("onehot") {
                let size: usize = size
                    .parse()
                    .map_err(|_| FeatureError::Mismatch(format!("bad schema entry `{part}`")))?;
                blocks.push(FeatureBlock::OneHot { name: name.to_string(), size });
            } else {
                return Err(FeatureError::Mismatch(format!("bad schema entry `{part}`")));
            }
        }
        Ok(Self { granularity, blocks })
    }
}

/// Identity of one table row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowId {
    pub deployment: String,
    pub bss: String,
    pub node: String,
}

/// Row-per-entity numeric matrix with a declared schema; the contract
/// between feature extraction and the predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema: FeatureSchema,
    pub ids: Vec<RowId>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<f64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.schema.width()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let w = self.width();
        if self.ids.len() != self.rows.len() {
            return Err(FeatureError::Mismatch("ids/rows length mismatch".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.rows.len() {
                return Err(FeatureError::Mismatch("labels/rows length mismatch".into()));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::Mismatch("non-finite label".into()));
            }
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != w {
                return Err(FeatureError::Mismatch(format!(
                    "row {i} has {} values, schema width is {w}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::Mismatch(format!("non-finite value in row {i}")));
            }
        }
        Ok(())
    }

    /// Deployment ids in first-appearance order.
    pub fn deployment_ids(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for id in &self.ids {
            if seen.insert(id.deployment.clone()) {
                out.push(id.deployment.clone());
            }
        }
        out
    }

    fn take_rows(&self, keep: &[bool]) -> FeatureTable {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut labels = self.labels.as_ref().map(|_| Vec::new());
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            ids.push(self.ids[i].clone());
            rows.push(self.rows[i].clone());
            if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                out.push(src[i]);
            }
        }
        FeatureTable {
            schema: self.schema.clone(),
            ids,
            rows,
            labels,
        }
    }
}

fn sta_schema() -> FeatureSchema {
    FeatureSchema {
        granularity: Granularity::Sta,
        blocks: vec![
            FeatureBlock::Numeric { name: "x".into() },
            FeatureBlock::Numeric { name: "y".into() },
            FeatureBlock::Numeric { name: "dist_to_ap".into() },
            FeatureBlock::OneHot { name: "primary".into(), size: 8 },
            FeatureBlock::OneHot { name: "min_channel".into(), size: 8 },
            FeatureBlock::OneHot { name: "max_channel".into(), size: 8 },
            FeatureBlock::Numeric { name: "rssi_dbm".into() },
            FeatureBlock::Numeric { name: "sinr_db".into() },
            FeatureBlock::Numeric { name: "ap_mean_airtime".into() },
            FeatureBlock::Numeric { name: "ap_interference_dbm".into() },
        ],
    }
}

fn bss_schema(sta: &FeatureSchema) -> FeatureSchema {
    let mut blocks = Vec::new();
    for b in &sta.blocks {
        if let FeatureBlock::Numeric { name } = b {
            blocks.push(FeatureBlock::Numeric { name: format!("mean_{name}") });
            blocks.push(FeatureBlock::Numeric { name: format!("std_{name}") });
        }
    }
    for b in &sta.blocks {
        if let FeatureBlock::OneHot { name, size } = b {
            blocks.push(FeatureBlock::OneHot { name: name.clone(), size: *size });
        }
    }
    blocks.push(FeatureBlock::Numeric { name: "airtime_ch0".into() });
    for ch in 1..8 {
        blocks.push(FeatureBlock::Numeric { name: format!("airtime_ch{ch}") });
    }
    FeatureSchema {
        granularity: Granularity::Bss,
        blocks,
    }
}

fn one_hot(index: u8, size: usize) -> Vec<f64> {
    let mut v = vec![0.0; size];
    v[index as usize] = 1.0;
    v
}

/// One row per STA from a deployment and its simulation observables.
/// `label` throughput is attached from the result file.
pub fn extract_sta(d: &Deployment, r: &SimResult) -> Result<FeatureTable, FeatureError> {
    let schema = sta_schema();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for bss in &d.bsss {
        let ap_res = r
            .ap(&bss.ap.code)
            .ok_or_else(|| FeatureError::MissingObservable(bss.ap.code.clone()))?;
        let range = bss.ap.range;
        let range_width = range.width() as f64;
        let ap_mean_airtime: f64 = range
            .channels()
            .map(|c| ap_res.airtime[c.index() as usize])
            .sum::<f64>()
            / range_width;
        for sta in &bss.stas {
            let sta_res = r
                .sta(&sta.code)
                .ok_or_else(|| FeatureError::MissingObservable(sta.code.clone()))?;
            let mut row = Vec::with_capacity(schema.width());
            row.push(sta.position.x);
            row.push(sta.position.y);
            row.push(sta.position.distance_to(&bss.ap.position));
            row.extend(one_hot(sta.primary.index(), 8));
            row.extend(one_hot(range.min().index(), 8));
            row.extend(one_hot(range.max().index(), 8));
            row.push(sta_res.mean_rssi_dbm);
            row.push(sta_res.mean_sinr_db);
            row.push(ap_mean_airtime);
            row.push(ap_res.mean_interference_dbm);
            ids.push(RowId {
                deployment: d.scenario_id.clone(),
                bss: sta.bss_id.clone(),
                node: sta.code.clone(),
            });
            rows.push(row);
            labels.push(sta_res.throughput_mbps);
        }
    }
    let t = FeatureTable {
        schema,
        ids,
        rows,
        labels: Some(labels),
    };
    t.validate()?;
    Ok(t)
}

/// Per-AP airtime vectors keyed by `(deployment id, bss id)`; the part of
/// the BSS aggregate that individual STA rows do not carry.
pub type AirtimeMap = BTreeMap<(String, String), [f64; 8]>;

/// Collect the airtime map for [`aggregate_bss`] from simulation results.
pub fn airtime_map(results: &[SimResult]) -> AirtimeMap {
    let mut map = AirtimeMap::new();
    for r in results {
        for ap in &r.aps {
            map.insert((r.scenario_id.clone(), ap.bss_id.clone()), ap.airtime);
        }
    }
    map
}

/// Aggregate an STA table into one row per BSS: mean and population std of
/// every numeric feature, the shared channel one-hots, and the AP airtime
/// vector. The BSS label is the exact sum of member labels.
pub fn aggregate_bss(t: &FeatureTable, airtimes: &AirtimeMap) -> Result<FeatureTable, FeatureError> {
    if t.schema.granularity != Granularity::Sta {
        return Err(FeatureError::Mismatch(
            "aggregate_bss needs an STA-granularity table".into(),
        ));
    }
    let numeric_cols: Vec<usize> = t
        .schema
        .one_hot_columns()
        .iter()
        .enumerate()
        .filter(|&(_, &oh)| !oh)
        .map(|(i, _)| i)
        .collect();
    let onehot_cols: Vec<usize> = t
        .schema
        .one_hot_columns()
        .iter()
        .enumerate()
        .filter(|&(_, &oh)| oh)
        .map(|(i, _)| i)
        .collect();

    // Group rows by (deployment, bss) in first-appearance order.
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, id) in t.ids.iter().enumerate() {
        let key = (id.deployment.clone(), id.bss.clone());
        groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        groups
            .get_mut(&(id.deployment.clone(), id.bss.clone()))
            .unwrap()
            .push(i);
    }
    // A BSS present in the airtime map but absent from the table has zero
    // STAs; aggregation over nothing is an error, not a silent skip.
    for key in airtimes.keys() {
        if !groups.contains_key(key) {
            return Err(FeatureError::EmptyBss(format!("{}/{}", key.0, key.1)));
        }
    }

    let schema = bss_schema(&t.schema);
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = t.labels.as_ref().map(|_| Vec::new());
    for key in order {
        let members = &groups[&key];
        let airtime = airtimes.get(&key).ok_or_else(|| {
            FeatureError::MissingObservable(format!("airtime for {}/{}", key.0, key.1))
        })?;
        let n = members.len() as f64;
        let mut row = Vec::with_capacity(schema.width());
        for &c in &numeric_cols {
            let mean = members.iter().map(|&i| t.rows[i][c]).sum::<f64>() / n;
            let var = members
                .iter()
                .map(|&i| (t.rows[i][c] - mean).powi(2))
                .sum::<f64>()
                / n;
            row.push(mean);
            row.push(var.sqrt());
        }
        for &c in &onehot_cols {
            row.push(t.rows[members[0]][c]);
        }
        row.extend_from_slice(airtime);
        ids.push(RowId {
            deployment: key.0.clone(),
            bss: key.1.clone(),
            node: String::new(),
        });
        rows.push(row);
        if let (Some(out), Some(src)) = (labels.as_mut(), t.labels.as_ref()) {
            out.push(members.iter().map(|&i| src[i]).sum());
        }
    }
    let out = FeatureTable {
        schema,
        ids,
        rows,
        labels,
    };
    out.validate()?;
    Ok(out)
}

/// Pearson correlation matrix of the table's columns. Zero-variance
/// columns get 0 everywhere off the diagonal, with a warning.
pub fn correlation_matrix(t: &FeatureTable) -> Result<Vec<Vec<f64>>, FeatureError> {
    if t.len() < 2 {
        return Err(FeatureError::Mismatch(
            "correlation needs at least 2 rows".into(),
        ));
    }
    let w = t.width();
    let n = t.len() as f64;
    let means: Vec<f64> = (0..w)
        .map(|c| t.rows.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    let stds: Vec<f64> = (0..w)
        .map(|c| {
            (t.rows.iter().map(|r| (r[c] - means[c]).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let mut m = vec![vec![0.0; w]; w];
    let names = t.schema.column_names();
    for c in 0..w {
        m[c][c] = 1.0;
        if stds[c] == 0.0 {
            log::warn!("correlation: column `{}` has zero variance", names[c]);
        }
    }
    for a in 0..w {
        for b in (a + 1)..w {
            if stds[a] == 0.0 || stds[b] == 0.0 {
                continue;
            }
            let cov = t
                .rows
                .iter()
                .map(|r| (r[a] - means[a]) * (r[b] - means[b]))
                .sum::<f64>()
                / n;
            let r = cov / (stds[a] * stds[b]);
            m[a][b] = r;
            m[b][a] = r;
        }
    }
    Ok(m)
}

/// Per-column variance report: `(name, variance, below threshold)`.
/// Informational only; nothing is dropped automatically.
pub fn variance_report(t: &FeatureTable, threshold: f64) -> Vec<(String, f64, bool)> {
    let names = t.schema.column_names();
    let n = t.len().max(1) as f64;
    names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mean = t.rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = t.rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            (name.clone(), var, var < threshold)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitLevel {
    /// All rows of one deployment land on the same side (default).
    Deployment,
    /// Plain row-level split (replicates pooled-row protocols).
    Row,
}

/// Deterministic train/validation partition.
pub fn split(
    t: &FeatureTable,
    fraction: f64,
    seed: u64,
    level: SplitLevel,
) -> Result<(FeatureTable, FeatureTable), FeatureError> {
    if t.len() < 2 && fraction < 1.0 {
        return Err(FeatureError::Mismatch("need at least 2 rows to split".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(FeatureError::Mismatch(format!(
            "fraction {fraction} outside [0, 1]"
        )));
    }
    let mut rng = rng_for(seed, 0x5_917);
    let keep: Vec<bool> = match level {
        SplitLevel::Deployment => {
            let mut deps = t.deployment_ids();
            deps.shuffle(&mut rng);
            let n_train = (fraction * deps.len() as f64).round() as usize;
            let train: std::collections::BTreeSet<_> = deps.into_iter().take(n_train).collect();
            t.ids.iter().map(|id| train.contains(&id.deployment)).collect()
        }
        SplitLevel::Row => {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            let n_train = (fraction * t.len() as f64).round() as usize;
            let train: std::collections::BTreeSet<_> = idx.into_iter().take(n_train).collect();
            (0..t.len()).map(|i| train.contains(&i)).collect()
        }
    };
    let inverse: Vec<bool> = keep.iter().map(|k| !k).collect();
    Ok((t.take_rows(&keep), t.take_rows(&inverse)))
}

// ---------------------------------------------------------------------------
// Table CSV
// ---------------------------------------------------------------------------

pub fn to_csv_string(t: &FeatureTable) -> String {
    let mut out = String::new();
    out.push_str(FEATURES_VERSION_LINE);
    out.push('\n');
    out.push_str(&format!(
        "# granularity={} schema={}\n",
        t.schema.granularity.name(),
        t.schema.encode()
    ));
    out.push_str("deployment,bss_id,node_code,");
    out.push_str(&t.schema.column_names().join(","));
    out.push_str(",label\n");
    for (i, row) in t.rows.iter().enumerate() {
        let id = &t.ids[i];
        out.push_str(&format!("{},{},{},", id.deployment, id.bss, id.node));
        out.push_str(
            &row.iter()
                .map(|v| textio::fmt_exact(*v))
                .collect::<Vec<_>>()
                .join(","),
        );
        match &t.labels {
            Some(l) => out.push_str(&format!(",{}\n", textio::fmt_exact(l[i]))),
            None => out.push_str(",\n"),
        }
    }
    out
}

pub fn write_csv(t: &FeatureTable, path: &Path) -> Result<(), FeatureError> {
    textio::write_file(path, &to_csv_string(t))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<FeatureTable, FeatureError> {
    // The header depends on the schema, so parse the meta lines first and
    // reconstruct the expected header before delegating.
    let granularity_and_schema = {
        let text = std::fs::read_to_string(path).map_err(|source| ParseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut granularity = None;
        let mut schema = None;
        for line in text.lines().skip(1).take_while(|l| l.starts_with('#')) {
            for pair in line.trim_start_matches('#').split_whitespace() {
                if let Some((k, v)) = pair.split_once('=') {
                    match k {
                        "granularity" => granularity = Granularity::parse(v),
                        "schema" => schema = Some(v.to_string()),
                        _ => {}
                    }
                }
            }
        }
        let granularity = granularity.ok_or_else(|| {
            FeatureError::Mismatch(format!("{}: missing granularity metadata", path.display()))
        })?;
        let schema = schema.ok_or_else(|| {
            FeatureError::Mismatch(format!("{}: missing schema metadata", path.display()))
        })?;
        FeatureSchema::decode(granularity, &schema)?
    };
    let header = format!(
        "deployment,bss_id,node_code,{},label",
        granularity_and_schema.column_names().join(",")
    );
    let rows = textio::read_versioned(path, FEATURES_VERSION_LINE, &header)?;
    let w = granularity_and_schema.width();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut any_label = false;
    let names = granularity_and_schema.column_names();
    for row in &rows.rows {
        ids.push(RowId {
            deployment: row.1[0].clone(),
            bss: row.1[1].clone(),
            node: row.1[2].clone(),
        });
        let mut vals = Vec::with_capacity(w);
        for c in 0..w {
            vals.push(rows.parse::<f64>(row, 3 + c, &names[c])?);
        }
        data.push(vals);
        match rows.parse_opt::<f64>(row, 3 + w, "label")? {
            Some(v) => {
                any_label = true;
                labels.push(v);
            }
            None => labels.push(f64::NAN),
        }
    }
    if any_label && labels.iter().any(|v| v.is_nan()) {
        return Err(FeatureError::Mismatch(format!(
            "{}: labels present for some rows but not all",
            path.display()
        )));
    }
    let t = FeatureTable {
        schema: granularity_and_schema,
        ids,
        rows: data,
        labels: if any_label { Some(labels) } else { None },
    };
    t.validate()?;
    Ok(t)
}
