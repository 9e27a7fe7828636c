//! Seeded random WLAN deployments and their CSV representation.
//!
//! A deployment is a set of BSSs (one AP plus its associated STAs) placed
//! on a rectangular map. APs sit on a jittered grid so enterprise-like
//! scenarios never degenerate into co-located cells; STAs are placed
//! uniformly in a disc around their AP, clipped to the map. Each BSS draws
//! one channel configuration (range plus primary) shared by all its nodes.
//!
//! Generation is a pure function of `(spec, deployment_index, seed)`; the
//! draw order of the generator is part of the format, so identical inputs
//! produce byte-identical CSV files.

use crate::channels::{ChannelId, ChannelRange, CHANNEL_COUNT};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::textio::{self, ParseError};
use rand::Rng as _;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const DEPLOYMENT_VERSION_LINE: &str = "# cbnet-deployment v1";
pub const DEPLOYMENT_HEADER: &str =
    "node_code,node_type,bss_id,x,y,z,primary_channel,min_channel,max_channel,tx_power_dbm,cca_dbm";

#[derive(Debug, Error)]
pub enum DeploymentError {
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid deployment: {0}")]
    Invariant(String),
    #[error("unknown scenario `{0}` (valid: {1})")]
    UnknownScenario(String, String),
}

/// AP or STA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Ap,
    Sta,
}

impl NodeKind {
    pub fn code(self) -> u8 {
        match self {
            NodeKind::Ap => 0,
            NodeKind::Sta => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn distance_to(&self, other: &Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// One device. All nodes of a BSS share the channel configuration,
/// transmit power, and sensitivity threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub code: String,
    pub kind: NodeKind,
    pub bss_id: String,
    pub position: Position,
    pub primary: ChannelId,
    pub range: ChannelRange,
    pub tx_power_dbm: f64,
    pub cca_dbm: f64,
}

/// One AP and its associated STAs.
#[derive(Debug, Clone, PartialEq)]
pub struct Bss {
    pub ap: Node,
    pub stas: Vec<Node>,
}

/// A complete scenario instance: the simulator's input and the dataset's
/// unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub scenario_id: String,
    pub map_width_m: f64,
    pub map_height_m: f64,
    pub bsss: Vec<Bss>,
}

impl Deployment {
    pub fn node_count(&self) -> usize {
        self.bsss.iter().map(|b| 1 + b.stas.len()).sum()
    }

    pub fn sta_count(&self) -> usize {
        self.bsss.iter().map(|b| b.stas.len()).sum()
    }

    /// Check the structural invariants: one AP per BSS, matching `bss_id`s,
    /// shared per-BSS configuration, positions inside the map rectangle.
    pub fn validate(&self) -> Result<(), DeploymentError> {
        let inv = |msg: String| Err(DeploymentError::Invariant(msg));
        if self.map_width_m <= 0.0 || self.map_height_m <= 0.0 {
            return inv(format!(
                "non-positive map size {}x{}",
                self.map_width_m, self.map_height_m
            ));
        }
        let mut seen_bss = std::collections::BTreeSet::new();
        for bss in &self.bsss {
            if bss.ap.kind != NodeKind::Ap {
                return inv(format!("BSS {} head node {} is not an AP", bss.ap.bss_id, bss.ap.code));
            }
            if !seen_bss.insert(bss.ap.bss_id.clone()) {
                return inv(format!("duplicate BSS id {}", bss.ap.bss_id));
            }
            for sta in &bss.stas {
                if sta.kind != NodeKind::Sta {
                    return inv(format!("node {} in BSS {} is not an STA", sta.code, bss.ap.bss_id));
                }
                if sta.bss_id != bss.ap.bss_id {
                    return inv(format!(
                        "STA {} carries bss_id {} but belongs to {}",
                        sta.code, sta.bss_id, bss.ap.bss_id
                    ));
                }
                if sta.primary != bss.ap.primary
                    || sta.range != bss.ap.range
                    || sta.tx_power_dbm != bss.ap.tx_power_dbm
                    || sta.cca_dbm != bss.ap.cca_dbm
                {
                    return inv(format!(
                        "STA {} does not share the channel/power configuration of its AP {}",
                        sta.code, bss.ap.code
                    ));
                }
            }
            for node in std::iter::once(&bss.ap).chain(&bss.stas) {
                let p = &node.position;
                if p.x < 0.0 || p.x > self.map_width_m || p.y < 0.0 || p.y > self.map_height_m {
                    return inv(format!(
                        "node {} at ({}, {}) outside map {}x{}",
                        node.code, p.x, p.y, self.map_width_m, self.map_height_m
                    ));
                }
                if !node.range.contains(node.primary) {
                    return inv(format!("node {} primary outside its channel range", node.code));
                }
            }
        }
        Ok(())
    }
}

/// One row of the scenario catalogue: a family of random deployments.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub map_width_m: f64,
    pub map_height_m: f64,
    pub ap_count: usize,
    /// Inclusive bounds on the per-AP STA count.
    pub stas_per_ap: (u32, u32),
    pub deployment_count: usize,
}

impl ScenarioSpec {
    pub fn new(
        name: impl Into<String>,
        map_width_m: f64,
        map_height_m: f64,
        ap_count: usize,
        stas_per_ap: (u32, u32),
        deployment_count: usize,
    ) -> Self {
        Self {
            name: name.into(),
            map_width_m,
            map_height_m,
            ap_count,
            stas_per_ap,
            deployment_count,
        }
    }

    /// Desk-scale variant: STA bounds halved (floor, at least 1).
    /// Keeps geometry and AP counts intact so density trends survive.
    pub fn desk_scale(&self) -> ScenarioSpec {
        let mut s = self.clone();
        s.stas_per_ap = ((s.stas_per_ap.0 / 2).max(1), (s.stas_per_ap.1 / 2).max(1));
        s
    }
}

/// The ten built-in scenario families: six training, four test.
pub fn builtin_specs() -> Vec<ScenarioSpec> {
    vec![
        ScenarioSpec::new("training1a", 80.0, 60.0, 12, (10, 20), 100),
        ScenarioSpec::new("training1b", 70.0, 50.0, 12, (10, 20), 100),
        ScenarioSpec::new("training1c", 60.0, 40.0, 12, (10, 20), 100),
        ScenarioSpec::new("training2a", 60.0, 40.0, 8, (5, 10), 100),
        ScenarioSpec::new("training2b", 50.0, 30.0, 8, (5, 10), 100),
        ScenarioSpec::new("training2c", 40.0, 20.0, 8, (5, 10), 100),
        ScenarioSpec::new("test1", 80.0, 60.0, 4, (2, 10), 50),
        ScenarioSpec::new("test2", 80.0, 60.0, 6, (2, 10), 50),
        ScenarioSpec::new("test3", 80.0, 60.0, 8, (2, 10), 50),
        ScenarioSpec::new("test4", 80.0, 60.0, 10, (2, 10), 50),
    ]
}

/// Look up a built-in spec by name.
pub fn spec_by_name(name: &str) -> Result<ScenarioSpec, DeploymentError> {
    builtin_specs()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let valid = builtin_specs()
                .iter()
                .map(|s| s.name.clone())
                .collect::<Vec<_>>()
                .join(", ");
            DeploymentError::UnknownScenario(name.to_string(), valid)
        })
}

/// Placement knobs with common 802.11 defaults. The catalogue gives map
/// sizes and counts only, so radii, powers, and thresholds live here and
/// can be overridden from the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// STA placement disc radius around the AP, meters.
    pub r_sta_m: f64,
    pub tx_power_dbm: f64,
    pub cca_dbm: f64,
    pub z_m: f64,
    /// AP jitter amplitude as a fraction of the grid cell size.
    pub jitter_frac: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            r_sta_m: 15.0,
            tx_power_dbm: 20.0,
            cca_dbm: -82.0,
            z_m: 0.0,
            jitter_frac: 0.25,
        }
    }
}

/// Equal-weight width classes for the per-BSS channel range draw: one
/// 160 MHz, two 80 MHz, four 40 MHz, eight 20 MHz options.
const RANGE_CLASSES: [u8; 4] = [8, 4, 2, 1];

/// Generate deployment `index` of `spec` under `seed` with default
/// placement parameters.
pub fn generate(
    spec: &ScenarioSpec,
    deployment_index: usize,
    seed: u64,
) -> Result<Deployment, DeploymentError> {
    generate_with(spec, deployment_index, seed, &GenParams::default())
}

/// Fully parameterized generation. Deterministic in every argument.
pub fn generate_with(
    spec: &ScenarioSpec,
    deployment_index: usize,
    seed: u64,
    params: &GenParams,
) -> Result<Deployment, DeploymentError> {
    if deployment_index >= spec.deployment_count {
        return Err(DeploymentError::Generation(format!(
            "deployment index {} out of range (spec {} has {})",
            deployment_index, spec.name, spec.deployment_count
        )));
    }
    if spec.ap_count == 0 || spec.stas_per_ap.0 == 0 || spec.stas_per_ap.0 > spec.stas_per_ap.1 {
        return Err(DeploymentError::Generation(format!(
            "spec {} has invalid counts",
            spec.name
        )));
    }
    let (cols, rows) = grid_dims(spec.ap_count, spec.map_width_m, spec.map_height_m);
    let cell_w = spec.map_width_m / cols as f64;
    let cell_h = spec.map_height_m / rows as f64;
    if cell_w < 1.0 || cell_h < 1.0 {
        return Err(DeploymentError::Generation(format!(
            "map {}x{} m too small to host {} AP grid cells",
            spec.map_width_m, spec.map_height_m, spec.ap_count
        )));
    }

    let mut rng = rng_for(mix_name(seed, &spec.name), deployment_index as u64);
    let mut bsss = Vec::with_capacity(spec.ap_count);
    for ap_idx in 0..spec.ap_count {
        let col = ap_idx % cols;
        let row = ap_idx / cols;
        let cx = (col as f64 + 0.5) * cell_w;
        let cy = (row as f64 + 0.5) * cell_h;
        let jx = rng.gen_range(-params.jitter_frac..=params.jitter_frac) * cell_w;
        let jy = rng.gen_range(-params.jitter_frac..=params.jitter_frac) * cell_h;
        let ap_pos = Position {
            x: textio::quantize4((cx + jx).clamp(0.0, spec.map_width_m)),
            y: textio::quantize4((cy + jy).clamp(0.0, spec.map_height_m)),
            z: textio::quantize4(params.z_m),
        };

        let width = RANGE_CLASSES[rng.gen_range(0..RANGE_CLASSES.len())];
        let block = rng.gen_range(0..(CHANNEL_COUNT / width));
        let min = block * width;
        let range = ChannelRange::from_indices(min, min + width - 1).expect("aligned block");
        let primary =
            ChannelId::new(rng.gen_range(min..min + width)).expect("primary within band");

        let bss_id = format!("BSS{ap_idx:02}");
        let ap = Node {
            code: format!("AP{ap_idx:02}"),
            kind: NodeKind::Ap,
            bss_id: bss_id.clone(),
            position: ap_pos,
            primary,
            range,
            tx_power_dbm: params.tx_power_dbm,
            cca_dbm: params.cca_dbm,
        };

        let sta_count = rng.gen_range(spec.stas_per_ap.0..=spec.stas_per_ap.1);
        let mut stas = Vec::with_capacity(sta_count as usize);
        for sta_idx in 0..sta_count {
            let pos = place_sta(&mut rng, &ap_pos, params, spec);
            stas.push(Node {
                code: format!("STA{ap_idx:02}_{sta_idx:02}"),
                kind: NodeKind::Sta,
                bss_id: bss_id.clone(),
                position: pos,
                primary,
                range,
                tx_power_dbm: params.tx_power_dbm,
                cca_dbm: params.cca_dbm,
            });
        }
        bsss.push(Bss { ap, stas });
    }

    let d = Deployment {
        scenario_id: format!("{}-{:03}", spec.name, deployment_index),
        map_width_m: spec.map_width_m,
        map_height_m: spec.map_height_m,
        bsss,
    };
    d.validate()?;
    Ok(d)
}

/// Uniform draw in a disc of radius `r_sta_m` around the AP, rejection
/// sampled against the map rectangle; after 16 misses the point is clamped
/// (the AP is inside the map, so misses are rare corner cases).
fn place_sta(rng: &mut Rng, ap: &Position, params: &GenParams, spec: &ScenarioSpec) -> Position {
    let mut last = (ap.x, ap.y);
    for _ in 0..16 {
        let r = params.r_sta_m * rng.gen_range(0.0f64..1.0).sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let x = ap.x + r * theta.cos();
        let y = ap.y + r * theta.sin();
        last = (x, y);
        if x >= 0.0 && x <= spec.map_width_m && y >= 0.0 && y <= spec.map_height_m {
            return Position {
                x: textio::quantize4(x),
                y: textio::quantize4(y),
                z: textio::quantize4(params.z_m),
            };
        }
    }
    Position {
        x: textio::quantize4(last.0.clamp(0.0, spec.map_width_m)),
        y: textio::quantize4(last.1.clamp(0.0, spec.map_height_m)),
        z: textio::quantize4(params.z_m),
    }
}

/// Grid close to the map's aspect ratio with cols*rows >= ap_count.
fn grid_dims(ap_count: usize, width: f64, height: f64) -> (usize, usize) {
    let aspect = width / height;
    let mut cols = ((ap_count as f64 * aspect).sqrt().round() as usize).max(1);
    let mut rows = ap_count.div_ceil(cols);
    while (cols - 1) * rows >= ap_count && cols > 1 {
        cols -= 1;
    }
    rows = ap_count.div_ceil(cols);
    (cols, rows)
}

fn mix_name(seed: u64, name: &str) -> u64 {
    // FNV-1a folded into the master seed; stable across builds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(seed, h)
}

/// Serialize to the versioned deployment CSV format.
pub fn to_csv_string(d: &Deployment) -> String {
    let mut out = String::new();
    out.push_str(DEPLOYMENT_VERSION_LINE);
    out.push('\n');
    out.push_str(&format!(
        "# scenario={} map_width_m={} map_height_m={}\n",
        d.scenario_id,
        textio::fmt_fixed4(d.map_width_m),
        textio::fmt_fixed4(d.map_height_m)
    ));
    out.push_str(DEPLOYMENT_HEADER);
    out.push('\n');
    for bss in &d.bsss {
        for node in std::iter::once(&bss.ap).chain(&bss.stas) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                node.code,
                node.kind.code(),
                node.bss_id,
                textio::fmt_fixed4(node.position.x),
                textio::fmt_fixed4(node.position.y),
                textio::fmt_fixed4(node.position.z),
                node.primary.index(),
                node.range.min().index(),
                node.range.max().index(),
                textio::fmt_fixed4(node.tx_power_dbm),
                textio::fmt_fixed4(node.cca_dbm),
            ));
        }
    }
    out
}

pub fn write_csv(d: &Deployment, path: &Path) -> Result<(), DeploymentError> {
    textio::write_file(path, &to_csv_string(d))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Deployment, DeploymentError> {
    let rows = textio::read_versioned(path, DEPLOYMENT_VERSION_LINE, DEPLOYMENT_HEADER)?;
    let scenario_id = rows.meta_value("scenario")?.to_string();
    let map_width_m: f64 = rows
        .meta_value("map_width_m")?
        .parse()
        .map_err(|e: std::num::ParseFloatError| rows.invalid(format!("map_width_m: {e}")))?;
    let map_height_m: f64 = rows
        .meta_value("map_height_m")?
        .parse()
        .map_err(|e: std::num::ParseFloatError| rows.invalid(format!("map_height_m: {e}")))?;

    // Preserve first-appearance order of BSS ids.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, (Option<Node>, Vec<Node>)> = BTreeMap::new();
    for row in &rows.rows {
        let code: String = rows.parse(row, 0, "node_code")?;
        let kind_code: u8 = rows.parse(row, 1, "node_type")?;
        let kind = match kind_code {
            0 => NodeKind::Ap,
            1 => NodeKind::Sta,
            _ => return Err(rows.field_error(row, 1, "node_type", "must be 0 (AP) or 1 (STA)").into()),
        };
        let bss_id: String = rows.parse(row, 2, "bss_id")?;
        let x: f64 = rows.parse(row, 3, "x")?;
        let y: f64 = rows.parse(row, 4, "y")?;
        let z: f64 = rows.parse(row, 5, "z")?;
        let primary_idx: u8 = rows.parse(row, 6, "primary_channel")?;
        let min_idx: u8 = rows.parse(row, 7, "min_channel")?;
        let max_idx: u8 = rows.parse(row, 8, "max_channel")?;
        let tx_power_dbm: f64 = rows.parse(row, 9, "tx_power_dbm")?;
        let cca_dbm: f64 = rows.parse(row, 10, "cca_dbm")?;

        let primary = ChannelId::new(primary_idx)
            .map_err(|e| rows.field_error(row, 6, "primary_channel", e.to_string()))?;
        let range = ChannelRange::from_indices(min_idx, max_idx)
            .map_err(|e| rows.field_error(row, 7, "min_channel", e.to_string()))?;
        if !range.contains(primary) {
            return Err(rows
                .field_error(row, 6, "primary_channel", "primary outside [min, max] range")
                .into());
        }

        let node = Node {
            code,
            kind,
            bss_id: bss_id.clone(),
            position: Position { x, y, z },
            primary,
            range,
            tx_power_dbm,
            cca_dbm,
        };
        let entry = groups.entry(bss_id.clone()).or_insert_with(|| {
            order.push(bss_id.clone());
            (None, Vec::new())
        });
        match kind {
            NodeKind::Ap => {
                if entry.0.is_some() {
                    return Err(rows
                        .field_error(row, 2, "bss_id", "second AP for this BSS")
                        .into());
                }
                entry.0 = Some(node);
            }
            NodeKind::Sta => entry.1.push(node),
        }
    }

    let mut bsss = Vec::with_capacity(order.len());
    for bss_id in order {
        let (ap, stas) = groups.remove(&bss_id).expect("grouped above");
        let ap = ap.ok_or_else(|| {
            rows.invalid(format!("BSS {bss_id} has STAs but no AP row"))
        })?;
        bsss.push(Bss { ap, stas });
    }

    let d = Deployment {
        scenario_id,
        map_width_m,
        map_height_m,
        bsss,
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_specs_match_the_catalogue() {
        let specs = builtin_specs();
        assert_eq!(specs.len(), 10);
        let t1a = spec_by_name("training1a").unwrap();
        assert_eq!(
            (t1a.map_width_m, t1a.map_height_m, t1a.ap_count, t1a.stas_per_ap, t1a.deployment_count),
            (80.0, 60.0, 12, (10, 20), 100)
        );
        let t2c = spec_by_name("training2c").unwrap();
        assert_eq!(
            (t2c.map_width_m, t2c.map_height_m, t2c.ap_count, t2c.stas_per_ap, t2c.deployment_count),
            (40.0, 20.0, 8, (5, 10), 100)
        );
        let t4 = spec_by_name("test4").unwrap();
        assert_eq!(
            (t4.map_width_m, t4.map_height_m, t4.ap_count, t4.stas_per_ap, t4.deployment_count),
            (80.0, 60.0, 10, (2, 10), 50)
        );
        assert!(spec_by_name("training9z").is_err());
    }

    #[test]
    fn generate_respects_counts_and_bounds() {
        let spec = spec_by_name("test1").unwrap();
        let d = generate(&spec, 0, 7).unwrap();
        assert_eq!(d.bsss.len(), 4);
        for bss in &d.bsss {
            let n = bss.stas.len() as u32;
            assert!((2..=10).contains(&n), "sta count {n}");
        }
        d.validate().unwrap();
    }

    #[test]
    fn degenerate_sta_range_is_exact() {
        let spec = ScenarioSpec::new("fixed", 50.0, 50.0, 3, (5, 5), 10);
        let d = generate(&spec, 2, 99).unwrap();
        for bss in &d.bsss {
            assert_eq!(bss.stas.len(), 5);
        }
    }

    #[test]
    fn generation_is_deterministic_to_the_byte() {
        let spec = spec_by_name("training2c").unwrap();
        let a = to_csv_string(&generate(&spec, 3, 42).unwrap());
        let b = to_csv_string(&generate(&spec, 3, 42).unwrap());
        assert_eq!(a, b);
        let c = to_csv_string(&generate(&spec, 3, 43).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn map_too_small_errors() {
        let spec = ScenarioSpec::new("tiny", 2.0, 2.0, 16, (1, 2), 1);
        assert!(matches!(
            generate(&spec, 0, 1),
            Err(DeploymentError::Generation(_))
        ));
    }

    #[test]
    fn csv_round_trip_identity() {
        let spec = spec_by_name("training1a").unwrap();
        let d = generate(&spec, 0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&d, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(d, back);
        // Table-1 shape: 12 AP rows plus 120..240 STA rows.
        assert_eq!(d.bsss.len(), 12);
        let stas = d.sta_count();
        assert!((120..=240).contains(&stas));
    }

    #[test]
    fn minimal_deployment_serializes_to_three_lines_plus_meta() {
        let spec = ScenarioSpec::new("mini", 30.0, 30.0, 1, (1, 1), 1);
        let d = generate(&spec, 0, 1).unwrap();
        let text = to_csv_string(&d);
        // version + meta + header + AP + single STA
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn orphan_sta_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let text = format!(
            "{DEPLOYMENT_VERSION_LINE}\n# scenario=x map_width_m=10 map_height_m=10\n{DEPLOYMENT_HEADER}\n\
             STA00_00,1,BSS77,1,1,0,0,0,7,20,-82\n"
        );
        std::fs::write(&path, text).unwrap();
        let err = read_csv(&path).unwrap_err();
        assert!(err.to_string().contains("no AP row"), "{err}");
    }

    #[test]
    fn bad_field_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.csv");
        let text = format!(
            "{DEPLOYMENT_VERSION_LINE}\n# scenario=x map_width_m=10 map_height_m=10\n{DEPLOYMENT_HEADER}\n\
             AP00,0,BSS00,1,oops,0,0,0,7,20,-82\n"
        );
        std::fs::write(&path, text).unwrap();
        let err = read_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 4") && err.contains("`y`"), "{err}");
    }

    #[test]
    fn sta_counts_and_coordinates_respect_spec_bounds() {
        // 1,000 deployments per catalogue spec, seeds rotated to cover the
        // index space evenly.
        for spec in builtin_specs() {
            let seeds = 1_000 / spec.deployment_count as u64;
            for seed in 0..seeds {
                for index in 0..spec.deployment_count {
                    let d = generate(&spec, index, seed).unwrap();
                    assert_eq!(d.bsss.len(), spec.ap_count);
                    for bss in &d.bsss {
                        let n = bss.stas.len() as u32;
                        assert!(n >= spec.stas_per_ap.0 && n <= spec.stas_per_ap.1);
                        for node in std::iter::once(&bss.ap).chain(&bss.stas) {
                            assert!(node.position.x >= 0.0 && node.position.x <= spec.map_width_m);
                            assert!(node.position.y >= 0.0 && node.position.y <= spec.map_height_m);
                        }
                    }
                }
            }
        }
    }
}
