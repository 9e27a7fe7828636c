//! Graph network over deployment graphs.
//!
//! A deployment becomes a directed graph: APs and STAs are nodes, AP-AP
//! pairs carry interference-map edges, and AP-STA associations carry RSSI
//! edges (both directions in both cases). Each block runs three steps:
//!
//! 1. edge update: `e' = MLP_e(e (+) src (+) dst)`
//! 2. aggregation: per node, the mean of incoming updated edges (zero
//!    vector for nodes with no incoming edges)
//! 3. node update: `v' = MLP_v(v (+) agg)`
//!
//! The final block leaves STA nodes with a scalar throughput prediction;
//! AP predictions are always the sum over their STAs, matching the masked
//! loss convention. No global-state update is used.

use super::nn::{LayerCache, LayerSpec, Mat, NnError, Optimizer, OptimizerKind, Stack};
use crate::deployment::Deployment;
use crate::rf::{interference_map, RfConfig};
use crate::rng::rng_for;
use crate::sim::{SimResult, INTERFERENCE_FLOOR_DBM};
use rand::seq::SliceRandom;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("graph construction: {0}")]
    Build(String),
    #[error("{0}")]
    Mismatch(String),
}

/// Width of the per-node feature vector built by [`GraphSample::build`].
pub const NODE_FEATURE_WIDTH: usize = 29;
/// Width of the per-edge feature vector: type, distance, rssi, interference.
pub const EDGE_FEATURE_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub features: Vec<f64>,
}

/// One deployment as a graph, with optional throughput labels per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub deployment: String,
    pub node_features: Vec<Vec<f64>>,
    pub node_is_sta: Vec<bool>,
    pub node_codes: Vec<String>,
    pub node_bss: Vec<String>,
    /// For STA nodes, the node index of their AP.
    pub ap_of: Vec<Option<usize>>,
    pub edges: Vec<GraphEdge>,
    pub labels: Option<Vec<f64>>,
}

impl GraphSample {
    pub fn node_count(&self) -> usize {
        self.node_features.len()
    }

    /// Build from a deployment and its simulation observables.
    pub fn build(d: &Deployment, r: &SimResult, rf: &RfConfig) -> Result<Self, GraphError> {
        let imap = interference_map(d, rf);
        let mut node_features = Vec::new();
        let mut node_is_sta = Vec::new();
        let mut node_codes = Vec::new();
        let mut node_bss = Vec::new();
        let mut ap_of = Vec::new();
        let mut labels = Vec::new();
        let mut edges = Vec::new();
        let mut ap_nodes = Vec::with_capacity(d.bsss.len());

        let one_hot = |idx: u8| {
            let mut v = vec![0.0; 8];
            v[idx as usize] = 1.0;
            v
        };

        for bss in &d.bsss {
            let ap_res = r
                .ap(&bss.ap.code)
                .ok_or_else(|| GraphError::Build(format!("no result row for {}", bss.ap.code)))?;
            let range = bss.ap.range;
            let mean_airtime: f64 = range
                .channels()
                .map(|c| ap_res.airtime[c.index() as usize])
                .sum::<f64>()
                / range.width() as f64;
            let ap_node = node_features.len();
            ap_nodes.push(ap_node);
            let mut feat = vec![0.0, bss.ap.position.x, bss.ap.position.y];
            feat.extend(one_hot(bss.ap.primary.index()));
            feat.extend(one_hot(range.min().index()));
            feat.extend(one_hot(range.max().index()));
            feat.push(0.0); // SINR is an STA-side feature
            feat.push(mean_airtime);
            debug_assert_eq!(feat.len(), NODE_FEATURE_WIDTH);
            node_features.push(feat);
            node_is_sta.push(false);
            node_codes.push(bss.ap.code.clone());
            node_bss.push(bss.ap.bss_id.clone());
            ap_of.push(None);
            labels.push(ap_res.throughput_mbps);

            for sta in &bss.stas {
                let sta_res = r.sta(&sta.code).ok_or_else(|| {
                    GraphError::Build(format!("no result row for {}", sta.code))
                })?;
                let sta_node = node_features.len();
                let mut feat = vec![1.0, sta.position.x, sta.position.y];
                feat.extend(one_hot(sta.primary.index()));
                feat.extend(one_hot(range.min().index()));
                feat.extend(one_hot(range.max().index()));
                feat.push(sta_res.mean_sinr_db);
                feat.push(0.0); // airtime is an AP-side feature
                node_features.push(feat);
                node_is_sta.push(true);
                node_codes.push(sta.code.clone());
                node_bss.push(sta.bss_id.clone());
                ap_of.push(Some(ap_node));
                labels.push(sta_res.throughput_mbps);

                let dist = sta.position.distance_to(&bss.ap.position);
                for (s, t) in [(ap_node, sta_node), (sta_node, ap_node)] {
                    edges.push(GraphEdge {
                        src: s,
                        dst: t,
                        features: vec![1.0, dist, sta_res.mean_rssi_dbm, 0.0],
                    });
                }
            }
        }
        for (i, bi) in d.bsss.iter().enumerate() {
            for (j, bj) in d.bsss.iter().enumerate() {
                if i == j {
                    continue;
                }
                let dist = bi.ap.position.distance_to(&bj.ap.position);
                edges.push(GraphEdge {
                    src: ap_nodes[j],
                    dst: ap_nodes[i],
                    features: vec![
                        0.0,
                        dist,
                        0.0,
                        imap[i][j].max(INTERFERENCE_FLOOR_DBM),
                    ],
                });
            }
        }
        Ok(Self {
            deployment: d.scenario_id.clone(),
            node_features,
            node_is_sta,
            node_codes,
            node_bss,
            ap_of,
            edges,
            labels: Some(labels),
        })
    }
}

/// One message-passing block.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNetBlock {
    pub edge_mlp: Stack,
    pub node_mlp: Stack,
    pub edge_out: usize,
    pub node_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNetSpec {
    /// Per block: (edge MLP layers, node MLP layers).
    pub blocks: Vec<(Vec<LayerSpec>, Vec<LayerSpec>)>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Graphs per optimization step.
    pub batch_graphs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNetModel {
    pub blocks: Vec<GraphNetBlock>,
    pub node_width: usize,
    pub edge_width: usize,
}

struct BlockCache {
    edge_caches: Vec<LayerCache>,
    node_caches: Vec<LayerCache>,
    /// Widths of (edge, node) features entering the block.
    in_widths: (usize, usize),
    edge_out: usize,
    indeg: Vec<usize>,
    had_edges: bool,
}

impl GraphNetModel {
    pub fn build(spec: &GraphNetSpec, node_width: usize, edge_width: usize) -> Result<Self, GraphError> {
        Self::build_blocks(&spec.blocks, node_width, edge_width, spec.seed)
    }

    pub fn build_blocks(
        block_specs: &[(Vec<LayerSpec>, Vec<LayerSpec>)],
        node_width: usize,
        edge_width: usize,
        seed: u64,
    ) -> Result<Self, GraphError> {
        if block_specs.is_empty() {
            return Err(GraphError::Mismatch("need at least one block".into()));
        }
        let mut rng = rng_for(seed, 0xB10C);
        let mut blocks = Vec::with_capacity(block_specs.len());
        let (mut dv, mut de) = (node_width, edge_width);
        for (edge_spec, node_spec) in block_specs {
            let (edge_mlp, de_out) = Stack::build(edge_spec, de + 2 * dv, &mut rng)?;
            let (node_mlp, dv_out) = Stack::build(node_spec, dv + de_out, &mut rng)?;
            blocks.push(GraphNetBlock {
                edge_mlp,
                node_mlp,
                edge_out: de_out,
                node_out: dv_out,
            });
            de = de_out;
            dv = dv_out;
        }
        if dv != 1 {
            return Err(GraphError::Mismatch(format!(
                "final node width must be 1, got {dv}"
            )));
        }
        Ok(Self {
            blocks,
            node_width,
            edge_width,
        })
    }

    fn check_graph(&self, g: &GraphSample) -> Result<(), GraphError> {
        if g.node_features.iter().any(|f| f.len() != self.node_width) {
            return Err(GraphError::Mismatch(format!(
                "node feature width does not match model width {}",
                self.node_width
            )));
        }
        for e in &g.edges {
            if e.features.len() != self.edge_width {
                return Err(GraphError::Mismatch(format!(
                    "edge feature width does not match model width {}",
                    self.edge_width
                )));
            }
            if e.src >= g.node_count() || e.dst >= g.node_count() {
                return Err(GraphError::Mismatch("edge endpoint out of range".into()));
            }
        }
        Ok(())
    }

    /// Training-mode forward; caches everything needed for backward.
    fn forward_train(&mut self, g: &GraphSample) -> Result<(Mat, Vec<BlockCache>), GraphError> {
        self.check_graph(g)?;
        let n = g.node_count();
        let mut v = Mat::from_rows(&g.node_features);
        let mut e = if g.edges.is_empty() {
            Mat::zeros(0, self.edge_width)
        } else {
            Mat::from_rows(&g.edges.iter().map(|x| x.features.clone()).collect::<Vec<_>>())
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let in_widths = (e.cols, v.cols);
            let had_edges = e.rows > 0;
            let mut indeg = vec![0usize; n];
            for edge in &g.edges {
                indeg[edge.dst] += 1;
            }
            let (e_new, edge_caches) = if had_edges {
                let mut e_in = Mat::zeros(e.rows, e.cols + 2 * v.cols);
                for (r, edge) in g.edges.iter().enumerate() {
                    let mut col = 0;
                    for &val in e.row(r) {
                        *e_in.at_mut(r, col) = val;
                        col += 1;
                    }
                    for &val in v.row(edge.src) {
                        *e_in.at_mut(r, col) = val;
                        col += 1;
                    }
                    for &val in v.row(edge.dst) {
                        *e_in.at_mut(r, col) = val;
                        col += 1;
                    }
                }
                let (e_new, c) = block.edge_mlp.forward(&e_in, true);
                (e_new, c)
            } else {
                (Mat::zeros(0, block.edge_out), Vec::new())
            };

            let mut agg = Mat::zeros(n, block.edge_out);
            for (r, edge) in g.edges.iter().enumerate() {
                for c in 0..block.edge_out {
                    *agg.at_mut(edge.dst, c) += e_new.at(r, c) / indeg[edge.dst] as f64;
                }
            }
            let v_in = v.hcat(&agg);
            let (v_new, node_caches) = block.node_mlp.forward(&v_in, true);
            caches.push(BlockCache {
                edge_caches,
                node_caches,
                in_widths,
                edge_out: block.edge_out,
                indeg,
                had_edges,
            });
            v = v_new;
            e = e_new;
        }
        Ok((v, caches))
    }

    /// Inference forward: final node column per node.
    pub fn forward_eval(&self, g: &GraphSample) -> Result<Vec<f64>, GraphError> {
        self.check_graph(g)?;
        let n = g.node_count();
        let mut v = Mat::from_rows(&g.node_features);
        let mut e = if g.edges.is_empty() {
            Mat::zeros(0, self.edge_width)
        } else {
            Mat::from_rows(&g.edges.iter().map(|x| x.features.clone()).collect::<Vec<_>>())
        };
        for block in &self.blocks {
            let mut indeg = vec![0usize; n];
            for edge in &g.edges {
                indeg[edge.dst] += 1;
            }
            let e_new = if e.rows > 0 {
                let mut e_in = Mat::zeros(e.rows, e.cols + 2 * v.cols);
                for (r, edge) in g.edges.iter().enumerate() {
                    let mut col = 0;
                    for &val in e.row(r) {
                        *e_in.at_mut(r, col) = val;
                        col += 1;
                    }
                    for &val in v.row(edge.src) {
                        *e_in.at_mut(r, col) = val;
                        col += 1;
                    }
                    for &val in v.row(edge.dst) {
                        *e_in.at_mut(r, col) = val;
                        col += 1;
                    }
                }
                block.edge_mlp.forward_eval(&e_in)
            } else {
                Mat::zeros(0, block.edge_out)
            };
            let mut agg = Mat::zeros(n, block.edge_out);
            for (r, edge) in g.edges.iter().enumerate() {
                for c in 0..block.edge_out {
                    *agg.at_mut(edge.dst, c) += e_new.at(r, c) / indeg[edge.dst] as f64;
                }
            }
            let v_in = v.hcat(&agg);
            v = block.node_mlp.forward_eval(&v_in);
            e = e_new;
        }
        Ok((0..n).map(|r| v.at(r, 0)).collect())
    }

    /// Per-node predictions: STA nodes get the network output, AP nodes the
    /// sum of their member STAs.
    pub fn predict_nodes(&self, g: &GraphSample) -> Result<Vec<f64>, GraphError> {
        let raw = self.forward_eval(g)?;
        Ok(assemble_node_predictions(g, &raw))
    }

    fn backward(
        &self,
        g: &GraphSample,
        caches: &[BlockCache],
        grad_v_final: Mat,
    ) -> Vec<f64> {
        let n = g.node_count();
        let mut grad_v = grad_v_final;
        let mut grad_e: Option<Mat> = None; // starts as zeros for the last block
        let mut per_block: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(caches).rev() {
            let (de_in_w, dv_in_w) = cache.in_widths;
            let (dv_node_in, node_grads) = block.node_mlp.backward(&cache.node_caches, &grad_v);
            // Split node-MLP input gradient into the direct node part and
            // the aggregated-edges part.
            let mut dv_prev = Mat::zeros(n, dv_in_w);
            let mut dagg = Mat::zeros(n, cache.edge_out);
            for r in 0..n {
                for c in 0..dv_in_w {
                    *dv_prev.at_mut(r, c) = dv_node_in.at(r, c);
                }
                for c in 0..cache.edge_out {
                    *dagg.at_mut(r, c) = dv_node_in.at(r, dv_in_w + c);
                }
            }
            let edge_grads = if cache.had_edges {
                let mut de_out = Mat::zeros(g.edges.len(), cache.edge_out);
                for (r, edge) in g.edges.iter().enumerate() {
                    for c in 0..cache.edge_out {
                        *de_out.at_mut(r, c) = dagg.at(edge.dst, c) / cache.indeg[edge.dst] as f64;
                    }
                }
                if let Some(ge) = &grad_e {
                    for i in 0..de_out.data.len() {
                        de_out.data[i] += ge.data[i];
                    }
                }
                let (de_in, edge_grads) = block.edge_mlp.backward(&cache.edge_caches, &de_out);
                // de_in columns: [edge features | src node | dst node]
                let mut de_prev = Mat::zeros(g.edges.len(), de_in_w);
                for (r, edge) in g.edges.iter().enumerate() {
                    for c in 0..de_in_w {
                        *de_prev.at_mut(r, c) = de_in.at(r, c);
                    }
                    for c in 0..dv_in_w {
                        *dv_prev.at_mut(edge.src, c) += de_in.at(r, de_in_w + c);
                        *dv_prev.at_mut(edge.dst, c) += de_in.at(r, de_in_w + dv_in_w + c);
                    }
                }
                grad_e = Some(de_prev);
                edge_grads
            } else {
                grad_e = None;
                vec![Vec::new(); block.edge_mlp.layers.len()]
            };
            per_block.push((edge_grads.concat(), node_grads.concat()));
            grad_v = dv_prev;
        }
        per_block.reverse();
        let mut flat = Vec::new();
        for (mut e, mut v) in per_block {
            // Edge MLPs with no edges this graph produced no gradients;
            // emit zeros to keep the flat layout aligned.
            if e.is_empty() {
                e = vec![0.0; 0];
            }
            flat.append(&mut e);
            flat.append(&mut v);
        }
        flat
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.edge_mlp.push_params(&mut out);
            b.node_mlp.push_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for b in &mut self.blocks {
            b.edge_mlp.load_params(params, &mut offset);
            b.node_mlp.load_params(params, &mut offset);
        }
        debug_assert_eq!(offset, params.len());
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.edge_mlp.param_count() + b.node_mlp.param_count())
            .sum()
    }
}

/// STA nodes keep the raw network output; AP nodes get the sum of their
/// members' outputs (the masked-loss convention).
pub fn assemble_node_predictions(g: &GraphSample, raw: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    for (i, &is_sta) in g.node_is_sta.iter().enumerate() {
        if is_sta {
            out[i] = raw[i];
        }
    }
    for (i, ap) in g.ap_of.iter().enumerate() {
        if let Some(a) = ap {
            out[*a] += out[i];
        }
    }
    out
}

/// Forward pass through pre-built blocks; the operation named by the
/// contract. Returns per-node predictions.
pub fn graphnet_forward(model: &GraphNetModel, g: &GraphSample) -> Result<Vec<f64>, GraphError> {
    model.predict_nodes(g)
}

/// Masked-RMSE errors of one graph: per-STA plus per-AP (summed STAs).
fn graph_errors(g: &GraphSample, raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>), GraphError> {
    let labels = g
        .labels
        .as_ref()
        .ok_or_else(|| GraphError::Mismatch("graph has no labels".into()))?;
    let preds = assemble_node_predictions(g, raw);
    let mut sta_err = Vec::new();
    let mut ap_err = Vec::new();
    for i in 0..g.node_count() {
        if g.node_is_sta[i] {
            sta_err.push(preds[i] - labels[i]);
        } else {
            ap_err.push(preds[i] - labels[i]);
        }
    }
    Ok((sta_err, ap_err))
}

pub fn graphnet_fit(spec: &GraphNetSpec, graphs: &[GraphSample]) -> Result<GraphNetModel, GraphError> {
    if graphs.is_empty() {
        return Err(GraphError::Mismatch("no training graphs".into()));
    }
    if spec.learning_rate <= 0.0 || spec.epochs == 0 || spec.batch_graphs == 0 {
        return Err(GraphError::Mismatch(
            "learning rate, epochs, and batch size must be positive".into(),
        ));
    }
    let node_w = graphs[0].node_features[0].len();
    let edge_w = graphs[0]
        .edges
        .first()
        .map(|e| e.features.len())
        .unwrap_or(EDGE_FEATURE_WIDTH);
    let mut model = GraphNetModel::build(spec, node_w, edge_w)?;
    let mut params = model.params();
    let mut opt = Optimizer::new(spec.optimizer, spec.learning_rate, params.len());

    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut rng_for(spec.seed, 1 + epoch as u64));
        for batch in order.chunks(spec.batch_graphs) {
            // Forward everything first: the batch loss normalizes by the
            // total error count across graphs.
            let mut passes = Vec::new();
            let mut total_sq = 0.0;
            let mut total_n = 0usize;
            for &gi in batch {
                let g = &graphs[gi];
                let (v_out, caches) = model.forward_train(g)?;
                let raw: Vec<f64> = (0..g.node_count()).map(|r| v_out.at(r, 0)).collect();
                let (sta_err, ap_err) = graph_errors(g, &raw)?;
                total_sq += sta_err.iter().chain(&ap_err).map(|e| e * e).sum::<f64>();
                total_n += sta_err.len() + ap_err.len();
                passes.push((gi, caches, raw));
            }
            let loss = (total_sq / total_n as f64).sqrt();
            if !loss.is_finite() {
                return Err(GraphError::Nn(NnError::Diverged { epoch, loss }));
            }
            if loss <= 1e-12 {
                continue;
            }
            let mut grads = vec![0.0; params.len()];
            for (gi, caches, raw) in passes {
                let g = &graphs[gi];
                let labels = g.labels.as_ref().unwrap();
                let preds = assemble_node_predictions(g, &raw);
                let mut grad_v = Mat::zeros(g.node_count(), 1);
                for i in 0..g.node_count() {
                    if !g.node_is_sta[i] {
                        continue;
                    }
                    let e_sta = preds[i] - labels[i];
                    let ap = g.ap_of[i].expect("STA has an AP");
                    let e_ap = preds[ap] - labels[ap];
                    *grad_v.at_mut(i, 0) = (e_sta + e_ap) / (total_n as f64 * loss);
                }
                let g_grads = model.backward(g, &caches, grad_v);
                for (acc, val) in grads.iter_mut().zip(&g_grads) {
                    *acc += val;
                }
            }
            opt.step(&mut params, &grads);
            model.set_params(&params);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deployment::{generate, spec_by_name};
    use crate::sim::{simulate, SimConfig};

    fn sample_graph() -> GraphSample {
        let spec = spec_by_name("test1").unwrap();
        let d = generate(&spec, 0, 3).unwrap();
        let cfg = SimConfig {
            duration_s: 0.05,
            ..SimConfig::default()
        };
        let r = simulate(&d, &cfg).unwrap();
        GraphSample::build(&d, &r, &cfg.rf).unwrap()
    }

    fn toy_spec(seed: u64) -> GraphNetSpec {
        GraphNetSpec {
            blocks: vec![
                (
                    vec![LayerSpec::Linear(8), LayerSpec::ReLU],
                    vec![LayerSpec::Linear(8), LayerSpec::ReLU],
                ),
                (
                    vec![LayerSpec::Linear(8), LayerSpec::ReLU],
                    vec![LayerSpec::Linear(1)],
                ),
            ],
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 2,
            batch_graphs: 2,
            seed,
        }
    }

    #[test]
    fn graph_build_shapes_and_labels() {
        let g = sample_graph();
        assert!(g.node_features.iter().all(|f| f.len() == NODE_FEATURE_WIDTH));
        assert!(g.edges.iter().all(|e| e.features.len() == EDGE_FEATURE_WIDTH));
        let n_ap = g.node_is_sta.iter().filter(|s| !**s).count();
        let n_sta = g.node_count() - n_ap;
        // both directions: AP-STA twice per STA, AP-AP for every ordered pair
        assert_eq!(g.edges.len(), 2 * n_sta + n_ap * (n_ap - 1));
        // AP labels equal the sum of their STAs' labels
        let labels = g.labels.as_ref().unwrap();
        for (i, is_sta) in g.node_is_sta.iter().enumerate() {
            if !is_sta {
                let sum: f64 = g
                    .ap_of
                    .iter()
                    .enumerate()
                    .filter(|(_, ap)| **ap == Some(i))
                    .map(|(s, _)| labels[s])
                    .sum();
                assert!((labels[i] - sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_network_with_no_edges_returns_the_input() {
        // One node, no edges: with the node MLP hand-set to the identity on
        // the node part (aggregation contributes zeros), the block output
        // equals the node input.
        let g = GraphSample {
            deployment: "unit".into(),
            node_features: vec![vec![0.75]],
            node_is_sta: vec![true],
            node_codes: vec!["STA".into()],
            node_bss: vec!["B".into()],
            ap_of: vec![None],
            edges: Vec::new(),
            labels: None,
        };
        let spec = GraphNetSpec {
            blocks: vec![(vec![LayerSpec::Linear(1)], vec![LayerSpec::Linear(1)])],
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 1,
            batch_graphs: 1,
            seed: 0,
        };
        let mut model = GraphNetModel::build(&spec, 1, 1).unwrap();
        // edge MLP params (unused here): w (1x3), b (1). node MLP: w (1x2), b (1)
        model.set_params(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let out = model.forward_eval(&g).unwrap();
        assert_eq!(out, vec![0.75]);
    }

    #[test]
    fn two_node_hand_computed_forward_pass() {
        // Nodes: AP (feat 2), STA (feat 3); one edge AP->STA with feature 5.
        // Edge MLP: e' = 0.5*e + 1.0*src - 0.25*dst + 0.125
        // Node MLP: v' = 2*v - 3*agg + 0.5
        let g = GraphSample {
            deployment: "hand".into(),
            node_features: vec![vec![2.0], vec![3.0]],
            node_is_sta: vec![false, true],
            node_codes: vec!["AP".into(), "STA".into()],
            node_bss: vec!["B".into(), "B".into()],
            ap_of: vec![None, Some(0)],
            edges: vec![GraphEdge {
                src: 0,
                dst: 1,
                features: vec![5.0],
            }],
            labels: None,
        };
        let spec = GraphNetSpec {
            blocks: vec![(vec![LayerSpec::Linear(1)], vec![LayerSpec::Linear(1)])],
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 1,
            batch_graphs: 1,
            seed: 0,
        };
        let mut model = GraphNetModel::build(&spec, 1, 1).unwrap();
        model.set_params(&[0.5, 1.0, -0.25, 0.125, 2.0, -3.0, 0.5]);
        let out = model.forward_eval(&g).unwrap();
        // e' = 0.5*5 + 1*2 - 0.25*3 + 0.125 = 3.875
        // AP: v' = 2*2 - 3*0 + 0.5 = 4.5 ; STA: v' = 2*3 - 3*3.875 + 0.5 = -5.125
        assert!((out[0] - 4.5).abs() < 1e-12);
        assert!((out[1] + 5.125).abs() < 1e-12);
    }

    #[test]
    fn output_is_invariant_under_edge_reordering() {
        let g = sample_graph();
        let model = GraphNetModel::build(&toy_spec(5), NODE_FEATURE_WIDTH, EDGE_FEATURE_WIDTH)
            .unwrap();
        let base = model.forward_eval(&g).unwrap();
        let mut shuffled = g.clone();
        shuffled.edges.reverse();
        let mut mid = shuffled.clone();
        mid.edges.rotate_left(7);
        for variant in [shuffled, mid] {
            let out = model.forward_eval(&variant).unwrap();
            for (a, b) in base.iter().zip(&out) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn outputs_are_permutation_equivariant() {
        let g = sample_graph();
        let model = GraphNetModel::build(&toy_spec(6), NODE_FEATURE_WIDTH, EDGE_FEATURE_WIDTH)
            .unwrap();
        let base = model.forward_eval(&g).unwrap();
        // reverse node order
        let n = g.node_count();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let permuted = GraphSample {
            deployment: g.deployment.clone(),
            node_features: perm.iter().map(|&o| g.node_features[o].clone()).collect(),
            node_is_sta: perm.iter().map(|&o| g.node_is_sta[o]).collect(),
            node_codes: perm.iter().map(|&o| g.node_codes[o].clone()).collect(),
            node_bss: perm.iter().map(|&o| g.node_bss[o].clone()).collect(),
            ap_of: perm.iter().map(|&o| g.ap_of[o].map(|a| inv[a])).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| GraphEdge {
                    src: inv[e.src],
                    dst: inv[e.dst],
                    features: e.features.clone(),
                })
                .collect(),
            labels: None,
        };
        let out = model.forward_eval(&permuted).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let (a, b) = (base[old], out[new]);
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_the_blocks() {
        let g = sample_graph();
        let spec = toy_spec(7);
        let mut model =
            GraphNetModel::build(&spec, NODE_FEATURE_WIDTH, EDGE_FEATURE_WIDTH).unwrap();
        let labels = g.labels.clone().unwrap();

        let loss_of = |m: &mut GraphNetModel| {
            let out = m.forward_eval(&g).unwrap();
            let (sta, ap) = graph_errors(&g, &out).unwrap();
            let n = sta.len() + ap.len();
            (sta.iter().chain(&ap).map(|e| e * e).sum::<f64>() / n as f64).sqrt()
        };
        let _ = labels;

        let (v_out, caches) = model.forward_train(&g).unwrap();
        let raw: Vec<f64> = (0..g.node_count()).map(|r| v_out.at(r, 0)).collect();
        let (sta_err, ap_err) = graph_errors(&g, &raw).unwrap();
        let total_n = sta_err.len() + ap_err.len();
        let loss = (sta_err.iter().chain(&ap_err).map(|e| e * e).sum::<f64>()
            / total_n as f64)
            .sqrt();
        let preds = assemble_node_predictions(&g, &raw);
        let glabels = g.labels.as_ref().unwrap();
        let mut grad_v = Mat::zeros(g.node_count(), 1);
        for i in 0..g.node_count() {
            if !g.node_is_sta[i] {
                continue;
            }
            let ap = g.ap_of[i].unwrap();
            *grad_v.at_mut(i, 0) = ((preds[i] - glabels[i]) + (preds[ap] - glabels[ap]))
                / (total_n as f64 * loss);
        }
        let analytic = model.backward(&g, &caches, grad_v);

        let params = model.params();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        // Check a deterministic spread of parameters to keep the test fast.
        let step = (params.len() / 60).max(1);
        for i in (0..params.len()).step_by(step) {
            let mut up = params.clone();
            up[i] += h;
            model.set_params(&up);
            let lp = loss_of(&mut model);
            let mut dn = params.clone();
            dn[i] -= h;
            model.set_params(&dn);
            let lm = loss_of(&mut model);
            model.set_params(&params);
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn fit_reduces_masked_loss_and_is_deterministic() {
        let graphs: Vec<GraphSample> = (0..3)
            .map(|i| {
                let spec = spec_by_name("test1").unwrap();
                let d = generate(&spec, i, 3).unwrap();
                let cfg = SimConfig {
                    duration_s: 0.05,
                    ..SimConfig::default()
                };
                let r = simulate(&d, &cfg).unwrap();
                GraphSample::build(&d, &r, &cfg.rf).unwrap()
            })
            .collect();
        let masked = |m: &GraphNetModel| {
            let mut sq = 0.0;
            let mut n = 0;
            for g in &graphs {
                let out = m.forward_eval(g).unwrap();
                let (s, a) = graph_errors(g, &out).unwrap();
                sq += s.iter().chain(&a).map(|e| e * e).sum::<f64>();
                n += s.len() + a.len();
            }
            (sq / n as f64).sqrt()
        };
        let mut spec = toy_spec(11);
        spec.epochs = 30;
        spec.learning_rate = 3e-3;
        let before = {
            let m = GraphNetModel::build(&spec, NODE_FEATURE_WIDTH, EDGE_FEATURE_WIDTH).unwrap();
            masked(&m)
        };
        let a = graphnet_fit(&spec, &graphs).unwrap();
        let after = masked(&a);
        assert!(after < before, "loss did not improve: {before} -> {after}");
        let b = graphnet_fit(&spec, &graphs).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
