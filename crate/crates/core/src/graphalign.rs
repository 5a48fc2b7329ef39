//! Batch graphs over instance features, attention message passing and the
//! graph-level structural distance between two modalities.
//!
//! Every layer that consumes a concatenation is stored as one weight block
//! per concatenated input ([`SplitLinear`]). Multiplying each block before
//! gathering rows equals multiplying the gathered concatenation, and avoids
//! materializing `N(N-1)` rows of width `2 * input_dim`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Parameter, Tape, Tensor, Var};
use crate::encoders::{Linear, Module, FEATURE_DIM};
use crate::error::{Error, Result};

pub const GRAPH_EMBEDDING_DIM: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub input_dim: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub message_dim: usize,
    pub readout_dim: usize,
    pub output_dim: usize,
    pub attention_slope: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            input_dim: FEATURE_DIM,
            node_dim: 128,
            edge_dim: 64,
            message_dim: 512,
            readout_dim: 256,
            output_dim: GRAPH_EMBEDDING_DIM,
            attention_slope: 0.2,
        }
    }
}

impl GraphConfig {
    /// Every width set to `d`.
    pub fn uniform(d: usize) -> Self {
        Self {
            input_dim: d,
            node_dim: d,
            edge_dim: d,
            message_dim: d,
            readout_dim: d,
            output_dim: d,
            attention_slope: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralMode {
    #[default]
    PullOnly,
    HingeWithNegatives,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructuralLossConfig {
    pub margin: f64,
    pub num_propagation_layers: usize,
    pub mode: StructuralMode,
}

impl Default for StructuralLossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            num_propagation_layers: 3,
            mode: StructuralMode::PullOnly,
        }
    }
}

impl StructuralLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::config("margin", "must be positive"));
        }
        if self.num_propagation_layers == 0 {
            return Err(Error::config("num_propagation_layers", "must be at least 1"));
        }
        Ok(())
    }
}

/// Linear layer over a concatenation, one weight block per part.
#[derive(Clone, Debug)]
pub struct SplitLinear {
    pub blocks: Vec<Parameter>,
    pub bias: Option<Parameter>,
}

impl SplitLinear {
    fn new(name: &str, parts: &[usize], output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in: usize = parts.iter().sum();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            let v = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, v).expect("split linear shape")
        };
        let blocks = parts
            .iter()
            .enumerate()
            .map(|(k, &d)| Parameter::new(format!("{name}.w{k}"), draw(&[d, output])))
            .collect();
        let bias = bias.then(|| Parameter::new(format!("{name}.bias"), draw(&[output])));
        Self { blocks, bias }
    }

    /// `x * W_k`.
    fn part(&self, tape: &mut Tape, k: usize, x: Var) -> Result<Var> {
        let w = tape.bind(&self.blocks[k]);
        tape.matmul(x, w)
    }

    fn add_bias(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.bias {
            Some(b) => {
                let b = tape.bind(b);
                tape.add_row(x, b)
            }
            None => Ok(x),
        }
    }
}

impl Module for SplitLinear {
    fn params(&self) -> Vec<&Parameter> {
        self.blocks.iter().chain(&self.bias).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.iter_mut().chain(&mut self.bias).collect()
    }
}

/// Ordered edges of the complete graph without self-loops. Edges are grouped
/// by target: for target `i`, sources `j` ascend over `j != i`.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub num_nodes: usize,
    pub targets: Arc<[usize]>,
    pub sources: Arc<[usize]>,
}

impl Adjacency {
    pub fn complete(n: usize) -> Self {
        let mut targets = Vec::with_capacity(n * (n - 1));
        let mut sources = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                targets.push(i);
                sources.push(j);
            }
        }
        Self {
            num_nodes: n,
            targets: targets.into(),
            sources: sources.into(),
        }
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    /// Neighbor set of node `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        let d = self.num_nodes - 1;
        &self.sources[i * d..(i + 1) * d]
    }
}

#[derive(Clone, Debug)]
pub struct GraphState {
    pub node_inputs: Var,
    pub node_states: Var,
    pub edge_features: Var,
    pub adjacency: Adjacency,
    pub layer: usize,
    pub max_layers: usize,
    /// Attention weights of the most recent propagation, `N(N-1) x 1`,
    /// ordered like the edges.
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub config: GraphConfig,
    pub node: Linear,
    pub edge: SplitLinear,
    pub message: SplitLinear,
    pub attention: SplitLinear,
    pub update: SplitLinear,
    pub readout_fc: Linear,
    pub readout_mlp: Linear,
}

impl GraphEncoder {
    pub fn new(name: &str, config: GraphConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        Self {
            node: Linear::new(&format!("{name}.node"), c.input_dim, c.node_dim, &mut rng),
            edge: SplitLinear::new(
                &format!("{name}.edge"),
                &[c.input_dim, c.input_dim],
                c.edge_dim,
                true,
                &mut rng,
            ),
            message: SplitLinear::new(
                &format!("{name}.message"),
                &[c.node_dim, c.node_dim, c.edge_dim],
                c.message_dim,
                true,
                &mut rng,
            ),
            attention: SplitLinear::new(
                &format!("{name}.attention"),
                &[c.node_dim, c.node_dim],
                1,
                false,
                &mut rng,
            ),
            update: SplitLinear::new(
                &format!("{name}.update"),
                &[c.node_dim, c.message_dim],
                c.node_dim,
                true,
                &mut rng,
            ),
            readout_fc: Linear::new(&format!("{name}.readout"), c.node_dim, c.readout_dim, &mut rng),
            readout_mlp: Linear::new(&format!("{name}.mlp_g"), c.readout_dim, c.output_dim, &mut rng),
            config,
        }
    }

    /// Node states `relu(MLP_node(x_i))` and edge features
    /// `relu(MLP_edge([x_i; x_j]))` over the complete graph.
    pub fn build_graph(&self, tape: &mut Tape, features: Var, max_layers: usize) -> Result<GraphState> {
        let tx = tape.value(features);
        let n = tx.rows();
        if tx.shape().len() != 2 || tx.cols() != self.config.input_dim {
            return Err(Error::Shape {
                op: "build_graph",
                lhs: vec![n, self.config.input_dim],
                rhs: tx.shape().to_vec(),
            });
        }
        if n < 2 {
            return Err(Error::invalid(format!("a batch graph needs at least 2 nodes, got {n}")));
        }
        let adjacency = Adjacency::complete(n);

        let h = self.node.forward(tape, features)?;
        let h = tape.relu(h);

        let p = self.edge.part(tape, 0, features)?;
        let q = self.edge.part(tape, 1, features)?;
        let pi = tape.gather_rows(p, adjacency.targets.clone())?;
        let qj = tape.gather_rows(q, adjacency.sources.clone())?;
        let e = tape.add(pi, qj)?;
        let e = self.edge.add_bias(tape, e)?;
        let e = tape.relu(e);

        Ok(GraphState {
            node_inputs: features,
            node_states: h,
            edge_features: e,
            adjacency,
            layer: 0,
            max_layers,
            attention: None,
        })
    }

    /// One round of attention-weighted message passing.
    pub fn propagate(&self, tape: &mut Tape, g: &GraphState) -> Result<GraphState> {
        if g.layer >= g.max_layers {
            return Err(Error::invalid(format!(
                "graph already propagated {} of {} layers",
                g.layer, g.max_layers
            )));
        }
        let adj = &g.adjacency;
        let n = adj.num_nodes;
        let h = g.node_states;

        // m_{j->i} = relu(F_m([h_i; h_j; e_ij]))
        let hi = self.message.part(tape, 0, h)?;
        let hj = self.message.part(tape, 1, h)?;
        let hi = tape.gather_rows(hi, adj.targets.clone())?;
        let hj = tape.gather_rows(hj, adj.sources.clone())?;
        let me = self.message.part(tape, 2, g.edge_features)?;
        let m = tape.add(hi, hj)?;
        let m = tape.add(m, me)?;
        let m = self.message.add_bias(tape, m)?;
        let m = tape.relu(m);

        // a_{j->i} = softmax_j(leaky_relu(w^T [h_i; h_j]))
        let si = self.attention.part(tape, 0, h)?;
        let sj = self.attention.part(tape, 1, h)?;
        let si = tape.gather_rows(si, adj.targets.clone())?;
        let sj = tape.gather_rows(sj, adj.sources.clone())?;
        let s = tape.add(si, sj)?;
        let s = tape.leaky_relu(s, self.config.attention_slope);
        let s = tape.reshape(s, &[n, n - 1])?;
        let a = tape.softmax(s)?;
        let a = tape.reshape(a, &[n * (n - 1), 1])?;

        let weighted = tape.mul_col(m, a)?;
        let agg = tape.group_sum_rows(weighted, n - 1)?;

        let u = self.update.part(tape, 0, h)?;
        let ua = self.update.part(tape, 1, agg)?;
        let u = tape.add(u, ua)?;
        let u = self.update.add_bias(tape, u)?;
        let h_next = tape.relu(u);

        Ok(GraphState {
            node_inputs: g.node_inputs,
            node_states: h_next,
            edge_features: g.edge_features,
            adjacency: adj.clone(),
            layer: g.layer + 1,
            max_layers: g.max_layers,
            attention: Some(a),
        })
    }

    /// `O_G = MLP_G(relu(FC(sum_i h_i)))`, a `1 x output_dim` row.
    pub fn readout(&self, tape: &mut Tape, g: &GraphState) -> Result<Var> {
        if g.layer != g.max_layers {
            return Err(Error::invalid(format!(
                "readout after {} of {} propagation layers",
                g.layer, g.max_layers
            )));
        }
        let pooled = tape.sum_rows(g.node_states);
        let r = self.readout_fc.forward(tape, pooled)?;
        let r = tape.relu(r);
        self.readout_mlp.forward(tape, r)
    }

    /// Build, propagate `layers` times and read out.
    pub fn embed(&self, tape: &mut Tape, features: Var, layers: usize) -> Result<Var> {
        let mut g = self.build_graph(tape, features, layers)?;
        for _ in 0..layers {
            g = self.propagate(tape, &g)?;
        }
        self.readout(tape, &g)
    }
}

impl Module for GraphEncoder {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.node.params();
        out.extend(self.edge.params());
        out.extend(self.message.params());
        out.extend(self.attention.params());
        out.extend(self.update.params());
        out.extend(self.readout_fc.params());
        out.extend(self.readout_mlp.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.node.params_mut();
        out.extend(self.edge.params_mut());
        out.extend(self.message.params_mut());
        out.extend(self.attention.params_mut());
        out.extend(self.update.params_mut());
        out.extend(self.readout_fc.params_mut());
        out.extend(self.readout_mlp.params_mut());
        out
    }
}

/// Structural distance between two graph embeddings.
///
/// `pull_only`: `||O_v - O_s||^2`. `hinge_with_negatives`: adds
/// `max(0, margin - ||O_v - O_neg||^2)` for a mismatched graph `O_neg`.
pub fn structural_loss(
    tape: &mut Tape,
    o_v: Var,
    o_s: Var,
    negative: Option<Var>,
    cfg: &StructuralLossConfig,
) -> Result<Var> {
    let d_pos = tape.sq_distance(o_v, o_s)?;
    match cfg.mode {
        StructuralMode::PullOnly => Ok(d_pos),
        StructuralMode::HingeWithNegatives => {
            let neg =
                negative.ok_or_else(|| Error::invalid("hinge_with_negatives needs a mismatched graph embedding"))?;
            let d_neg = tape.sq_distance(o_v, neg)?;
            let gap = tape.scale(d_neg, -1.0);
            let gap = tape.add_scalar(gap, cfg.margin);
            let term = tape.hinge(gap);
            tape.add(d_pos, term)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GraphEncoder {
        GraphEncoder::new(
            "g",
            GraphConfig {
                input_dim: 6,
                node_dim: 5,
                edge_dim: 3,
                message_dim: 4,
                readout_dim: 4,
                output_dim: 7,
                attention_slope: 0.2,
            },
            1,
        )
    }

    fn features(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn complete_graph_edge_counts() {
        assert_eq!(Adjacency::complete(2).num_edges(), 2);
        let a = Adjacency::complete(16);
        assert_eq!(a.num_edges(), 240);
        for i in 0..16 {
            assert_eq!(a.neighbors(i).len(), 15);
            assert!(!a.neighbors(i).contains(&i));
        }
    }

    #[test]
    fn single_node_batch_is_rejected() {
        let enc = small();
        let mut tape = Tape::new();
        let x = tape.constant(features(1, 6, 0));
        assert!(enc.build_graph(&mut tape, x, 1).is_err());
    }

    #[test]
    fn identical_rows_give_identical_nodes_and_edges() {
        let enc = small();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 6], 0.3));
        let g = enc.build_graph(&mut tape, x, 1).unwrap();
        for t in [tape.value(g.node_states), tape.value(g.edge_features)] {
            let first = t.row_slice(0).to_vec();
            assert!((0..t.rows()).all(|r| t.row_slice(r) == first.as_slice()));
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_equal_scores_are_uniform() {
        let mut enc = small();
        let mut tape = Tape::new();
        let x = tape.constant(features(5, 6, 3));
        let g = enc.build_graph(&mut tape, x, 1).unwrap();
        let g = enc.propagate(&mut tape, &g).unwrap();
        let a = tape.value(g.attention.unwrap());
        for row in a.values().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        for p in enc.attention.params_mut() {
            p.tensor.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(features(5, 6, 3));
        let g = enc.build_graph(&mut tape, x, 1).unwrap();
        let g = enc.propagate(&mut tape, &g).unwrap();
        assert!(tape
            .value(g.attention.unwrap())
            .values()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn propagation_past_the_last_layer_fails() {
        let enc = small();
        let mut tape = Tape::new();
        let x = tape.constant(features(3, 6, 0));
        let g = enc.build_graph(&mut tape, x, 1).unwrap();
        assert!(enc.readout(&mut tape, &g).is_err());
        let g = enc.propagate(&mut tape, &g).unwrap();
        assert!(enc.propagate(&mut tape, &g).is_err());
        assert!(enc.readout(&mut tape, &g).is_ok());
    }

    #[test]
    fn default_embedding_is_1024_wide() {
        let enc = GraphEncoder::new("g", GraphConfig::default(), 0);
        let mut tape = Tape::new();
        let x = tape.constant(features(3, FEATURE_DIM, 0));
        let o = enc.embed(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(o).shape(), &[1, GRAPH_EMBEDDING_DIM]);
        assert!(tape.value(o).all_finite());
    }

    #[test]
    fn structural_loss_spot_values() {
        let cfg = StructuralLossConfig::default();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::row(vec![1.0, 2.0, 4.0]));
        let l = structural_loss(&mut tape, a, a, None, &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = structural_loss(&mut tape, a, b, None, &cfg).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        let hinge = StructuralLossConfig {
            mode: StructuralMode::HingeWithNegatives,
            ..cfg
        };
        let far = tape.constant(Tensor::row(vec![1.0, 4.0, 3.0]));
        let l = structural_loss(&mut tape, a, b, Some(far), &hinge).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let near = tape.constant(Tensor::row(vec![1.0, 2.5, 3.0]));
        let l = structural_loss(&mut tape, a, b, Some(near), &hinge).unwrap();
        assert!((tape.value(l).item() - 1.75).abs() < 1e-15);
        assert!(structural_loss(&mut tape, a, b, None, &hinge).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(StructuralLossConfig::default().validate().is_ok());
        let bad = StructuralLossConfig {
            margin: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = StructuralLossConfig {
            num_propagation_layers: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
