//! The glass-box model: encoder, masked mini-FCM fusion, propagation with
//! best-state selection, output gate, and per-metric heads.
//!
//! Shapes follow a rows-are-nodes convention. For `n` nodes the input is an
//! `n x 4` matrix of per-node summary features; the encoder lifts it to an
//! `n x d_latent` embedding `H_curr`; propagation repeatedly squashes
//! `H_t + H_prop` where `H_prop` is the adjacency-masked linear fusion of the
//! embeddings; the gate adds `sign(H)` to push activations away from zero;
//! each metric group owns a small two-layer head read off the gated rows.
//!
//! Every differentiable expression is built on a [`Tape`], so the training
//! module can reuse the same graph for gradients. The value-level functions
//! here wrap throwaway tapes: there is exactly one implementation of each
//! formula.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, NodeId, Tape, TensorError};

/// Per-node summary features: mean, standard deviation, minimum, maximum.
pub const NODE_FEATURES: usize = 4;

/// Hidden width of every metric head.
pub const HEAD_WIDTH: usize = 4;

/// Slope of the saturating echo term `tanh(5 H_curr)` in the propagation
/// operator.
pub const ECHO_GAIN: f64 = 5.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("metric group {index} does not exist ({count} groups)")]
    UnknownGroup { index: usize, count: usize },
    #[error("parameter shapes are inconsistent: {0}")]
    InvalidParams(String),
    #[error("input has shape {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    InputShape {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Width settings for the encoder and latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_hidden: 16,
            d_latent: 8,
        }
    }
}

/// Signed causal topology plus the metric grouping of its nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct FcmGraph {
    node_names: Vec<String>,
    adjacency: Matrix,
    metric_groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    node_names: Vec<String>,
    adjacency: Matrix,
    metric_groups: Vec<Vec<usize>>,
}

impl From<FcmGraph> for RawGraph {
    fn from(g: FcmGraph) -> Self {
        RawGraph {
            node_names: g.node_names,
            adjacency: g.adjacency,
            metric_groups: g.metric_groups,
        }
    }
}

impl TryFrom<RawGraph> for FcmGraph {
    type Error = String;

    fn try_from(raw: RawGraph) -> std::result::Result<Self, String> {
        FcmGraph::new(raw.node_names, raw.adjacency, raw.metric_groups)
            .map_err(|e| e.to_string())
    }
}

impl FcmGraph {
    /// Validates a square adjacency over {-1, 0, +1} with zero diagonal and
    /// metric groups that partition the nodes.
    pub fn new(
        node_names: Vec<String>,
        adjacency: Matrix,
        metric_groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = node_names.len();
        if adjacency.rows() != n || adjacency.cols() != n {
            return Err(ModelError::InvalidGraph(format!(
                "adjacency is {}x{} but there are {} nodes",
                adjacency.rows(),
                adjacency.cols(),
                n
            )));
        }
        for r in 0..n {
            for c in 0..n {
                let v = adjacency.get(r, c);
                if v != 0.0 && v != 1.0 && v != -1.0 {
                    return Err(ModelError::InvalidGraph(format!(
                        "adjacency[{r},{c}] = {v}; entries must be -1, 0, or +1"
                    )));
                }
                if r == c && v != 0.0 {
                    return Err(ModelError::InvalidGraph(format!(
                        "adjacency[{r},{r}] = {v}; self-loops are not allowed"
                    )));
                }
            }
        }
        let mut seen = vec![false; n];
        for (g, group) in metric_groups.iter().enumerate() {
            if group.is_empty() {
                return Err(ModelError::InvalidGraph(format!(
                    "metric group {g} is empty"
                )));
            }
            for &node in group {
                if node >= n {
                    return Err(ModelError::InvalidGraph(format!(
                        "metric group {g} references node {node}, but there are {n} nodes"
                    )));
                }
                if seen[node] {
                    return Err(ModelError::InvalidGraph(format!(
                        "node {node} appears in more than one metric group"
                    )));
                }
                seen[node] = true;
            }
        }
        if let Some(node) = seen.iter().position(|s| !s) {
            return Err(ModelError::InvalidGraph(format!(
                "node {node} is not covered by any metric group"
            )));
        }
        Ok(FcmGraph {
            node_names,
            adjacency,
            metric_groups,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.node_names.iter().position(|n| n == name)
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn metric_groups(&self) -> &[Vec<usize>] {
        &self.metric_groups
    }

    /// Directed signed edges as `(from, to, sign)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.node_count();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let s = self.adjacency.get(i, j);
                if s != 0.0 {
                    edges.push((i, j, s));
                }
            }
        }
        edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// 0/1 mask with ones at edge positions.
    pub fn edge_mask(&self) -> Matrix {
        self.adjacency.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
    }
}

/// Parameters of one metric head: latent -> 4 -> 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// All learnable parameters of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhmParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub heads: Vec<HeadParams>,
    pub w_fcm: Matrix,
}

impl FhmParams {
    /// Weight entries uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases
    /// zero, inner map weights uniform in [-0.1, 0.1].
    pub fn init(graph: &FcmGraph, config: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let n = graph.node_count();
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        let w1 = uniform(NODE_FEATURES, config.d_hidden, 1.0 / (NODE_FEATURES as f64).sqrt());
        let w2 = uniform(config.d_hidden, config.d_latent, 1.0 / (config.d_hidden as f64).sqrt());
        let heads = (0..graph.metric_groups().len())
            .map(|_| HeadParams {
                w1: uniform(config.d_latent, HEAD_WIDTH, 1.0 / (config.d_latent as f64).sqrt()),
                b1: Matrix::zeros(1, HEAD_WIDTH),
                w2: uniform(HEAD_WIDTH, 1, 1.0 / (HEAD_WIDTH as f64).sqrt()),
                b2: Matrix::zeros(1, 1),
            })
            .collect();
        let w_fcm = uniform(n, n, 0.1);
        FhmParams {
            w1,
            b1: Matrix::zeros(1, config.d_hidden),
            w2,
            b2: Matrix::zeros(1, config.d_latent),
            heads,
            w_fcm,
        }
    }

    /// Same shapes, all entries zero. Used for optimizer velocity.
    pub fn zeros_like(&self) -> Self {
        FhmParams {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(self.b1.rows(), self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(self.b2.rows(), self.b2.cols()),
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    w1: Matrix::zeros(h.w1.rows(), h.w1.cols()),
                    b1: Matrix::zeros(h.b1.rows(), h.b1.cols()),
                    w2: Matrix::zeros(h.w2.rows(), h.w2.cols()),
                    b2: Matrix::zeros(h.b2.rows(), h.b2.cols()),
                })
                .collect(),
            w_fcm: Matrix::zeros(self.w_fcm.rows(), self.w_fcm.cols()),
        }
    }

    pub fn d_latent(&self) -> usize {
        self.w2.cols()
    }

    /// Checks internal shape consistency and agreement with the graph.
    pub fn validate(&self, graph: &FcmGraph) -> Result<()> {
        let n = graph.node_count();
        let fail = |msg: String| Err(ModelError::InvalidParams(msg));
        if self.b1.rows() != 1 || self.b1.cols() != self.w1.cols() {
            return fail("encoder bias b1 does not match w1".into());
        }
        if self.w2.rows() != self.w1.cols() {
            return fail("encoder w2 rows do not match w1 cols".into());
        }
        if self.b2.rows() != 1 || self.b2.cols() != self.w2.cols() {
            return fail("encoder bias b2 does not match w2".into());
        }
        if self.heads.len() != graph.metric_groups().len() {
            return fail(format!(
                "{} heads for {} metric groups",
                self.heads.len(),
                graph.metric_groups().len()
            ));
        }
        for (m, head) in self.heads.iter().enumerate() {
            if head.w1.rows() != self.d_latent()
                || head.w1.cols() != HEAD_WIDTH
                || head.b1.rows() != 1
                || head.b1.cols() != HEAD_WIDTH
                || head.w2.rows() != HEAD_WIDTH
                || head.w2.cols() != 1
                || head.b2.rows() != 1
                || head.b2.cols() != 1
            {
                return fail(format!("head {m} has inconsistent shapes"));
            }
        }
        if self.w_fcm.rows() != n || self.w_fcm.cols() != n {
            return fail(format!(
                "inner map is {}x{} for {} nodes",
                self.w_fcm.rows(),
                self.w_fcm.cols(),
                n
            ));
        }
        Ok(())
    }
}

/// Per-node summary features from an `N x n` dataset: each node's column is
/// reduced to (mean, population std, min, max), giving an `n x 4` matrix.
pub fn node_features(values: &Matrix) -> Matrix {
    assert!(values.rows() > 0, "node_features needs at least one row");
    let n_rows = values.rows() as f64;
    Matrix::from_fn(values.cols(), NODE_FEATURES, |node, feature| {
        let column = values.column(node);
        let mean = column.iter().sum::<f64>() / n_rows;
        match feature {
            0 => mean,
            1 => (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_rows).sqrt(),
            2 => column.iter().copied().fold(f64::INFINITY, f64::min),
            _ => column.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    })
}

/// Tape handles for every learnable leaf, in optimizer order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub heads: Vec<HeadNodes>,
    pub w_fcm: NodeId,
}

#[derive(Debug, Clone)]
pub struct HeadNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Scores recorded at one propagation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub score: f64,
    pub mean_force: f64,
}

/// The forward pass recorded on a tape, with handles for the loss builder.
#[derive(Debug)]
pub struct ForwardGraph {
    pub params: ParamNodes,
    pub adjacency: NodeId,
    pub h_curr: NodeId,
    pub h_prop: NodeId,
    /// Gated best state, input of the metric heads.
    pub h_final: NodeId,
    /// Full `n x 1` head output per metric group.
    pub head_cols: Vec<NodeId>,
    pub s_perf: f64,
    pub selected_step: usize,
    pub trace: Vec<StepTrace>,
}

/// Plain-value outcome of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub h_curr: Matrix,
    pub h_prop: Matrix,
    pub h_final: Matrix,
    /// Head outputs restricted to each group's nodes, in group node order.
    pub head_outputs: Vec<Vec<f64>>,
    pub s_perf: f64,
    pub selected_step: usize,
    pub trace: Vec<StepTrace>,
}

fn register_params(tape: &mut Tape, params: &FhmParams) -> ParamNodes {
    ParamNodes {
        w1: tape.var(params.w1.clone()),
        b1: tape.var(params.b1.clone()),
        w2: tape.var(params.w2.clone()),
        b2: tape.var(params.b2.clone()),
        heads: params
            .heads
            .iter()
            .map(|h| HeadNodes {
                w1: tape.var(h.w1.clone()),
                b1: tape.var(h.b1.clone()),
                w2: tape.var(h.w2.clone()),
                b2: tape.var(h.b2.clone()),
            })
            .collect(),
        w_fcm: tape.var(params.w_fcm.clone()),
    }
}

/// Encoder `tanh(X0 W1 + b1) W2 + b2`; the outer layer is affine.
pub fn build_encode(
    tape: &mut Tape,
    x0: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId> {
    let pre = tape.matmul(x0, w1)?;
    let pre = tape.add(pre, b1)?;
    let hidden = tape.tanh(pre)?;
    let out = tape.matmul(hidden, w2)?;
    Ok(tape.add(out, b2)?)
}

/// Masked linear fusion `(A .* W_fcm)^T H_curr`: row `j` of the result
/// accumulates the drive flowing into node `j` along its incoming edges.
pub fn build_mini_fcm(
    tape: &mut Tape,
    h_curr: NodeId,
    w_fcm: NodeId,
    adjacency: NodeId,
) -> Result<NodeId> {
    let masked = tape.hadamard(adjacency, w_fcm)?;
    let masked_t = tape.transpose(masked)?;
    Ok(tape.matmul(masked_t, h_curr)?)
}

/// Sum over edges of `|W_fcm[i,j] - G[i,j]|` where `G` is the cosine
/// similarity of the embedding rows; zero-norm rows yield similarity 0.
pub fn build_fusion_penalty(
    tape: &mut Tape,
    w_fcm: NodeId,
    h_curr: NodeId,
    edge_mask: NodeId,
) -> Result<NodeId> {
    let g = tape.cosine_similarity(h_curr)?;
    let diff = tape.sub(w_fcm, g)?;
    let magnitude = tape.abs(diff)?;
    let masked = tape.hadamard(magnitude, edge_mask)?;
    Ok(tape.sum(masked)?)
}

/// Initial propagation state `H_curr + sign(H_curr)`.
pub fn build_initial_state(tape: &mut Tape, h_curr: NodeId) -> Result<NodeId> {
    let s = tape.sign_stop_gradient(h_curr)?;
    Ok(tape.add(h_curr, s)?)
}

/// One propagation step `tanh(H_t + H_prop) + echo`, where `echo` is the
/// precomputed `tanh(5 H_curr)`.
fn build_propagate_step(
    tape: &mut Tape,
    h_t: NodeId,
    h_prop: NodeId,
    echo: NodeId,
) -> Result<NodeId> {
    let pre = tape.add(h_t, h_prop)?;
    let squashed = tape.tanh(pre)?;
    Ok(tape.add(squashed, echo)?)
}

/// Output gate `H + sign(H)`.
pub fn build_output_gate(tape: &mut Tape, h: NodeId) -> Result<NodeId> {
    let s = tape.sign_stop_gradient(h)?;
    Ok(tape.add(h, s)?)
}

/// Head column `softsign(relu(H_final W1 + b1) W2 + b2)` over all nodes.
pub fn build_metric_head(tape: &mut Tape, h_final: NodeId, head: &HeadNodes) -> Result<NodeId> {
    let pre = tape.matmul(h_final, head.w1)?;
    let pre = tape.add(pre, head.b1)?;
    let hidden = tape.relu(pre)?;
    let out = tape.matmul(hidden, head.w2)?;
    let out = tape.add(out, head.b2)?;
    Ok(tape.softsign(out)?)
}

/// Node force: L2 norm of each embedding row.
pub fn node_force(h: &Matrix) -> Vec<f64> {
    h.row_l2_norms()
}

/// Transitive alignment `Gamma = E (A .* |S|)^T`: node `i` aggregates the
/// force of the nodes it points at, weighted by current edge magnitudes.
pub fn transitive_alignment(
    force: &[f64],
    adjacency: &Matrix,
    s_matrix: &Matrix,
) -> Result<Vec<f64>> {
    let n = adjacency.rows();
    if adjacency.cols() != n || s_matrix.shape() != (n, n) || force.len() != n {
        return Err(ModelError::InvalidParams(format!(
            "transitive_alignment: force has {} entries, adjacency {}x{}, snapshot {}x{}",
            force.len(),
            adjacency.rows(),
            adjacency.cols(),
            s_matrix.rows(),
            s_matrix.cols()
        )));
    }
    Ok((0..n)
        .map(|i| {
            (0..n)
                .filter(|&k| adjacency.get(i, k) != 0.0)
                .map(|k| force[k] * s_matrix.get(i, k).abs())
                .sum()
        })
        .collect())
}

/// Causal score: mean of per-node force plus alignment.
pub fn causal_score(force: &[f64], alignment: &[f64]) -> f64 {
    assert_eq!(force.len(), alignment.len(), "score inputs differ in length");
    assert!(!force.is_empty(), "causal_score of zero nodes");
    force
        .iter()
        .zip(alignment)
        .map(|(e, g)| e + g)
        .sum::<f64>()
        / force.len() as f64
}

/// Mutable propagation bookkeeping: the best state seen so far under a
/// strictly-greater score comparison, so ties keep the earlier state.
#[derive(Debug, Clone)]
pub struct PropagationState {
    pub h_curr: Matrix,
    pub h_t: Matrix,
    pub t: usize,
    pub t_max: usize,
    pub s_perf: f64,
    pub h_perf: Matrix,
    pub s_matrix: Matrix,
}

impl PropagationState {
    pub fn new(h_curr: Matrix, h_t0: Matrix, t_max: usize, s_matrix: Matrix) -> Self {
        PropagationState {
            h_curr,
            h_perf: h_t0.clone(),
            h_t: h_t0,
            t: 0,
            t_max,
            s_perf: f64::NEG_INFINITY,
            s_matrix,
        }
    }

    /// Adopts `h_next` as the best state iff its score strictly improves,
    /// then advances the step counter.
    pub fn select_best(&mut self, h_next: Matrix, score: f64) {
        if score > self.s_perf {
            self.s_perf = score;
            self.h_perf = h_next.clone();
        }
        self.h_t = h_next;
        self.t += 1;
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.t_max
    }
}

/// Records the full forward pass on `tape`. `s_matrix` is the inner-weight
/// snapshot used for scoring (during training, the value from the previous
/// optimizer step).
pub fn build_forward(
    tape: &mut Tape,
    x0: &Matrix,
    graph: &FcmGraph,
    params: &FhmParams,
    t_max: usize,
    s_matrix: &Matrix,
) -> Result<ForwardGraph> {
    params.validate(graph)?;
    let n = graph.node_count();
    if x0.rows() != n || x0.cols() != params.w1.rows() {
        return Err(ModelError::InputShape {
            got_rows: x0.rows(),
            got_cols: x0.cols(),
            want_rows: n,
            want_cols: params.w1.rows(),
        });
    }
    if s_matrix.shape() != (n, n) {
        return Err(ModelError::InvalidParams(format!(
            "score snapshot is {}x{} for {} nodes",
            s_matrix.rows(),
            s_matrix.cols(),
            n
        )));
    }

    let x0_id = tape.constant(x0.clone());
    let adjacency = tape.constant(graph.adjacency().clone());
    let params_nodes = register_params(tape, params);

    let h_curr = build_encode(
        tape,
        x0_id,
        params_nodes.w1,
        params_nodes.b1,
        params_nodes.w2,
        params_nodes.b2,
    )?;
    let h_prop = build_mini_fcm(tape, h_curr, params_nodes.w_fcm, adjacency)?;
    let h_t0 = build_initial_state(tape, h_curr)?;
    let scaled = tape.scale(h_curr, ECHO_GAIN)?;
    let echo = tape.tanh(scaled)?;

    let mut h_t = h_t0;
    let mut best = h_t0;
    let mut s_perf = f64::NEG_INFINITY;
    let mut selected_step = 0;
    let mut trace = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let h_next = build_propagate_step(tape, h_t, h_prop, echo)?;
        let force = node_force(tape.value(h_next));
        let alignment = transitive_alignment(&force, graph.adjacency(), s_matrix)?;
        let score = causal_score(&force, &alignment);
        let mean_force = force.iter().sum::<f64>() / force.len() as f64;
        trace.push(StepTrace { score, mean_force });
        if score > s_perf {
            s_perf = score;
            best = h_next;
            selected_step = t;
        }
        h_t = h_next;
    }

    let h_final = build_output_gate(tape, best)?;
    let head_cols = params_nodes
        .heads
        .iter()
        .map(|head| build_metric_head(tape, h_final, head))
        .collect::<Result<Vec<_>>>()?;

    Ok(ForwardGraph {
        params: params_nodes,
        adjacency,
        h_curr,
        h_prop,
        h_final,
        head_cols,
        s_perf,
        selected_step,
        trace,
    })
}

/// Full forward pass as plain values.
pub fn forward_full(
    x0: &Matrix,
    graph: &FcmGraph,
    params: &FhmParams,
    t_max: usize,
    s_matrix: &Matrix,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let fg = build_forward(&mut tape, x0, graph, params, t_max, s_matrix)?;
    let head_outputs = graph
        .metric_groups()
        .iter()
        .zip(&fg.head_cols)
        .map(|(group, col)| {
            let column = tape.value(*col);
            group.iter().map(|&node| column.get(node, 0)).collect()
        })
        .collect();
    Ok(ForwardOutput {
        h_curr: tape.value(fg.h_curr).clone(),
        h_prop: tape.value(fg.h_prop).clone(),
        h_final: tape.value(fg.h_final).clone(),
        head_outputs,
        s_perf: fg.s_perf,
        selected_step: fg.selected_step,
        trace: fg.trace,
    })
}

/// Encoder output as a plain value.
pub fn encode(x0: &Matrix, params: &FhmParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let w1 = tape.constant(params.w1.clone());
    let b1 = tape.constant(params.b1.clone());
    let w2 = tape.constant(params.w2.clone());
    let b2 = tape.constant(params.b2.clone());
    let out = build_encode(&mut tape, x, w1, b1, w2, b2)?;
    Ok(tape.value(out).clone())
}

/// Masked fusion as a plain value.
pub fn mini_fcm(h_curr: &Matrix, w_fcm: &Matrix, adjacency: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let h = tape.constant(h_curr.clone());
    let w = tape.constant(w_fcm.clone());
    let a = tape.constant(adjacency.clone());
    let out = build_mini_fcm(&mut tape, h, w, a)?;
    Ok(tape.value(out).clone())
}

/// Fusion penalty as a plain value.
pub fn fusion_penalty(w_fcm: &Matrix, h_curr: &Matrix, graph: &FcmGraph) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.constant(w_fcm.clone());
    let h = tape.constant(h_curr.clone());
    let mask = tape.constant(graph.edge_mask());
    let out = build_fusion_penalty(&mut tape, w, h, mask)?;
    Ok(tape.value(out).scalar_value())
}

/// Initial state as a plain value.
pub fn initial_state(h_curr: &Matrix) -> Matrix {
    h_curr.map(|v| v + crate::tensor::sign(v))
}

/// One propagation step as a plain value.
pub fn propagate_step(h_t: &Matrix, h_prop: &Matrix, h_curr: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let t = tape.constant(h_t.clone());
    let p = tape.constant(h_prop.clone());
    let scaled = tape.constant(h_curr.clone());
    let scaled = tape.scale(scaled, ECHO_GAIN)?;
    let echo = tape.tanh(scaled)?;
    let out = build_propagate_step(&mut tape, t, p, echo)?;
    Ok(tape.value(out).clone())
}

/// Output gate as a plain value.
pub fn output_gate(h: &Matrix) -> Matrix {
    h.map(|v| v + crate::tensor::sign(v))
}

/// Head output restricted to the nodes of metric group `group_index`.
pub fn metric_head(
    h_final: &Matrix,
    group_index: usize,
    params: &FhmParams,
    graph: &FcmGraph,
) -> Result<Vec<f64>> {
    let groups = graph.metric_groups();
    if group_index >= groups.len() {
        return Err(ModelError::UnknownGroup {
            index: group_index,
            count: groups.len(),
        });
    }
    let head = &params.heads[group_index];
    let mut tape = Tape::new();
    let h = tape.constant(h_final.clone());
    let nodes = HeadNodes {
        w1: tape.constant(head.w1.clone()),
        b1: tape.constant(head.b1.clone()),
        w2: tape.constant(head.w2.clone()),
        b2: tape.constant(head.b2.clone()),
    };
    let col = build_metric_head(&mut tape, h, &nodes)?;
    let column = tape.value(col);
    Ok(groups[group_index]
        .iter()
        .map(|&node| column.get(node, 0))
        .collect())
}
