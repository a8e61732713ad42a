//! Loss assembly, noisy momentum SGD, and fold-parallel cross-validation.
//!
//! The loss is the squared deviation of every head output from its metric
//! target plus a weighted fusion penalty tying the inner map to embedding
//! similarity. Optimization is full-batch: one parameter update per epoch,
//! with Gaussian gradient noise whose scale decays linearly to zero at the
//! final epoch. Inner-map entries outside the adjacency mask are never
//! touched by the optimizer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalmetrics::{self, Aggregate, EvalError, FoldAccuracy};
use crate::model::{
    self, build_forward, node_features, FcmGraph, FhmParams, ForwardGraph, ModelConfig,
    ModelError,
};
use crate::tensor::{Matrix, NodeId, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("cannot split {rows} rows into {folds} folds")]
    FoldCount { folds: usize, rows: usize },
    #[error("training aborted at epoch {epoch}: loss is not finite")]
    NonFiniteLoss { epoch: usize },
    #[error("training aborted at epoch {epoch}: {source}")]
    EpochFailed {
        epoch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("fold {fold}: {source}")]
    FoldFailed {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Normalized observations with one column per node, plus the per-metric
/// targets derived from them.
///
/// Each metric group's block is the column subset named by the group; its
/// target is the grand mean of that block.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDataset {
    values: Matrix,
    node_columns: Vec<usize>,
    targets: Vec<f64>,
}

impl MetricDataset {
    /// Columns of `values` must follow the graph's node order and lie in
    /// [0, 1].
    pub fn new(values: Matrix, graph: &FcmGraph) -> Result<Self> {
        let n = graph.node_count();
        if values.cols() != n {
            return Err(TrainError::InvalidDataset(format!(
                "{} columns for {} nodes",
                values.cols(),
                n
            )));
        }
        if values.rows() == 0 {
            return Err(TrainError::InvalidDataset("no observation rows".into()));
        }
        for r in 0..values.rows() {
            for c in 0..n {
                let v = values.get(r, c);
                if !(0.0..=1.0).contains(&v) {
                    return Err(TrainError::InvalidDataset(format!(
                        "value {v} at row {r}, column {c} is outside [0,1]"
                    )));
                }
            }
        }
        let node_columns: Vec<usize> = (0..n).collect();
        let targets = compute_targets(&values, &node_columns, graph);
        Ok(MetricDataset {
            values,
            node_columns,
            targets,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Column of `values` holding a node's observations.
    pub fn node_column(&self, node: usize) -> usize {
        self.node_columns[node]
    }

    /// Grand-mean target of each metric group.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// The metric block for group `m`: all rows, the group's columns.
    pub fn block(&self, m: usize, graph: &FcmGraph) -> Matrix {
        let group = &graph.metric_groups()[m];
        Matrix::from_fn(self.rows(), group.len(), |r, c| {
            self.values.get(r, self.node_columns[group[c]])
        })
    }

    /// Recomputes group `m`'s target from the stored block.
    pub fn recompute_target(&self, m: usize, graph: &FcmGraph) -> f64 {
        let block = self.block(m, graph);
        block.sum() / (block.rows() * block.cols()) as f64
    }

    /// Restricts to the given rows; targets are recomputed from them alone.
    pub fn subset(&self, rows: &[usize], graph: &FcmGraph) -> Result<Self> {
        if rows.is_empty() {
            return Err(TrainError::InvalidDataset("empty row subset".into()));
        }
        for &r in rows {
            if r >= self.rows() {
                return Err(TrainError::InvalidDataset(format!(
                    "row {r} out of range ({} rows)",
                    self.rows()
                )));
            }
        }
        let values = Matrix::from_fn(rows.len(), self.values.cols(), |r, c| {
            self.values.get(rows[r], c)
        });
        let targets = compute_targets(&values, &self.node_columns, graph);
        Ok(MetricDataset {
            values,
            node_columns: self.node_columns.clone(),
            targets,
        })
    }
}

fn compute_targets(values: &Matrix, node_columns: &[usize], graph: &FcmGraph) -> Vec<f64> {
    graph
        .metric_groups()
        .iter()
        .map(|group| {
            let total: f64 = group
                .iter()
                .flat_map(|&node| values.column(node_columns[node]))
                .sum();
            total / (values.rows() * group.len()) as f64
        })
        .collect()
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrainConfig", into = "RawTrainConfig")]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub t_max: usize,
    pub fusion_weight: f64,
    pub noise_scale: f64,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RawTrainConfig {
    epochs: usize,
    lr: f64,
    momentum: f64,
    t_max: usize,
    fusion_weight: f64,
    noise_scale: f64,
    folds: usize,
    seed: u64,
}

impl From<TrainConfig> for RawTrainConfig {
    fn from(c: TrainConfig) -> Self {
        RawTrainConfig {
            epochs: c.epochs,
            lr: c.lr,
            momentum: c.momentum,
            t_max: c.t_max,
            fusion_weight: c.fusion_weight,
            noise_scale: c.noise_scale,
            folds: c.folds,
            seed: c.seed,
        }
    }
}

impl TryFrom<RawTrainConfig> for TrainConfig {
    type Error = String;

    fn try_from(raw: RawTrainConfig) -> std::result::Result<Self, String> {
        let config = TrainConfig {
            epochs: raw.epochs,
            lr: raw.lr,
            momentum: raw.momentum,
            t_max: raw.t_max,
            fusion_weight: raw.fusion_weight,
            noise_scale: raw.noise_scale,
            folds: raw.folds,
            seed: raw.seed,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            t_max: 5,
            fusion_weight: 0.1,
            noise_scale: 0.01,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.folds < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "at least 2 folds are required, got {}",
                self.folds
            )));
        }
        if !self.fusion_weight.is_finite() || self.fusion_weight < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "fusion weight must be non-negative and finite, got {}",
                self.fusion_weight
            )));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "noise scale must be non-negative and finite, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Sum over metrics and their nodes of the squared deviation from the
/// metric's target.
pub fn tune_loss(head_outputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    assert_eq!(
        head_outputs.len(),
        targets.len(),
        "one target per metric head"
    );
    head_outputs
        .iter()
        .zip(targets)
        .map(|(ys, v)| ys.iter().map(|y| (y - v).powi(2)).sum::<f64>())
        .sum()
}

/// Records the tuning loss on the tape: per metric, the squared norm of the
/// head column minus the target, restricted to the group's nodes.
pub fn build_tune_loss(
    tape: &mut Tape,
    fg: &ForwardGraph,
    graph: &FcmGraph,
    targets: &[f64],
) -> Result<NodeId> {
    assert_eq!(
        targets.len(),
        graph.metric_groups().len(),
        "one target per metric group"
    );
    let n = graph.node_count();
    let mut total: Option<NodeId> = None;
    for (m, group) in graph.metric_groups().iter().enumerate() {
        let mut target_col = Matrix::zeros(n, 1);
        let mut mask_col = Matrix::zeros(n, 1);
        for &node in group {
            target_col.set(node, 0, targets[m]);
            mask_col.set(node, 0, 1.0);
        }
        let target_id = tape.constant(target_col);
        let mask_id = tape.constant(mask_col);
        let diff = tape.sub(fg.head_cols[m], target_id)?;
        let masked = tape.hadamard(diff, mask_id)?;
        let term = tape.sq_norm(masked)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("graphs have at least one metric group"))
}

/// Tuning loss plus `beta` times the fusion penalty.
pub fn build_total_loss(
    tape: &mut Tape,
    fg: &ForwardGraph,
    graph: &FcmGraph,
    targets: &[f64],
    beta: f64,
) -> Result<NodeId> {
    let tune = build_tune_loss(tape, fg, graph, targets)?;
    let mask = tape.constant(graph.edge_mask());
    let fusion = model::build_fusion_penalty(tape, fg.params.w_fcm, fg.h_curr, mask)?;
    let weighted = tape.scale(fusion, beta)?;
    Ok(tape.add(tune, weighted)?)
}

/// Gradient noise scale at `epoch`, decaying linearly to zero at the final
/// epoch.
pub fn noise_at(epoch: usize, epochs: usize, scale: f64) -> f64 {
    if epochs <= 1 {
        return 0.0;
    }
    scale * (1.0 - epoch as f64 / (epochs - 1) as f64)
}

fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let normal = rand_distr::Normal::new(0.0, std).expect("finite non-negative std");
    rng.sample(normal)
}

/// One noisy momentum step on a single parameter matrix:
/// `v <- momentum v - lr (g + eps)`, `p <- p + v`.
pub fn sgd_momentum_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    noise_scale: f64,
    rng: &mut impl Rng,
) {
    assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
    assert_eq!(param.shape(), velocity.shape(), "velocity shape mismatch");
    let g = grad.data();
    let v = velocity.data_mut();
    for i in 0..g.len() {
        v[i] = momentum * v[i] - lr * (g[i] + gaussian(rng, noise_scale));
    }
    let p = param.data_mut();
    for i in 0..p.len() {
        p[i] += v[i];
    }
}

/// Masked variant: entries where `mask` is zero are skipped outright, so
/// their parameter, velocity, and noise stream are all untouched.
pub fn sgd_momentum_step_masked(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    noise_scale: f64,
    mask: &Matrix,
    rng: &mut impl Rng,
) {
    assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
    assert_eq!(param.shape(), velocity.shape(), "velocity shape mismatch");
    assert_eq!(param.shape(), mask.shape(), "mask shape mismatch");
    let g = grad.data();
    let m = mask.data();
    let v = velocity.data_mut();
    for i in 0..g.len() {
        if m[i] == 0.0 {
            continue;
        }
        v[i] = momentum * v[i] - lr * (g[i] + gaussian(rng, noise_scale));
    }
    let p = param.data_mut();
    for i in 0..p.len() {
        if m[i] == 0.0 {
            continue;
        }
        p[i] += v[i];
    }
}

/// Gradients of the loss with respect to every parameter, shaped like the
/// parameters themselves; parameters the loss never touched get zeros.
pub fn collect_grads(
    grads: &crate::tensor::Gradients,
    fg: &ForwardGraph,
    params: &FhmParams,
) -> FhmParams {
    let mut out = params.zeros_like();
    let fetch = |id: NodeId, shape_of: &Matrix| -> Matrix {
        grads
            .wrt(id)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape_of.rows(), shape_of.cols()))
    };
    out.w1 = fetch(fg.params.w1, &params.w1);
    out.b1 = fetch(fg.params.b1, &params.b1);
    out.w2 = fetch(fg.params.w2, &params.w2);
    out.b2 = fetch(fg.params.b2, &params.b2);
    for (h, nodes) in out.heads.iter_mut().zip(&fg.params.heads) {
        let shapes = &params.heads[0];
        h.w1 = fetch(nodes.w1, &shapes.w1);
        h.b1 = fetch(nodes.b1, &shapes.b1);
        h.w2 = fetch(nodes.w2, &shapes.w2);
        h.b2 = fetch(nodes.b2, &shapes.b2);
    }
    out.w_fcm = fetch(fg.params.w_fcm, &params.w_fcm);
    out
}

/// Applies one optimizer step to every parameter group, masking the inner
/// map to the adjacency so absent edges stay untouched.
pub fn apply_sgd_step(
    params: &mut FhmParams,
    grads: &FhmParams,
    velocity: &mut FhmParams,
    lr: f64,
    momentum: f64,
    noise_scale: f64,
    edge_mask: &Matrix,
    rng: &mut impl Rng,
) {
    sgd_momentum_step(&mut params.w1, &grads.w1, &mut velocity.w1, lr, momentum, noise_scale, rng);
    sgd_momentum_step(&mut params.b1, &grads.b1, &mut velocity.b1, lr, momentum, noise_scale, rng);
    sgd_momentum_step(&mut params.w2, &grads.w2, &mut velocity.w2, lr, momentum, noise_scale, rng);
    sgd_momentum_step(&mut params.b2, &grads.b2, &mut velocity.b2, lr, momentum, noise_scale, rng);
    for ((p, g), v) in params
        .heads
        .iter_mut()
        .zip(&grads.heads)
        .zip(&mut velocity.heads)
    {
        sgd_momentum_step(&mut p.w1, &g.w1, &mut v.w1, lr, momentum, noise_scale, rng);
        sgd_momentum_step(&mut p.b1, &g.b1, &mut v.b1, lr, momentum, noise_scale, rng);
        sgd_momentum_step(&mut p.w2, &g.w2, &mut v.w2, lr, momentum, noise_scale, rng);
        sgd_momentum_step(&mut p.b2, &g.b2, &mut v.b2, lr, momentum, noise_scale, rng);
    }
    sgd_momentum_step_masked(
        &mut params.w_fcm,
        &grads.w_fcm,
        &mut velocity.w_fcm,
        lr,
        momentum,
        noise_scale,
        edge_mask,
        rng,
    );
}

/// Measurements taken while training one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    /// Highest propagation score observed across epochs; absent when no
    /// propagation step ever ran.
    pub best_s_perf: Option<f64>,
    /// Tuning loss of the trained model on the held-out rows, against
    /// targets recomputed from those rows.
    pub validation_loss: f64,
    /// Learned inner map.
    pub w_fcm: Matrix,
    /// Total training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains on one fold's training rows and scores the held-out rows.
pub fn train_fold(
    train: &MetricDataset,
    val: &MetricDataset,
    graph: &FcmGraph,
    config: &TrainConfig,
    model_config: &ModelConfig,
    rng: &mut impl Rng,
    fold: usize,
) -> Result<(FhmParams, FoldMetrics)> {
    config.validate()?;
    let mut params = FhmParams::init(graph, model_config, rng);
    let mut velocity = params.zeros_like();
    let edge_mask = graph.edge_mask();
    let x0 = node_features(train.values());
    let mut best_s_perf = f64::NEG_INFINITY;
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let step = (|| -> Result<()> {
            let s_matrix = params.w_fcm.clone();
            let mut tape = Tape::new();
            let fg = build_forward(&mut tape, &x0, graph, &params, config.t_max, &s_matrix)?;
            let loss_id =
                build_total_loss(&mut tape, &fg, graph, train.targets(), config.fusion_weight)?;
            let loss = tape.value(loss_id).scalar_value();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_trace.push(loss);
            best_s_perf = best_s_perf.max(fg.s_perf);
            let grads = tape.backward(loss_id)?;
            let grads = collect_grads(&grads, &fg, &params);
            apply_sgd_step(
                &mut params,
                &grads,
                &mut velocity,
                config.lr,
                config.momentum,
                noise_at(epoch, config.epochs, config.noise_scale),
                &edge_mask,
                rng,
            );
            Ok(())
        })();
        step.map_err(|e| match e {
            TrainError::NonFiniteLoss { .. } => e,
            other => TrainError::EpochFailed {
                epoch,
                source: Box::new(other),
            },
        })?;
    }

    let x0_val = node_features(val.values());
    let val_out = model::forward_full(&x0_val, graph, &params, config.t_max, &params.w_fcm)?;
    let validation_loss = tune_loss(&val_out.head_outputs, val.targets());
    let metrics = FoldMetrics {
        fold,
        best_s_perf: best_s_perf.is_finite().then_some(best_s_perf),
        validation_loss,
        w_fcm: params.w_fcm.clone(),
        loss_trace,
    };
    Ok((params, metrics))
}

/// Everything produced for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub params: FhmParams,
    pub metrics: FoldMetrics,
    pub accuracy: FoldAccuracy,
}

/// Cross-validation results with their reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: Aggregate,
}

impl CrossValidation {
    pub fn best(&self) -> &FoldOutcome {
        &self.folds[self.aggregate.best_fold]
    }
}

/// Contiguous fold blocks over a seeded shuffle of the row indices. Fold `k`
/// holds block `k` out; the remaining rows train it.
pub fn fold_splits(rows: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds > rows {
        return Err(TrainError::FoldCount { folds, rows });
    }
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let base = rows / folds;
    let extra = rows % folds;
    let mut splits = Vec::with_capacity(folds);
    let mut start = 0usize;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let val: Vec<usize> = order[start..start + len].to_vec();
        let train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + len..])
            .copied()
            .collect();
        splits.push((train, val));
        start += len;
    }
    Ok(splits)
}

/// Runs every fold (in parallel when `threads > 1`), scores each learned
/// inner map against the true topology, and reduces the fold accuracies.
/// Results do not depend on the thread count: each fold owns an RNG stream
/// derived from the seed and its index.
pub fn cross_validate(
    dataset: &MetricDataset,
    graph: &FcmGraph,
    config: &TrainConfig,
    model_config: &ModelConfig,
    threads: usize,
) -> Result<CrossValidation> {
    config.validate()?;
    let splits = fold_splits(dataset.rows(), config.folds, config.seed)?;
    let jobs: Vec<(usize, MetricDataset, MetricDataset)> = splits
        .iter()
        .enumerate()
        .map(|(k, (train_rows, val_rows))| {
            Ok((
                k,
                dataset.subset(train_rows, graph)?,
                dataset.subset(val_rows, graph)?,
            ))
        })
        .collect::<Result<_>>()?;

    let workers = threads.max(1).min(jobs.len());
    let mut results: Vec<Option<Result<(FhmParams, FoldMetrics)>>> =
        (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for chunk in jobs.chunks(jobs.len().div_ceil(workers)) {
            handles.push(scope.spawn(move || {
                chunk
                    .iter()
                    .map(|(k, train, val)| {
                        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                        rng.set_stream(*k as u64 + 1);
                        (
                            *k,
                            train_fold(train, val, graph, config, model_config, &mut rng, *k),
                        )
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (k, result) in handle.join().expect("fold worker panicked") {
                results[k] = Some(result);
            }
        }
    });

    let mut folds = Vec::with_capacity(results.len());
    for (k, result) in results.into_iter().enumerate() {
        let (params, metrics) = result
            .expect("every fold spawned")
            .map_err(|e| TrainError::FoldFailed {
                fold: k,
                source: Box::new(e),
            })?;
        let direct = evalmetrics::direct_edge_accuracy(&params.w_fcm, graph.adjacency())?;
        let transitive =
            match evalmetrics::transitive_chain_accuracy(&params.w_fcm, graph.adjacency()) {
                Ok(acc) => Some(acc),
                Err(EvalError::NoChains) => None,
                Err(e) => return Err(e.into()),
            };
        let accuracy = FoldAccuracy {
            fold: metrics.fold,
            direct,
            transitive,
        };
        folds.push(FoldOutcome {
            params,
            metrics,
            accuracy,
        });
    }
    let accuracies: Vec<FoldAccuracy> = folds.iter().map(|f| f.accuracy.clone()).collect();
    let aggregate = evalmetrics::aggregate(&accuracies)?;
    Ok(CrossValidation { folds, aggregate })
}
