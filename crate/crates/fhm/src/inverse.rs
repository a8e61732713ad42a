//! Annealed masked inversion: given a frozen weight matrix and fuzzy target
//! activations, recover input node values by gradient descent on the raw
//! (pre-sigmoid) inputs.
//!
//! The flow through the matrix is split by complementary masks into a valid
//! part, which may carry signal freely, and a forbidden part, whose L2 norm
//! is penalized with a weight that ramps up over the run. For the first half
//! of the steps the output is squashed through a sigmoid with small Gaussian
//! noise; from the midpoint on it is the raw linear sum, so the optimizer
//! finishes against an unbounded readout while the targets live in [0, 1].
//! The loss trace records both phases; the late-phase linear output is what
//! the target loss actually drives to the requested values.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{sigmoid, Matrix, Tape, TensorError};

#[derive(Debug, Error)]
pub enum InverseError {
    #[error("invalid inverse problem: {0}")]
    InvalidProblem(String),
    #[error("masks are not complementary at ({row},{col}): valid {valid}, forbidden {forbidden}")]
    MasksNotComplementary {
        row: usize,
        col: usize,
        valid: f64,
        forbidden: f64,
    },
    #[error("target node {node} is out of range ({nodes} nodes)")]
    TargetOutOfRange { node: usize, nodes: usize },
    #[error("no targets given; at least one node target is required")]
    EmptyTargets,
    #[error("unknown fuzzy term {term:?}; known terms: {known}")]
    UnknownTerm { term: String, known: String },
    #[error("unknown node {node:?}; known nodes: {known}")]
    UnknownNode { node: String, known: String },
    #[error("descent aborted at step {step}: loss is not finite")]
    NonFiniteLoss { step: usize },
    #[error("descent aborted at step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<InverseError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, InverseError>;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_LAMBDA_SOFT: f64 = 0.1;
pub const DEFAULT_NOISE_STD: f64 = 0.01;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Source of the annealing noise. The solver calls `draw` once per node per
/// noisy step, so a counting wrapper can verify the phase boundary exactly.
pub trait NoiseSource {
    /// One sample from N(0, std^2).
    fn draw(&mut self, std: f64) -> f64;
}

/// Seeded Gaussian noise.
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn seeded(seed: u64) -> Self {
        GaussianNoise {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl NoiseSource for GaussianNoise {
    fn draw(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        let normal = rand_distr::Normal::new(0.0, std).expect("finite non-negative std");
        rand::Rng::sample(&mut self.rng, normal)
    }
}

/// A frozen inversion task: weights, complementary path masks, targets, and
/// the descent schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct InverseProblem {
    w: Matrix,
    m_valid: Matrix,
    m_forbidden: Matrix,
    targets: BTreeMap<usize, f64>,
    pub steps: usize,
    pub lambda_soft: f64,
    pub noise_std: f64,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Serialize, Deserialize)]
struct RawProblem {
    w: Matrix,
    m_valid: Matrix,
    m_forbidden: Matrix,
    targets: BTreeMap<usize, f64>,
    steps: usize,
    lambda_soft: f64,
    noise_std: f64,
    lr: f64,
    momentum: f64,
}

impl From<InverseProblem> for RawProblem {
    fn from(p: InverseProblem) -> Self {
        RawProblem {
            w: p.w,
            m_valid: p.m_valid,
            m_forbidden: p.m_forbidden,
            targets: p.targets,
            steps: p.steps,
            lambda_soft: p.lambda_soft,
            noise_std: p.noise_std,
            lr: p.lr,
            momentum: p.momentum,
        }
    }
}

impl TryFrom<RawProblem> for InverseProblem {
    type Error = String;

    fn try_from(raw: RawProblem) -> std::result::Result<Self, String> {
        let mut p = InverseProblem::new(raw.w, raw.m_valid, raw.m_forbidden, raw.targets)
            .map_err(|e| e.to_string())?;
        p.steps = raw.steps;
        p.lambda_soft = raw.lambda_soft;
        p.noise_std = raw.noise_std;
        p.lr = raw.lr;
        p.momentum = raw.momentum;
        p.validate_schedule().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

fn check_complementary(m_valid: &Matrix, m_forbidden: &Matrix) -> Result<()> {
    for r in 0..m_valid.rows() {
        for c in 0..m_valid.cols() {
            let v = m_valid.get(r, c);
            let f = m_forbidden.get(r, c);
            let binary = (v == 0.0 || v == 1.0) && (f == 0.0 || f == 1.0);
            if !binary || v + f != 1.0 {
                return Err(InverseError::MasksNotComplementary {
                    row: r,
                    col: c,
                    valid: v,
                    forbidden: f,
                });
            }
        }
    }
    Ok(())
}

impl InverseProblem {
    /// Builds a problem from explicit masks, validating complementarity and
    /// targets. Schedule fields start at their defaults.
    pub fn new(
        w: Matrix,
        m_valid: Matrix,
        m_forbidden: Matrix,
        targets: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        let n = w.rows();
        if w.cols() != n {
            return Err(InverseError::InvalidProblem(format!(
                "weight matrix is {}x{}, expected square",
                w.rows(),
                w.cols()
            )));
        }
        if m_valid.shape() != (n, n) || m_forbidden.shape() != (n, n) {
            return Err(InverseError::InvalidProblem(format!(
                "masks are {}x{} and {}x{} for a {n}-node matrix",
                m_valid.rows(),
                m_valid.cols(),
                m_forbidden.rows(),
                m_forbidden.cols()
            )));
        }
        check_complementary(&m_valid, &m_forbidden)?;
        for (&node, &value) in &targets {
            if node >= n {
                return Err(InverseError::TargetOutOfRange { node, nodes: n });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(InverseError::InvalidProblem(format!(
                    "target for node {node} is {value}, outside [0,1]"
                )));
            }
        }
        Ok(InverseProblem {
            w,
            m_valid,
            m_forbidden,
            targets,
            steps: DEFAULT_STEPS,
            lambda_soft: DEFAULT_LAMBDA_SOFT,
            noise_std: DEFAULT_NOISE_STD,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    /// Derives the masks from an adjacency pattern: positions with a nonzero
    /// entry are valid, all others forbidden.
    pub fn from_adjacency(
        w: Matrix,
        adjacency: &Matrix,
        targets: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        if adjacency.shape() != w.shape() {
            return Err(InverseError::InvalidProblem(format!(
                "adjacency is {}x{} but weights are {}x{}",
                adjacency.rows(),
                adjacency.cols(),
                w.rows(),
                w.cols()
            )));
        }
        let m_valid = adjacency.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
        let m_forbidden = m_valid.map(|v| 1.0 - v);
        InverseProblem::new(w, m_valid, m_forbidden, targets)
    }

    fn validate_schedule(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(InverseError::InvalidProblem(format!(
                "at least 2 steps are required, got {}",
                self.steps
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(InverseError::InvalidProblem(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(InverseError::InvalidProblem(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.lambda_soft.is_finite() || self.lambda_soft < 0.0 {
            return Err(InverseError::InvalidProblem(format!(
                "topology weight must be non-negative and finite, got {}",
                self.lambda_soft
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(InverseError::InvalidProblem(format!(
                "noise std must be non-negative and finite, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.w.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn valid_mask(&self) -> &Matrix {
        &self.m_valid
    }

    pub fn forbidden_mask(&self) -> &Matrix {
        &self.m_forbidden
    }

    pub fn targets(&self) -> &BTreeMap<usize, f64> {
        &self.targets
    }
}

/// One step's loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub target: f64,
    pub topology: f64,
    pub total: f64,
}

/// Result of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSolution {
    /// Raw pre-sigmoid input parameters.
    pub x_raw: Vec<f64>,
    /// Squashed inputs, each in (0, 1).
    pub x: Vec<f64>,
    /// Squashed consequence vector `sigma(W sigma(x_raw))`.
    pub predicted: Vec<f64>,
    /// Linear late-phase readout `W sigma(x_raw)`, the quantity the target
    /// loss drives to the requested values.
    pub final_output: Vec<f64>,
    /// L2 norm of the forbidden flow at the solution.
    pub forbidden_norm: f64,
    /// One record per step.
    pub loss_trace: Vec<LossRecord>,
}

/// Splits the flow `W sigma(x_raw)` into its valid and forbidden parts.
pub fn split_flows(
    w: &Matrix,
    m_valid: &Matrix,
    m_forbidden: &Matrix,
    x_raw: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_complementary(m_valid, m_forbidden)?;
    let sx = x_raw.map(sigmoid);
    let f_valid = w.hadamard(m_valid)?.matmul(&sx)?;
    let f_forbidden = w.hadamard(m_forbidden)?.matmul(&sx)?;
    Ok((f_valid, f_forbidden))
}

/// Whether step `t` of `steps` lies in the noisy squashed phase.
pub fn in_noisy_phase(t: usize, steps: usize) -> bool {
    (t as f64) < steps as f64 / 2.0
}

/// The annealed readout: squashed with additive noise for the first half of
/// the run, the raw linear sum afterwards.
pub fn annealed_output(
    f_valid: &Matrix,
    f_forbidden: &Matrix,
    t: usize,
    steps: usize,
    noise_std: f64,
    noise: &mut dyn NoiseSource,
) -> Result<Matrix> {
    let flow = f_valid.add(f_forbidden)?;
    if !in_noisy_phase(t, steps) {
        return Ok(flow);
    }
    let noisy = Matrix::from_vec(
        flow.rows(),
        flow.cols(),
        flow.data().iter().map(|v| v + noise.draw(noise_std)).collect(),
    )?;
    Ok(noisy.map(sigmoid))
}

/// Topology weight at step `t`, ramping from `lambda_soft` at the start to
/// twice that at `t = steps`.
pub fn lambda_at(t: usize, steps: usize, lambda_soft: f64) -> f64 {
    lambda_soft * (1.0 + t as f64 / steps as f64)
}

/// Loss components at one step: the squared target deviations scaled by 100,
/// plus the ramped L2 norm of the forbidden flow.
pub fn inverse_losses(
    y_t: &Matrix,
    targets: &BTreeMap<usize, f64>,
    f_forbidden: &Matrix,
    t: usize,
    steps: usize,
    lambda_soft: f64,
) -> Result<(f64, f64, f64)> {
    if targets.is_empty() {
        return Err(InverseError::EmptyTargets);
    }
    let n = y_t.rows();
    let mut l_target = 0.0;
    for (&node, &value) in targets {
        if node >= n {
            return Err(InverseError::TargetOutOfRange { node, nodes: n });
        }
        l_target += (y_t.get(node, 0) - value).powi(2);
    }
    l_target *= 100.0;
    let l_topology = lambda_at(t, steps, lambda_soft) * f_forbidden.l2_norm();
    Ok((l_target, l_topology, l_target + l_topology))
}

impl InverseProblem {
    /// Runs the annealed descent from the all-zero raw input.
    pub fn solve(&self, noise: &mut dyn NoiseSource) -> Result<InverseSolution> {
        self.validate_schedule()?;
        check_complementary(&self.m_valid, &self.m_forbidden)?;
        if self.targets.is_empty() {
            return Err(InverseError::EmptyTargets);
        }
        let n = self.node_count();
        let w_valid = self.w.hadamard(&self.m_valid)?;
        let w_forbidden = self.w.hadamard(&self.m_forbidden)?;
        let mut target_vec = Matrix::zeros(n, 1);
        let mut target_mask = Matrix::zeros(n, 1);
        for (&node, &value) in &self.targets {
            if node >= n {
                return Err(InverseError::TargetOutOfRange { node, nodes: n });
            }
            target_vec.set(node, 0, value);
            target_mask.set(node, 0, 1.0);
        }

        let mut x_raw = Matrix::zeros(n, 1);
        let mut velocity = vec![0.0f64; n];
        let mut loss_trace = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let step = (|| -> Result<()> {
                let mut tape = Tape::new();
                let x = tape.var(x_raw.clone());
                let sx = tape.sigmoid(x)?;
                let wv = tape.constant(w_valid.clone());
                let wf = tape.constant(w_forbidden.clone());
                let f_valid = tape.matmul(wv, sx)?;
                let f_forbidden = tape.matmul(wf, sx)?;
                let flow = tape.add(f_valid, f_forbidden)?;
                let y = if in_noisy_phase(t, self.steps) {
                    let eps = Matrix::from_vec(
                        n,
                        1,
                        (0..n).map(|_| noise.draw(self.noise_std)).collect(),
                    )?;
                    let eps = tape.constant(eps);
                    let noisy = tape.add(flow, eps)?;
                    tape.sigmoid(noisy)?
                } else {
                    flow
                };
                let tv = tape.constant(target_vec.clone());
                let tm = tape.constant(target_mask.clone());
                let diff = tape.sub(y, tv)?;
                let masked = tape.hadamard(diff, tm)?;
                let sq = tape.sq_norm(masked)?;
                let l_target = tape.scale(sq, 100.0)?;
                let norm = tape.l2_norm(f_forbidden)?;
                let l_topology = tape.scale(norm, lambda_at(t, self.steps, self.lambda_soft))?;
                let total = tape.add(l_target, l_topology)?;

                let loss = tape.value(total).scalar_value();
                if !loss.is_finite() {
                    return Err(InverseError::NonFiniteLoss { step: t });
                }
                loss_trace.push(LossRecord {
                    target: tape.value(l_target).scalar_value(),
                    topology: tape.value(l_topology).scalar_value(),
                    total: loss,
                });

                let grads = tape.backward(total)?;
                let grad = grads
                    .wrt(x)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(n, 1));
                let g = grad.data();
                let p = x_raw.data_mut();
                for i in 0..n {
                    velocity[i] = self.momentum * velocity[i] - self.lr * g[i];
                    p[i] += velocity[i];
                }
                Ok(())
            })();
            step.map_err(|e| match e {
                InverseError::NonFiniteLoss { .. } => e,
                other => InverseError::StepFailed {
                    step: t,
                    source: Box::new(other),
                },
            })?;
        }

        let (f_valid, f_forbidden) = split_flows(&self.w, &self.m_valid, &self.m_forbidden, &x_raw)?;
        let final_output = f_valid.add(&f_forbidden)?;
        let x: Vec<f64> = x_raw.data().iter().map(|&v| sigmoid(v)).collect();
        let predicted: Vec<f64> = final_output.data().iter().map(|&v| sigmoid(v)).collect();
        Ok(InverseSolution {
            x_raw: x_raw.data().to_vec(),
            x,
            predicted,
            final_output: final_output.data().to_vec(),
            forbidden_norm: f_forbidden.l2_norm(),
            loss_trace,
        })
    }

    /// Solve with seeded Gaussian noise.
    pub fn solve_seeded(&self, seed: u64) -> Result<InverseSolution> {
        let mut noise = GaussianNoise::seeded(seed);
        self.solve(&mut noise)
    }
}

/// Turns fuzzy labels on named nodes into numeric targets via a membership
/// table, e.g. `{mpg: high}` with `{high: 0.8}` into `{mpg-index: 0.8}`.
pub fn fuzzy_query(
    labels: &BTreeMap<String, String>,
    memberships: &BTreeMap<String, f64>,
    node_names: &[String],
) -> Result<BTreeMap<usize, f64>> {
    for (term, &value) in memberships {
        if !(0.0..=1.0).contains(&value) {
            return Err(InverseError::InvalidProblem(format!(
                "membership for term {term:?} is {value}, outside [0,1]"
            )));
        }
    }
    let mut targets = BTreeMap::new();
    for (node, term) in labels {
        let index = node_names.iter().position(|n| n == node).ok_or_else(|| {
            InverseError::UnknownNode {
                node: node.clone(),
                known: node_names.join(", "),
            }
        })?;
        let value = memberships.get(term).ok_or_else(|| InverseError::UnknownTerm {
            term: term.clone(),
            known: memberships
                .keys()
                .cloned()
                .collect::<Vec<_>>()
                .join(", "),
        })?;
        targets.insert(index, *value);
    }
    Ok(targets)
}
