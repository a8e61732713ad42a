//! Classical fuzzy-cognitive-map simulator.
//!
//! A map is a signed weighted digraph over concept nodes; a state assigns one
//! activation per node and evolves by `s_{t+1} = f(s_t W)` for a squashing
//! activation `f`. The simulator is the ground-truth dynamics: the synthetic
//! data generator runs it to a fixed point, and the model's masked propagation
//! is checked against its linear pre-activation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{sigmoid, Matrix};

#[derive(Debug, Error)]
pub enum FcmError {
    #[error("weight matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("weight [{row},{col}] = {value} is outside [-1, 1]")]
    WeightOutOfRange { row: usize, col: usize, value: f64 },
    #[error("self-loop weight [{node},{node}] = {value}; enable self-loops to allow it")]
    SelfLoop { node: usize, value: f64 },
    #[error("state has {got} entries, map has {expected} nodes")]
    StateLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FcmActivation {
    Sigmoid,
    Tanh,
}

impl FcmActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FcmActivation::Sigmoid => sigmoid(x),
            FcmActivation::Tanh => x.tanh(),
        }
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 200;

/// Outcome of iterating a map from a start state.
#[derive(Debug, Clone)]
pub struct FixedPointRun {
    pub state: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// States after each update, starting with the start state itself.
    pub trajectory: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ClassicFcm {
    weights: Matrix,
    activation: FcmActivation,
    tolerance: f64,
    max_iters: usize,
}

impl ClassicFcm {
    /// Validates weights in [-1, 1] and a zero diagonal.
    pub fn new(weights: Matrix, activation: FcmActivation) -> Result<Self, FcmError> {
        Self::build(weights, activation, false)
    }

    /// Like [`ClassicFcm::new`] but permits nonzero diagonal entries.
    pub fn with_self_loops(weights: Matrix, activation: FcmActivation) -> Result<Self, FcmError> {
        Self::build(weights, activation, true)
    }

    fn build(
        weights: Matrix,
        activation: FcmActivation,
        allow_self_loops: bool,
    ) -> Result<Self, FcmError> {
        if weights.rows() != weights.cols() {
            return Err(FcmError::NotSquare {
                rows: weights.rows(),
                cols: weights.cols(),
            });
        }
        for r in 0..weights.rows() {
            for c in 0..weights.cols() {
                let value = weights.get(r, c);
                if !(-1.0..=1.0).contains(&value) {
                    return Err(FcmError::WeightOutOfRange { row: r, col: c, value });
                }
                if r == c && value != 0.0 && !allow_self_loops {
                    return Err(FcmError::SelfLoop { node: r, value });
                }
            }
        }
        Ok(ClassicFcm {
            weights,
            activation,
            tolerance: DEFAULT_TOLERANCE,
            max_iters: DEFAULT_MAX_ITERS,
        })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        assert!(tolerance > 0.0, "tolerance must be positive");
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        assert!(max_iters > 0, "max_iters must be positive");
        self.max_iters = max_iters;
        self
    }

    pub fn node_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn activation(&self) -> FcmActivation {
        self.activation
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    fn check_state(&self, state: &[f64]) -> Result<(), FcmError> {
        if state.len() != self.node_count() {
            return Err(FcmError::StateLength {
                got: state.len(),
                expected: self.node_count(),
            });
        }
        Ok(())
    }

    /// Linear pre-activation `state . W`, before squashing. Column `j`
    /// accumulates the incoming drive of node `j`.
    pub fn linear_drive(&self, state: &[f64]) -> Result<Vec<f64>, FcmError> {
        self.check_state(state)?;
        let n = self.node_count();
        let mut drive = vec![0.0; n];
        for (i, s) in state.iter().enumerate() {
            for (j, d) in drive.iter_mut().enumerate() {
                *d += s * self.weights.get(i, j);
            }
        }
        Ok(drive)
    }

    /// One synchronous update `f(state . W)` with no self-memory term.
    pub fn step(&self, state: &[f64]) -> Result<Vec<f64>, FcmError> {
        let drive = self.linear_drive(state)?;
        Ok(drive.iter().map(|d| self.activation.apply(*d)).collect())
    }

    /// Iterates until the max-norm step change drops below the tolerance or
    /// `max_iters` is reached. Non-convergence is a flag, never an error.
    pub fn run_to_fixed_point(&self, start: &[f64]) -> Result<FixedPointRun, FcmError> {
        self.check_state(start)?;
        let mut state = start.to_vec();
        let mut trajectory = vec![state.clone()];
        for iteration in 1..=self.max_iters {
            let next = self.step(&state)?;
            let delta = state
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            state = next;
            trajectory.push(state.clone());
            if delta < self.tolerance {
                return Ok(FixedPointRun {
                    state,
                    iterations: iteration,
                    converged: true,
                    trajectory,
                });
            }
        }
        Ok(FixedPointRun {
            state,
            iterations: self.max_iters,
            converged: false,
            trajectory,
        })
    }
}
