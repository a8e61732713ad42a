//! Built-in causal topologies, synthetic data generation, and CSV ingestion.
//!
//! A topology is a signed digraph over named concept nodes together with a
//! grouping of the nodes into metrics. The synthetic generator assigns each
//! edge a random magnitude, runs the classical simulator from random starts
//! to steady state, and perturbs the collected states with observation noise.
//! The CSV loader ingests real observations by node name and min-max
//! normalizes every column to [0, 1].
//!
//! Topology files are JSON:
//!
//! ```json
//! {
//!   "name": "toy",
//!   "nodes": ["a", "b"],
//!   "edges": [{ "from": "a", "to": "b", "sign": 1 }],
//!   "groups": { "all": ["a", "b"] },
//!   "generator": { "noise_level": 0.05, "samples": 60, "seed": 0 }
//! }
//! ```
//!
//! Dataset files are plain CSV with one header row of node names and one
//! observation per data row.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fcm::{ClassicFcm, FcmActivation, FcmError};
use crate::model::{FcmGraph, ModelError};
use crate::tensor::Matrix;
use crate::training::{MetricDataset, TrainError};

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown topology {name:?}; built-ins: {known}")]
    UnknownTopology { name: String, known: String },
    #[error("invalid topology {name:?}: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("generating {name:?}: {failed} of {total} starts did not settle")]
    NonConvergent { name: String, failed: usize, total: usize },
    #[error("column {column:?} missing from {path:?}")]
    MissingColumn { column: String, path: String },
    #[error("no usable rows in {path:?} ({dropped} dropped)")]
    EmptyData { path: String, dropped: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fcm(#[from] FcmError),
}

/// Knobs for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    /// Standard deviation of the Gaussian observation noise.
    pub noise_level: f64,
    /// Number of observations to draw.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            noise_level: 0.05,
            samples: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    /// +1 for a reinforcing link, -1 for an opposing one.
    pub sign: i8,
}

/// A named signed digraph with metric groups and generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub name: String,
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeSpec>,
    /// Metric-group name to member nodes; groups must partition the nodes.
    pub groups: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub generator: GeneratorParams,
}

impl TopologySpec {
    fn invalid(&self, reason: impl Into<String>) -> DataError {
        DataError::InvalidSpec {
            name: self.name.clone(),
            reason: reason.into(),
        }
    }

    fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    /// Resolves names to indices and validates the result as a model graph.
    /// Groups enter the graph in lexicographic order of their names.
    pub fn to_graph(&self) -> Result<FcmGraph> {
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if !seen.insert(node.as_str()) {
                return Err(self.invalid(format!("duplicate node {node:?}")));
            }
        }
        let n = self.nodes.len();
        let mut adjacency = Matrix::zeros(n, n);
        for edge in &self.edges {
            let from = self
                .node_index(&edge.from)
                .ok_or_else(|| self.invalid(format!("edge from unknown node {:?}", edge.from)))?;
            let to = self
                .node_index(&edge.to)
                .ok_or_else(|| self.invalid(format!("edge to unknown node {:?}", edge.to)))?;
            if from == to {
                return Err(self.invalid(format!("self-edge on {:?}", edge.from)));
            }
            if !matches!(edge.sign, -1 | 1) {
                return Err(self.invalid(format!(
                    "edge {:?} -> {:?} has sign {}, expected -1 or 1",
                    edge.from, edge.to, edge.sign
                )));
            }
            if adjacency.get(from, to) != 0.0 {
                return Err(self.invalid(format!(
                    "duplicate edge {:?} -> {:?}",
                    edge.from, edge.to
                )));
            }
            adjacency.set(from, to, f64::from(edge.sign));
        }
        let mut metric_groups = Vec::with_capacity(self.groups.len());
        for (group, members) in &self.groups {
            let mut indices = Vec::with_capacity(members.len());
            for member in members {
                let index = self.node_index(member).ok_or_else(|| {
                    self.invalid(format!("group {group:?} lists unknown node {member:?}"))
                })?;
                indices.push(index);
            }
            metric_groups.push(indices);
        }
        Ok(FcmGraph::new(self.nodes.clone(), adjacency, metric_groups)?)
    }
}

/// Registry names accepted by [`builtin_topology`].
pub const BUILTIN_NAMES: [&str; 8] = [
    "base-urban-9",
    "extended-urban-14",
    "ministry-urban-19",
    "expanded-urban-24",
    "sachs-11",
    "sachs-25",
    "mpg-6",
    "ieee-14",
];

fn spec(
    name: &str,
    nodes: &[&str],
    edges: &[(&str, &str, i8)],
    groups: &[(&str, &[&str])],
) -> TopologySpec {
    TopologySpec {
        name: name.to_string(),
        nodes: nodes.iter().map(|n| n.to_string()).collect(),
        edges: edges
            .iter()
            .map(|(from, to, sign)| EdgeSpec {
                from: from.to_string(),
                to: to.to_string(),
                sign: *sign,
            })
            .collect(),
        groups: groups
            .iter()
            .map(|(g, members)| {
                (
                    g.to_string(),
                    members.iter().map(|m| m.to_string()).collect(),
                )
            })
            .collect(),
        generator: GeneratorParams::default(),
    }
}

fn base_urban_9() -> TopologySpec {
    spec(
        "base-urban-9",
        &[
            "population",
            "housing",
            "jobs",
            "transit",
            "traffic",
            "green-space",
            "air-quality",
            "safety",
            "budget",
        ],
        &[
            ("population", "housing", 1),
            ("population", "traffic", 1),
            ("population", "budget", 1),
            ("housing", "population", 1),
            ("jobs", "population", 1),
            ("jobs", "budget", 1),
            ("transit", "jobs", 1),
            ("transit", "air-quality", 1),
            ("traffic", "transit", 1),
            ("traffic", "air-quality", -1),
            ("budget", "transit", 1),
            ("budget", "green-space", 1),
            ("budget", "safety", 1),
            ("green-space", "air-quality", 1),
            ("safety", "population", 1),
        ],
        &[
            ("civic", &["safety", "budget"]),
            ("environment", &["green-space", "air-quality"]),
            ("growth", &["population", "housing", "jobs"]),
            ("mobility", &["transit", "traffic"]),
        ],
    )
}

fn extended_urban_14() -> TopologySpec {
    let mut t = base_urban_9();
    t.name = "extended-urban-14".to_string();
    for node in ["education", "health", "culture", "tourism", "noise"] {
        t.nodes.push(node.to_string());
    }
    for (from, to, sign) in [
        ("budget", "education", 1),
        ("budget", "health", 1),
        ("education", "jobs", 1),
        ("culture", "tourism", 1),
        ("tourism", "jobs", 1),
        ("tourism", "traffic", 1),
        ("traffic", "noise", 1),
        ("noise", "health", -1),
    ] {
        t.edges.push(EdgeSpec {
            from: from.to_string(),
            to: to.to_string(),
            sign,
        });
    }
    t.groups
        .insert("wellbeing".to_string(), vec!["education".into(), "health".into()]);
    t.groups
        .insert("attraction".to_string(), vec!["culture".into(), "tourism".into()]);
    t.groups.get_mut("environment").unwrap().push("noise".into());
    t
}

fn ministry_urban_19() -> TopologySpec {
    let mut t = extended_urban_14();
    t.name = "ministry-urban-19".to_string();
    for node in ["water-quality", "energy-use", "waste", "land-use", "innovation"] {
        t.nodes.push(node.to_string());
    }
    for (from, to, sign) in [
        ("population", "energy-use", 1),
        ("population", "waste", 1),
        ("energy-use", "air-quality", -1),
        ("waste", "water-quality", -1),
        ("green-space", "water-quality", 1),
        ("land-use", "housing", 1),
        ("land-use", "green-space", -1),
        ("innovation", "jobs", 1),
        ("education", "innovation", 1),
        ("budget", "innovation", 1),
    ] {
        t.edges.push(EdgeSpec {
            from: from.to_string(),
            to: to.to_string(),
            sign,
        });
    }
    t.groups.insert(
        "resources".to_string(),
        vec!["water-quality".into(), "energy-use".into(), "waste".into()],
    );
    let growth = t.groups.get_mut("growth").unwrap();
    growth.push("land-use".into());
    growth.push("innovation".into());
    t
}

fn expanded_urban_24() -> TopologySpec {
    let mut t = ministry_urban_19();
    t.name = "expanded-urban-24".to_string();
    for node in ["inequality", "rent-burden", "sprawl", "emissions", "flood-risk"] {
        t.nodes.push(node.to_string());
    }
    for (from, to, sign) in [
        ("housing", "rent-burden", -1),
        ("rent-burden", "inequality", 1),
        ("inequality", "safety", -1),
        ("jobs", "inequality", -1),
        ("land-use", "sprawl", 1),
        ("sprawl", "traffic", 1),
        ("sprawl", "green-space", -1),
        ("traffic", "emissions", 1),
        ("energy-use", "emissions", 1),
        ("emissions", "air-quality", -1),
        ("emissions", "flood-risk", 1),
        ("flood-risk", "budget", -1),
    ] {
        t.edges.push(EdgeSpec {
            from: from.to_string(),
            to: to.to_string(),
            sign,
        });
    }
    t.groups.insert(
        "equity".to_string(),
        vec!["inequality".into(), "rent-burden".into()],
    );
    t.groups.insert(
        "climate".to_string(),
        vec!["emissions".into(), "flood-risk".into()],
    );
    t.groups.get_mut("growth").unwrap().push("sprawl".into());
    t
}

fn sachs_11() -> TopologySpec {
    spec(
        "sachs-11",
        &[
            "raf", "mek", "erk", "plcg", "pip2", "pip3", "pkc", "pka", "akt", "p38", "jnk",
        ],
        &[
            ("pkc", "raf", 1),
            ("pkc", "mek", 1),
            ("pkc", "jnk", 1),
            ("pkc", "p38", 1),
            ("pkc", "pka", 1),
            ("pka", "raf", -1),
            ("pka", "mek", 1),
            ("pka", "erk", 1),
            ("pka", "akt", 1),
            ("pka", "jnk", 1),
            ("pka", "p38", 1),
            ("raf", "mek", 1),
            ("mek", "erk", 1),
            ("erk", "akt", 1),
            ("plcg", "pip2", 1),
            ("plcg", "pip3", 1),
            ("pip3", "pip2", 1),
            ("pip2", "pkc", 1),
        ],
        &[
            ("kinase", &["pkc", "pka", "akt"]),
            ("lipid", &["plcg", "pip2", "pip3"]),
            ("mapk", &["raf", "mek", "erk"]),
            ("stress", &["p38", "jnk"]),
        ],
    )
}

fn sachs_25() -> TopologySpec {
    let mut t = sachs_11();
    t.name = "sachs-25".to_string();
    for node in [
        "ras", "pi3k", "src", "egf", "igf", "mtor", "gsk3", "rsk", "s6k", "stat3", "nfkb",
        "mk2", "hsp27", "bad",
    ] {
        t.nodes.push(node.to_string());
    }
    for (from, to, sign) in [
        ("egf", "ras", 1),
        ("egf", "src", 1),
        ("egf", "pi3k", 1),
        ("igf", "pi3k", 1),
        ("igf", "ras", 1),
        ("ras", "raf", 1),
        ("pi3k", "pip3", 1),
        ("src", "plcg", 1),
        ("src", "stat3", 1),
        ("pip3", "akt", 1),
        ("akt", "mtor", 1),
        ("akt", "gsk3", -1),
        ("akt", "bad", -1),
        ("akt", "nfkb", 1),
        ("mtor", "s6k", 1),
        ("erk", "rsk", 1),
        ("rsk", "s6k", 1),
        ("rsk", "bad", -1),
        ("p38", "mk2", 1),
        ("mk2", "hsp27", 1),
        ("pkc", "nfkb", 1),
    ] {
        t.edges.push(EdgeSpec {
            from: from.to_string(),
            to: to.to_string(),
            sign,
        });
    }
    let kinase = t.groups.get_mut("kinase").unwrap();
    for node in ["src", "mtor", "gsk3", "s6k"] {
        kinase.push(node.into());
    }
    let mapk = t.groups.get_mut("mapk").unwrap();
    mapk.push("ras".into());
    mapk.push("rsk".into());
    t.groups.get_mut("lipid").unwrap().push("pi3k".into());
    let stress = t.groups.get_mut("stress").unwrap();
    stress.push("mk2".into());
    stress.push("hsp27".into());
    t.groups.insert(
        "signal".to_string(),
        vec![
            "egf".into(),
            "igf".into(),
            "stat3".into(),
            "nfkb".into(),
            "bad".into(),
        ],
    );
    t
}

fn mpg_6() -> TopologySpec {
    spec(
        "mpg-6",
        &[
            "mpg",
            "cylinders",
            "displacement",
            "horsepower",
            "weight",
            "acceleration",
        ],
        &[
            ("cylinders", "displacement", 1),
            ("cylinders", "weight", 1),
            ("displacement", "horsepower", 1),
            ("displacement", "weight", 1),
            ("displacement", "mpg", -1),
            ("horsepower", "mpg", -1),
            ("horsepower", "acceleration", -1),
            ("weight", "mpg", -1),
            ("weight", "acceleration", 1),
        ],
        &[
            ("body", &["weight"]),
            ("engine", &["cylinders", "displacement", "horsepower"]),
            ("outcomes", &["mpg", "acceleration"]),
        ],
    )
}

fn ieee_14() -> TopologySpec {
    let buses: Vec<String> = (1..=14).map(|b| format!("bus-{b}")).collect();
    let nodes: Vec<&str> = buses.iter().map(String::as_str).collect();
    let branches = [
        (1, 2),
        (1, 5),
        (2, 3),
        (2, 4),
        (2, 5),
        (3, 4),
        (4, 5),
        (4, 7),
        (4, 9),
        (5, 6),
        (6, 11),
        (6, 12),
        (6, 13),
        (7, 8),
        (7, 9),
        (9, 10),
        (9, 14),
        (10, 11),
        (12, 13),
        (13, 14),
    ];
    let edges: Vec<(String, String, i8)> = branches
        .iter()
        .map(|(a, b)| (format!("bus-{a}"), format!("bus-{b}"), 1))
        .collect();
    let edge_refs: Vec<(&str, &str, i8)> = edges
        .iter()
        .map(|(a, b, s)| (a.as_str(), b.as_str(), *s))
        .collect();
    spec(
        "ieee-14",
        &nodes,
        &edge_refs,
        &[
            ("generation", &["bus-1", "bus-2", "bus-3", "bus-6", "bus-8"]),
            ("transmission", &["bus-4", "bus-5", "bus-7", "bus-9"]),
            (
                "distribution",
                &["bus-10", "bus-11", "bus-12", "bus-13", "bus-14"],
            ),
        ],
    )
}

/// Looks up one of the shipped topologies by name.
pub fn builtin_topology(name: &str) -> Result<TopologySpec> {
    match name {
        "base-urban-9" => Ok(base_urban_9()),
        "extended-urban-14" => Ok(extended_urban_14()),
        "ministry-urban-19" => Ok(ministry_urban_19()),
        "expanded-urban-24" => Ok(expanded_urban_24()),
        "sachs-11" => Ok(sachs_11()),
        "sachs-25" => Ok(sachs_25()),
        "mpg-6" => Ok(mpg_6()),
        "ieee-14" => Ok(ieee_14()),
        other => Err(DataError::UnknownTopology {
            name: other.to_string(),
            known: BUILTIN_NAMES.join(", "),
        }),
    }
}

/// Steady states produced by the classical simulator, before noise.
#[derive(Debug, Clone)]
pub struct GeneratedStates {
    /// The signed weights actually simulated: spec signs times random
    /// magnitudes in [0.3, 0.9].
    pub weights: Matrix,
    /// One settled state per row.
    pub states: Matrix,
    /// How many of the starts converged within the iteration budget.
    pub converged: usize,
}

/// Draws edge magnitudes once, then runs the simulator to a fixed point from
/// `samples` random starts. Errors when more than half the starts fail to
/// settle.
pub fn generate_states(spec: &TopologySpec, rng: &mut ChaCha8Rng) -> Result<GeneratedStates> {
    generate_states_with(spec, rng, crate::fcm::DEFAULT_MAX_ITERS)
}

fn generate_states_with(
    spec: &TopologySpec,
    rng: &mut ChaCha8Rng,
    max_iters: usize,
) -> Result<GeneratedStates> {
    let graph = spec.to_graph()?;
    let n = graph.node_count();
    let adjacency = graph.adjacency();
    let weights = Matrix::from_fn(n, n, |r, c| {
        let sign = adjacency.get(r, c);
        if sign == 0.0 {
            0.0
        } else {
            sign * rng.gen_range(0.3..0.9)
        }
    });
    let fcm =
        ClassicFcm::new(weights.clone(), FcmActivation::Sigmoid)?.with_max_iters(max_iters);
    let samples = spec.generator.samples;
    let mut states = Vec::with_capacity(samples);
    let mut converged = 0;
    for _ in 0..samples {
        let start: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = fcm.run_to_fixed_point(&start)?;
        if run.converged {
            converged += 1;
        }
        states.push(run.state);
    }
    let failed = samples - converged;
    if failed * 2 > samples {
        return Err(DataError::NonConvergent {
            name: spec.name.clone(),
            failed,
            total: samples,
        });
    }
    let states = Matrix::from_fn(samples, n, |r, c| states[r][c]);
    Ok(GeneratedStates {
        weights,
        states,
        converged,
    })
}

/// Full synthetic pipeline: steady states plus clipped Gaussian observation
/// noise, packaged against the topology's graph. Deterministic in the
/// generator seed.
pub fn generate_synthetic(spec: &TopologySpec) -> Result<MetricDataset> {
    if !spec.generator.noise_level.is_finite() || spec.generator.noise_level < 0.0 {
        return Err(spec.invalid(format!(
            "noise level {} is not a finite non-negative number",
            spec.generator.noise_level
        )));
    }
    if spec.generator.samples == 0 {
        return Err(spec.invalid("sample count is zero"));
    }
    let graph = spec.to_graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.generator.seed);
    let generated = generate_states(spec, &mut rng)?;
    let states = generated.states;
    let values = if spec.generator.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.generator.noise_level)
            .expect("noise level validated finite and positive");
        Matrix::from_fn(states.rows(), states.cols(), |r, c| {
            (states.get(r, c) + normal.sample(&mut rng)).clamp(0.0, 1.0)
        })
    } else {
        states
    };
    Ok(MetricDataset::new(values, &graph)?)
}

/// A dataset read from disk plus how many rows were rejected.
#[derive(Debug)]
pub struct CsvLoad {
    pub dataset: MetricDataset,
    pub rows_dropped: usize,
}

/// Reads observations by node name from a headed CSV. Rows with missing or
/// unparseable cells are dropped and counted; every surviving column is
/// min-max normalized so its observed minimum is 0 and maximum is 1, with
/// constant columns collapsing to all zeros.
pub fn load_csv(path: &Path, graph: &FcmGraph) -> Result<CsvLoad> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut columns = Vec::with_capacity(graph.node_count());
    for name in graph.node_names() {
        let index = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                column: name.clone(),
                path: shown.clone(),
            })?;
        columns.push(index);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(columns.len());
        for &column in &columns {
            match record
                .get(column)
                .and_then(|cell| cell.parse::<f64>().ok())
                .filter(|v| v.is_finite())
            {
                Some(v) => row.push(v),
                None => break,
            }
        }
        if row.len() == columns.len() {
            rows.push(row);
        } else {
            dropped += 1;
        }
    }
    if rows.is_empty() {
        return Err(DataError::EmptyData {
            path: shown,
            dropped,
        });
    }
    for c in 0..columns.len() {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for row in &mut rows {
            row[c] = if range == 0.0 { 0.0 } else { (row[c] - lo) / range };
        }
    }
    let values = Matrix::from_fn(rows.len(), columns.len(), |r, c| rows[r][c]);
    Ok(CsvLoad {
        dataset: MetricDataset::new(values, graph)?,
        rows_dropped: dropped,
    })
}

/// Writes a dataset back out as CSV with node names as the header, in the
/// graph's node order. Values round-trip exactly through [`load_csv`].
pub fn write_dataset_csv(dataset: &MetricDataset, graph: &FcmGraph, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(graph.node_names())?;
    for r in 0..dataset.rows() {
        let row: Vec<String> = (0..graph.node_count())
            .map(|node| dataset.values().get(r, dataset.node_column(node)).to_string())
            .collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn toy_spec() -> TopologySpec {
        spec(
            "toy",
            &["a", "b", "c"],
            &[("a", "b", 1), ("b", "c", -1)],
            &[("first", &["a"]), ("rest", &["b", "c"])],
        )
    }

    #[test]
    fn registry_covers_the_advertised_names_and_sizes() {
        let expected = [
            ("base-urban-9", 9),
            ("extended-urban-14", 14),
            ("ministry-urban-19", 19),
            ("expanded-urban-24", 24),
            ("sachs-11", 11),
            ("sachs-25", 25),
            ("mpg-6", 6),
            ("ieee-14", 14),
        ];
        for (name, nodes) in expected {
            let spec = builtin_topology(name).unwrap();
            assert_eq!(spec.name, name);
            assert_eq!(spec.nodes.len(), nodes, "{name}");
            spec.to_graph().unwrap();
        }
    }

    #[test]
    fn unknown_topology_error_lists_the_registry() {
        let err = builtin_topology("urban-base-9").unwrap_err();
        let message = err.to_string();
        assert!(message.contains("urban-base-9"));
        for name in BUILTIN_NAMES {
            assert!(message.contains(name), "missing {name}");
        }
    }

    #[test]
    fn builtins_are_connected_ignoring_direction() {
        for name in BUILTIN_NAMES {
            let graph = builtin_topology(name).unwrap().to_graph().unwrap();
            let n = graph.node_count();
            let a = graph.adjacency();
            let mut reached = vec![false; n];
            let mut stack = vec![0];
            reached[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if !reached[j] && (a.get(i, j) != 0.0 || a.get(j, i) != 0.0) {
                        reached[j] = true;
                        stack.push(j);
                    }
                }
            }
            assert!(reached.iter().all(|r| *r), "{name} is disconnected");
        }
    }

    #[test]
    fn builtins_keep_a_moderate_edge_density() {
        for name in BUILTIN_NAMES {
            let graph = builtin_topology(name).unwrap().to_graph().unwrap();
            let density = graph.edge_count() as f64 / graph.node_count() as f64;
            assert!(
                (1.0..=2.5).contains(&density),
                "{name} has density {density}"
            );
        }
    }

    #[test]
    fn duplicate_and_dangling_edges_are_rejected() {
        let mut dup = toy_spec();
        dup.edges.push(EdgeSpec {
            from: "a".into(),
            to: "b".into(),
            sign: -1,
        });
        assert!(matches!(
            dup.to_graph(),
            Err(DataError::InvalidSpec { .. })
        ));

        let mut dangling = toy_spec();
        dangling.edges.push(EdgeSpec {
            from: "a".into(),
            to: "ghost".into(),
            sign: 1,
        });
        let err = dangling.to_graph().unwrap_err();
        assert!(err.to_string().contains("ghost"));

        let mut self_edge = toy_spec();
        self_edge.edges.push(EdgeSpec {
            from: "c".into(),
            to: "c".into(),
            sign: 1,
        });
        assert!(matches!(
            self_edge.to_graph(),
            Err(DataError::InvalidSpec { .. })
        ));

        let mut zero_sign = toy_spec();
        zero_sign.edges[0].sign = 0;
        assert!(matches!(
            zero_sign.to_graph(),
            Err(DataError::InvalidSpec { .. })
        ));
    }

    #[test]
    fn spec_json_round_trips() {
        let spec = builtin_topology("mpg-6").unwrap();
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: TopologySpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn generated_magnitudes_respect_the_signs_and_range() {
        let spec = builtin_topology("mpg-6").unwrap();
        let graph = spec.to_graph().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let generated = generate_states(&spec, &mut rng).unwrap();
        for r in 0..graph.node_count() {
            for c in 0..graph.node_count() {
                let sign = graph.adjacency().get(r, c);
                let w = generated.weights.get(r, c);
                if sign == 0.0 {
                    assert_eq!(w, 0.0);
                } else {
                    assert_eq!(w.signum(), sign);
                    assert!((0.3..0.9).contains(&w.abs()));
                }
            }
        }
    }

    #[test]
    fn steady_states_satisfy_the_simulator_fixed_point() {
        let spec = builtin_topology("base-urban-9").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let generated = generate_states(&spec, &mut rng).unwrap();
        let fcm = ClassicFcm::new(generated.weights.clone(), FcmActivation::Sigmoid).unwrap();
        for r in 0..generated.states.rows() {
            let state: Vec<f64> = (0..generated.states.cols())
                .map(|c| generated.states.get(r, c))
                .collect();
            let next = fcm.step(&state).unwrap();
            let residual = state
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(residual < 1e-5, "row {r} residual {residual}");
        }
    }

    #[test]
    fn zero_weight_map_gives_identical_rows_without_noise() {
        let mut flat = spec("flat", &["a", "b"], &[], &[("all", &["a", "b"])]);
        flat.generator = GeneratorParams {
            noise_level: 0.0,
            samples: 4,
            seed: 9,
        };
        let dataset = generate_synthetic(&flat).unwrap();
        for r in 0..dataset.rows() {
            for c in 0..2 {
                assert_eq!(dataset.values().get(r, c), 0.5);
            }
        }
    }

    #[test]
    fn all_generated_values_stay_in_the_unit_interval() {
        let mut spec = builtin_topology("expanded-urban-24").unwrap();
        spec.generator.noise_level = 0.3;
        spec.generator.samples = 20;
        let dataset = generate_synthetic(&spec).unwrap();
        for r in 0..dataset.rows() {
            for c in 0..24 {
                let v = dataset.values().get(r, c);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let spec = builtin_topology("sachs-11").unwrap();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.values(), b.values());

        let mut other = spec.clone();
        other.generator.seed = 1;
        let c = generate_synthetic(&other).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn starved_iteration_budget_reports_a_generation_error() {
        let mut cycle = spec(
            "cycle",
            &["a", "b"],
            &[("a", "b", -1), ("b", "a", -1)],
            &[("all", &["a", "b"])],
        );
        cycle.generator.samples = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = generate_states_with(&cycle, &mut rng, 1).unwrap_err();
        let message = err.to_string();
        assert!(matches!(err, DataError::NonConvergent { total: 8, .. }));
        assert!(message.contains("cycle"), "{message}");
    }

    #[test]
    fn min_max_maps_extremes_to_the_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        let mut file = std::fs::File::create(&path).unwrap();
        writeln!(file, "a,b").unwrap();
        writeln!(file, "0,5").unwrap();
        writeln!(file, "10,5").unwrap();
        drop(file);
        let graph = spec("pair", &["a", "b"], &[("a", "b", 1)], &[("all", &["a", "b"])])
            .to_graph()
            .unwrap();
        let load = load_csv(&path, &graph).unwrap();
        assert_eq!(load.rows_dropped, 0);
        assert_eq!(load.dataset.values().get(0, 0), 0.0);
        assert_eq!(load.dataset.values().get(1, 0), 1.0);
        assert_eq!(load.dataset.values().get(0, 1), 0.0);
        assert_eq!(load.dataset.values().get(1, 1), 0.0);
    }

    #[test]
    fn bad_rows_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("holes.csv");
        let mut file = std::fs::File::create(&path).unwrap();
        writeln!(file, "a,b,extra").unwrap();
        writeln!(file, "1,2,x").unwrap();
        writeln!(file, "?,3,y").unwrap();
        writeln!(file, "4,,z").unwrap();
        writeln!(file, "2,8,w").unwrap();
        drop(file);
        let graph = spec("pair", &["a", "b"], &[("a", "b", 1)], &[("all", &["a", "b"])])
            .to_graph()
            .unwrap();
        let load = load_csv(&path, &graph).unwrap();
        assert_eq!(load.rows_dropped, 2);
        assert_eq!(load.dataset.rows(), 2);
    }

    #[test]
    fn missing_column_and_empty_file_are_clean_errors() {
        let dir = tempfile::tempdir().unwrap();
        let graph = spec("pair", &["a", "b"], &[("a", "b", 1)], &[("all", &["a", "b"])])
            .to_graph()
            .unwrap();

        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "a,c\n1,2\n").unwrap();
        let err = load_csv(&missing, &graph).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn { ref column, .. } if column == "b"));

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "a,b\n?,1\n").unwrap();
        let err = load_csv(&empty, &graph).unwrap_err();
        assert!(matches!(err, DataError::EmptyData { dropped: 1, .. }));
    }

    #[test]
    fn normalized_csv_round_trip_is_idempotent() {
        let spec = builtin_topology("mpg-6").unwrap();
        let graph = spec.to_graph().unwrap();
        let dataset = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let first = dir.path().join("first.csv");
        write_dataset_csv(&dataset, &graph, &first).unwrap();
        let once = load_csv(&first, &graph).unwrap().dataset;

        let second = dir.path().join("second.csv");
        write_dataset_csv(&once, &graph, &second).unwrap();
        let twice = load_csv(&second, &graph).unwrap().dataset;

        assert_eq!(once.values(), twice.values());
    }
}
