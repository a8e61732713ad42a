//! Causal evaluation: sign-recovery accuracy of a learned inner map against
//! a ground-truth topology, aggregation across folds, and report rendering.
//!
//! Both accuracies compare signs only, so they are invariant under positive
//! rescaling of the learned weights. Direct edge accuracy scores each true
//! edge on its own; transitive chain accuracy scores every ordered two-hop
//! chain by the sign of the product along it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{sign, Matrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: learned weights are {w_rows}x{w_cols}, truth is {a_rows}x{a_cols}")]
    ShapeMismatch {
        w_rows: usize,
        w_cols: usize,
        a_rows: usize,
        a_cols: usize,
    },
    #[error("direct edge accuracy is undefined: the topology has no edges")]
    NoEdges,
    #[error("transitive chain accuracy is undefined: the topology has no two-hop chains")]
    NoChains,
    #[error("cannot aggregate an empty fold list")]
    NoFolds,
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Accuracy of one fold. `transitive` is `None` when the topology has no
/// two-hop chains, which renders as N/A rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAccuracy {
    pub fold: usize,
    pub direct: f64,
    pub transitive: Option<f64>,
}

/// Mean and population standard deviation per metric, plus the flagged fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub direct_mean: f64,
    pub direct_std: f64,
    pub transitive_mean: Option<f64>,
    pub transitive_std: Option<f64>,
    /// Index into the fold list of the highest direct accuracy (first on
    /// ties).
    pub best_fold: usize,
}

/// Evaluation summary for one experiment.
///
/// `runtime_seconds` is omitted from the serialized form when absent so that
/// repeated runs with the same seed produce byte-identical reports; wall time
/// goes to a separate sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReport", into = "RawReport")]
pub struct EvalReport {
    pub experiment: String,
    pub nodes: usize,
    pub per_fold: Vec<FoldAccuracy>,
    pub aggregate: Aggregate,
    pub runtime_seconds: Option<f64>,
    pub config: serde_json::Value,
    pub note: String,
}

#[derive(Serialize, Deserialize)]
struct RawReport {
    experiment: String,
    nodes: usize,
    per_fold: Vec<FoldAccuracy>,
    aggregate: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    runtime_seconds: Option<f64>,
    config: serde_json::Value,
    note: String,
}

impl From<EvalReport> for RawReport {
    fn from(r: EvalReport) -> Self {
        RawReport {
            experiment: r.experiment,
            nodes: r.nodes,
            per_fold: r.per_fold,
            aggregate: r.aggregate,
            runtime_seconds: r.runtime_seconds,
            config: r.config,
            note: r.note,
        }
    }
}

impl TryFrom<RawReport> for EvalReport {
    type Error = String;

    fn try_from(raw: RawReport) -> std::result::Result<Self, String> {
        let recomputed = aggregate(&raw.per_fold).map_err(|e| e.to_string())?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let opt_close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !close(recomputed.direct_mean, raw.aggregate.direct_mean)
            || !close(recomputed.direct_std, raw.aggregate.direct_std)
            || !opt_close(recomputed.transitive_mean, raw.aggregate.transitive_mean)
            || !opt_close(recomputed.transitive_std, raw.aggregate.transitive_std)
            || recomputed.best_fold != raw.aggregate.best_fold
        {
            return Err("aggregate does not match the per-fold values".into());
        }
        for fa in &raw.per_fold {
            if !(0.0..=1.0).contains(&fa.direct) {
                return Err(format!("fold {} direct accuracy {} out of [0,1]", fa.fold, fa.direct));
            }
            if let Some(t) = fa.transitive {
                if !(0.0..=1.0).contains(&t) {
                    return Err(format!("fold {} transitive accuracy {t} out of [0,1]", fa.fold));
                }
            }
        }
        Ok(EvalReport {
            experiment: raw.experiment,
            nodes: raw.nodes,
            per_fold: raw.per_fold,
            aggregate: raw.aggregate,
            runtime_seconds: raw.runtime_seconds,
            config: raw.config,
            note: raw.note,
        })
    }
}

/// Caveat attached to every rendered report.
pub const METRIC_NOTE: &str = "Accuracies are sign-recovery rates over true edges and two-hop \
chains; magnitude-threshold definitions would score differently.";

impl EvalReport {
    pub fn new(
        experiment: impl Into<String>,
        nodes: usize,
        per_fold: Vec<FoldAccuracy>,
        config: serde_json::Value,
    ) -> Result<Self> {
        let agg = aggregate(&per_fold)?;
        Ok(EvalReport {
            experiment: experiment.into(),
            nodes,
            per_fold,
            aggregate: agg,
            runtime_seconds: None,
            config,
            note: METRIC_NOTE.to_string(),
        })
    }
}

fn check_shapes(w_learned: &Matrix, a_truth: &Matrix) -> Result<()> {
    if w_learned.shape() != a_truth.shape() || a_truth.rows() != a_truth.cols() {
        return Err(EvalError::ShapeMismatch {
            w_rows: w_learned.rows(),
            w_cols: w_learned.cols(),
            a_rows: a_truth.rows(),
            a_cols: a_truth.cols(),
        });
    }
    Ok(())
}

/// Fraction of true edges whose learned sign matches. A learned weight of
/// exactly zero on a true edge counts as wrong.
pub fn direct_edge_accuracy(w_learned: &Matrix, a_truth: &Matrix) -> Result<f64> {
    check_shapes(w_learned, a_truth)?;
    let n = a_truth.rows();
    let mut edges = 0usize;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            let truth = a_truth.get(i, j);
            if truth == 0.0 {
                continue;
            }
            edges += 1;
            if sign(w_learned.get(i, j)) == sign(truth) {
                hits += 1;
            }
        }
    }
    if edges == 0 {
        return Err(EvalError::NoEdges);
    }
    Ok(hits as f64 / edges as f64)
}

/// Fraction of ordered two-hop chains `i -> j -> k` whose learned sign
/// product matches the true sign product.
pub fn transitive_chain_accuracy(w_learned: &Matrix, a_truth: &Matrix) -> Result<f64> {
    check_shapes(w_learned, a_truth)?;
    let n = a_truth.rows();
    let mut chains = 0usize;
    let mut hits = 0usize;
    for i in 0..n {
        for j in 0..n {
            if a_truth.get(i, j) == 0.0 {
                continue;
            }
            for k in 0..n {
                if a_truth.get(j, k) == 0.0 {
                    continue;
                }
                chains += 1;
                let truth = a_truth.get(i, j) * a_truth.get(j, k);
                let learned = w_learned.get(i, j) * w_learned.get(j, k);
                if sign(learned) == sign(truth) {
                    hits += 1;
                }
            }
        }
    }
    if chains == 0 {
        return Err(EvalError::NoChains);
    }
    Ok(hits as f64 / chains as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std of an empty slice");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reduces per-fold accuracies to means, population stds, and the best fold.
pub fn aggregate(per_fold: &[FoldAccuracy]) -> Result<Aggregate> {
    if per_fold.is_empty() {
        return Err(EvalError::NoFolds);
    }
    let direct: Vec<f64> = per_fold.iter().map(|f| f.direct).collect();
    let (direct_mean, direct_std) = mean_std(&direct);
    let transitive: Vec<f64> = per_fold.iter().filter_map(|f| f.transitive).collect();
    if !transitive.is_empty() && transitive.len() != per_fold.len() {
        return Err(EvalError::InvalidReport(
            "transitive accuracy is defined for some folds but not others".into(),
        ));
    }
    let (transitive_mean, transitive_std) = if transitive.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&transitive);
        (Some(m), Some(s))
    };
    let mut best_fold = 0usize;
    for (idx, f) in per_fold.iter().enumerate() {
        if f.direct > per_fold[best_fold].direct {
            best_fold = idx;
        }
    }
    Ok(Aggregate {
        direct_mean,
        direct_std,
        transitive_mean,
        transitive_std,
        best_fold,
    })
}

fn percent_pair(mean: f64, std: f64) -> String {
    format!("{:.2}% \u{00b1} {:.2}%", mean * 100.0, std * 100.0)
}

/// Renders reports as an aligned plain-text table with a trailing caveat.
pub fn render_table(reports: &[&EvalReport]) -> String {
    let headers = ["Experiment", "Nodes", "Direct Edge Acc.", "Transitive Chain Acc."];
    let mut rows: Vec<[String; 4]> = Vec::with_capacity(reports.len());
    for r in reports {
        let direct = percent_pair(r.aggregate.direct_mean, r.aggregate.direct_std);
        let transitive = match (r.aggregate.transitive_mean, r.aggregate.transitive_std) {
            (Some(m), Some(s)) => percent_pair(m, s),
            _ => "N/A".to_string(),
        };
        rows.push([r.experiment.clone(), r.nodes.to_string(), direct, transitive]);
    }
    let mut widths = [0usize; 4];
    for (c, h) in headers.iter().enumerate() {
        widths[c] = h.chars().count();
    }
    for row in &rows {
        for (c, cell) in row.iter().enumerate() {
            widths[c] = widths[c].max(cell.chars().count());
        }
    }
    let render_row = |cells: &[String; 4]| {
        let mut line = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            for _ in cell.chars().count()..widths[c] {
                line.push(' ');
            }
        }
        line.trim_end().to_string()
    };
    let mut out = String::new();
    let header_cells: [String; 4] = headers.map(|h| h.to_string());
    out.push_str(&render_row(&header_cells));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in &rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out.push('\n');
    out.push_str("Note: ");
    out.push_str(METRIC_NOTE);
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(n: usize, data: &[f64]) -> Matrix {
        Matrix::from_vec(n, n, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_inverted_weights_bracket_direct_accuracy() {
        let a = mat(3, &[0.0, 1.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(direct_edge_accuracy(&a, &a).unwrap(), 1.0);
        let flipped = a.scale(-1.0).unwrap();
        assert_eq!(direct_edge_accuracy(&flipped, &a).unwrap(), 0.0);
    }

    #[test]
    fn zero_learned_weight_on_a_true_edge_counts_as_wrong() {
        let a = mat(2, &[0.0, 1.0, 0.0, 0.0]);
        let w = mat(2, &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(direct_edge_accuracy(&w, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_edge_set_is_an_error_not_a_score() {
        let a = Matrix::zeros(3, 3);
        assert!(matches!(direct_edge_accuracy(&a, &a), Err(EvalError::NoEdges)));
        assert!(matches!(
            transitive_chain_accuracy(&a, &a),
            Err(EvalError::NoChains)
        ));
    }

    #[test]
    fn direct_accuracy_matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 5;
            let a = Matrix::from_fn(n, n, |r, c| {
                if r == c {
                    0.0
                } else {
                    [-1.0, 0.0, 1.0][rng.gen_range(0..3)]
                }
            });
            let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut edges = 0;
            let mut hits = 0;
            for r in 0..n {
                for c in 0..n {
                    if a.get(r, c) != 0.0 {
                        edges += 1;
                        let same = (a.get(r, c) > 0.0) == (w.get(r, c) > 0.0) && w.get(r, c) != 0.0;
                        if same {
                            hits += 1;
                        }
                    }
                }
            }
            match direct_edge_accuracy(&w, &a) {
                Ok(acc) => assert_eq!(acc, hits as f64 / edges as f64),
                Err(EvalError::NoEdges) => assert_eq!(edges, 0),
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn single_chain_breaks_when_one_edge_flips() {
        // 0 -> 1 -> 2, learned sign of 1 -> 2 flipped.
        let a = mat(3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let w = mat(3, &[0.0, 0.8, 0.0, 0.0, 0.0, -0.5, 0.0, 0.0, 0.0]);
        assert_eq!(transitive_chain_accuracy(&w, &a).unwrap(), 0.0);
        assert_eq!(transitive_chain_accuracy(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn chain_accuracy_matches_brute_force_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 6;
            let a = Matrix::from_fn(n, n, |r, c| {
                if r == c {
                    0.0
                } else {
                    [-1.0, 0.0, 0.0, 1.0][rng.gen_range(0..4)]
                }
            });
            let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut chains = 0;
            let mut hits = 0;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        if a.get(i, j) != 0.0 && a.get(j, k) != 0.0 {
                            chains += 1;
                            let t = a.get(i, j) * a.get(j, k);
                            let l = w.get(i, j) * w.get(j, k);
                            if (t > 0.0) == (l > 0.0) && l != 0.0 {
                                hits += 1;
                            }
                        }
                    }
                }
            }
            match transitive_chain_accuracy(&w, &a) {
                Ok(acc) => assert_eq!(acc, hits as f64 / chains as f64),
                Err(EvalError::NoChains) => assert_eq!(chains, 0),
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn aggregate_reduces_two_folds() {
        let folds = vec![
            FoldAccuracy {
                fold: 0,
                direct: 1.0,
                transitive: Some(1.0),
            },
            FoldAccuracy {
                fold: 1,
                direct: 0.0,
                transitive: Some(0.5),
            },
        ];
        let agg = aggregate(&folds).unwrap();
        assert_eq!(agg.direct_mean, 0.5);
        assert_eq!(agg.direct_std, 0.5);
        assert_eq!(agg.transitive_mean, Some(0.75));
        assert_eq!(agg.transitive_std, Some(0.25));
        assert_eq!(agg.best_fold, 0);
    }

    #[test]
    fn aggregate_of_one_fold_has_zero_std() {
        let folds = vec![FoldAccuracy {
            fold: 0,
            direct: 0.8,
            transitive: None,
        }];
        let agg = aggregate(&folds).unwrap();
        assert_eq!(agg.direct_std, 0.0);
        assert_eq!(agg.transitive_mean, None);
        assert_eq!(agg.best_fold, 0);
    }

    #[test]
    fn best_fold_prefers_the_first_tie() {
        let folds = vec![
            FoldAccuracy {
                fold: 0,
                direct: 0.9,
                transitive: None,
            },
            FoldAccuracy {
                fold: 1,
                direct: 0.9,
                transitive: None,
            },
        ];
        assert_eq!(aggregate(&folds).unwrap().best_fold, 0);
    }

    #[test]
    fn report_round_trips_and_rejects_tampered_aggregates() {
        let folds = vec![
            FoldAccuracy {
                fold: 0,
                direct: 1.0,
                transitive: Some(0.5),
            },
            FoldAccuracy {
                fold: 1,
                direct: 0.5,
                transitive: Some(1.0),
            },
        ];
        let report = EvalReport::new("toy", 3, folds, serde_json::json!({"seed": 1})).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(!json.contains("runtime_seconds"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let mut tampered: serde_json::Value = serde_json::from_str(&json).unwrap();
        tampered["aggregate"]["direct_mean"] = serde_json::json!(0.99);
        let err = serde_json::from_value::<EvalReport>(tampered).unwrap_err();
        assert!(err.to_string().contains("aggregate"));
    }

    #[test]
    fn table_lists_experiments_with_percent_columns() {
        let folds = vec![
            FoldAccuracy {
                fold: 0,
                direct: 1.0,
                transitive: Some(1.0),
            },
            FoldAccuracy {
                fold: 1,
                direct: 0.9,
                transitive: Some(0.5),
            },
        ];
        let r1 = EvalReport::new("urban-9", 9, folds.clone(), serde_json::Value::Null).unwrap();
        let mut r2 = EvalReport::new("no-chains", 2, folds, serde_json::Value::Null).unwrap();
        r2.aggregate.transitive_mean = None;
        r2.aggregate.transitive_std = None;
        for f in &mut r2.per_fold {
            f.transitive = None;
        }
        let table = render_table(&[&r1, &r2]);
        assert!(table.contains("Experiment"));
        assert!(table.contains("Direct Edge Acc."));
        assert!(table.contains("Transitive Chain Acc."));
        assert!(table.contains("urban-9"));
        assert!(table.contains("95.00% \u{00b1} 5.00%"));
        assert!(table.contains("75.00% \u{00b1} 25.00%"));
        assert!(table.contains("N/A"));
        assert!(table.contains("Note: "));
    }

    proptest! {
        #[test]
        fn accuracies_ignore_positive_rescaling(scale in 0.01f64..100.0, seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let a = Matrix::from_fn(n, n, |r, c| {
                if r == c { 0.0 } else { [-1.0, 0.0, 1.0][rng.gen_range(0..3)] }
            });
            let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let scaled = w.scale(scale).unwrap();
            match (direct_edge_accuracy(&w, &a), direct_edge_accuracy(&scaled, &a)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(EvalError::NoEdges), Err(EvalError::NoEdges)) => {}
                other => prop_assert!(false, "inconsistent results: {:?}", other),
            }
            match (transitive_chain_accuracy(&w, &a), transitive_chain_accuracy(&scaled, &a)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(EvalError::NoChains), Err(EvalError::NoChains)) => {}
                other => prop_assert!(false, "inconsistent results: {:?}", other),
            }
        }

        #[test]
        fn accuracies_ignore_consistent_node_relabeling(seed in 0u64..500) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let a = Matrix::from_fn(n, n, |r, c| {
                if r == c { 0.0 } else { [-1.0, 0.0, 1.0][rng.gen_range(0..3)] }
            });
            let w = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pa = Matrix::from_fn(n, n, |r, c| a.get(perm[r], perm[c]));
            let pw = Matrix::from_fn(n, n, |r, c| w.get(perm[r], perm[c]));
            match (direct_edge_accuracy(&w, &a), direct_edge_accuracy(&pw, &pa)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-15),
                (Err(EvalError::NoEdges), Err(EvalError::NoEdges)) => {}
                other => prop_assert!(false, "inconsistent results: {:?}", other),
            }
            match (transitive_chain_accuracy(&w, &a), transitive_chain_accuracy(&pw, &pa)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-15),
                (Err(EvalError::NoChains), Err(EvalError::NoChains)) => {}
                other => prop_assert!(false, "inconsistent results: {:?}", other),
            }
        }

        #[test]
        fn self_agreement_is_always_perfect(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..7);
            let a = Matrix::from_fn(n, n, |r, c| {
                if r == c { 0.0 } else { [-1.0, 0.0, 1.0][rng.gen_range(0..3)] }
            });
            match direct_edge_accuracy(&a, &a) {
                Ok(acc) => prop_assert_eq!(acc, 1.0),
                Err(EvalError::NoEdges) => {}
                Err(e) => prop_assert!(false, "unexpected error: {e}"),
            }
        }
    }
}
