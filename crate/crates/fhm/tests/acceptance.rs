//! Acceptance gate: one test per release criterion, each printing a single
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines on success.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use fhm::data::{
    builtin_topology, generate_synthetic, load_csv, EdgeSpec, GeneratorParams, TopologySpec,
};
use fhm::fcm::{ClassicFcm, FcmActivation};
use fhm::inverse::{InverseProblem, NoiseSource, DEFAULT_NOISE_STD};
use fhm::model::{self, FcmGraph, FhmParams, ModelConfig, PropagationState};
use fhm::tensor::{Matrix, Tape};
use fhm::training::{self, cross_validate, tune_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> FcmGraph {
    loop {
        let adjacency = Matrix::from_fn(n, n, |r, c| {
            if r == c || rng.gen_bool(0.6) {
                0.0
            } else if rng.gen_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        });
        if adjacency.data().iter().any(|v| *v != 0.0) {
            let names = (0..n).map(|i| format!("n{i}")).collect();
            let split = n / 2;
            let groups = vec![(0..split).collect(), (split..n).collect()];
            return FcmGraph::new(names, adjacency, groups).unwrap();
        }
    }
}

#[test]
fn criterion_01_gradient_integrity() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let graph = random_graph(&mut rng, 5);
    let config = ModelConfig::default();
    let params = FhmParams::init(&graph, &config, &mut rng);
    let x0 = Matrix::from_fn(5, model::NODE_FEATURES, |_, _| rng.gen_range(0.0..1.0));
    let targets: Vec<f64> = graph
        .metric_groups()
        .iter()
        .map(|_| rng.gen_range(0.2..0.8))
        .collect();
    let beta = 0.1;
    let t_max = 3;
    let s_matrix = params.w_fcm.clone();

    let mut tape = Tape::new();
    let fg = model::build_forward(&mut tape, &x0, &graph, &params, t_max, &s_matrix).unwrap();
    let loss = training::build_total_loss(&mut tape, &fg, &graph, &targets, beta).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = training::collect_grads(&grads, &fg, &params);

    let loss_at = |p: &FhmParams| -> f64 {
        let out = model::forward_full(&x0, &graph, p, t_max, &s_matrix).unwrap();
        let fusion = model::fusion_penalty(&p.w_fcm, &out.h_curr, &graph).unwrap();
        tune_loss(&out.head_outputs, &targets) + beta * fusion
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    {
        let mut check = |get: &dyn Fn(&FhmParams) -> Matrix,
                         set: &dyn Fn(&mut FhmParams, Matrix),
                         grad: &Matrix| {
            let base = get(&params);
            for r in 0..base.rows() {
                for c in 0..base.cols() {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    let mut up = base.clone();
                    up.set(r, c, base.get(r, c) + h);
                    set(&mut plus, up);
                    let mut down = base.clone();
                    down.set(r, c, base.get(r, c) - h);
                    set(&mut minus, down);
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let a = grad.get(r, c);
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
        };
        check(&|p| p.w1.clone(), &|p, m| p.w1 = m, &analytic.w1);
        check(&|p| p.b1.clone(), &|p, m| p.b1 = m, &analytic.b1);
        check(&|p| p.w2.clone(), &|p, m| p.w2 = m, &analytic.w2);
        check(&|p| p.b2.clone(), &|p, m| p.b2 = m, &analytic.b2);
        for head in 0..params.heads.len() {
            check(
                &|p| p.heads[head].w1.clone(),
                &|p, m| p.heads[head].w1 = m,
                &analytic.heads[head].w1,
            );
            check(
                &|p| p.heads[head].b1.clone(),
                &|p, m| p.heads[head].b1 = m,
                &analytic.heads[head].b1,
            );
            check(
                &|p| p.heads[head].w2.clone(),
                &|p, m| p.heads[head].w2 = m,
                &analytic.heads[head].w2,
            );
            check(
                &|p| p.heads[head].b2.clone(),
                &|p, m| p.heads[head].b2 = m,
                &analytic.heads[head].b2,
            );
        }
        check(&|p| p.w_fcm.clone(), &|p, m| p.w_fcm = m, &analytic.w_fcm);
    }

    let elapsed = started.elapsed().as_secs_f64();
    let ok = worst < 1e-3 && elapsed < 30.0;
    println!(
        "criterion 1: {} (gradient integrity: max rel err {worst:.2e}, {elapsed:.1}s)",
        verdict(ok)
    );
    assert!(
        ok,
        "full-pipeline gradients: max rel err {worst}, elapsed {elapsed}s"
    );
}

fn seed_sweep_accuracies(topology: &str, seeds: u64) -> (f64, f64) {
    let mut direct_sum = 0.0;
    let mut transitive_sum = 0.0;
    for seed in 0..seeds {
        let mut spec = builtin_topology(topology).unwrap();
        spec.generator.seed = seed;
        let graph = spec.to_graph().unwrap();
        let dataset = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let cv = cross_validate(&dataset, &graph, &config, &ModelConfig::default(), 5).unwrap();
        direct_sum += cv.aggregate.direct_mean;
        transitive_sum += cv.aggregate.transitive_mean.unwrap();
    }
    (direct_sum / seeds as f64, transitive_sum / seeds as f64)
}

#[test]
fn criterion_02_synthetic_regression() {
    let started = Instant::now();
    let (direct, transitive) = seed_sweep_accuracies("base-urban-9", 10);
    let elapsed = started.elapsed().as_secs_f64();
    let ok = direct >= 0.90 && transitive >= 0.85 && elapsed < 600.0;
    println!(
        "criterion 2: {} (base-urban-9 over 10 seeds: direct {direct:.4}, transitive {transitive:.4}, {elapsed:.0}s)",
        verdict(ok)
    );
    assert!(
        ok,
        "base-urban-9: direct {direct}, transitive {transitive}, elapsed {elapsed}s"
    );
}

#[test]
fn criterion_03_scale_trend() {
    let (small, _) = seed_sweep_accuracies("base-urban-9", 10);
    let (large, _) = seed_sweep_accuracies("expanded-urban-24", 10);
    let ok = small > large;
    println!(
        "criterion 3: {} (direct accuracy 9 nodes {small:.4} vs 24 nodes {large:.4})",
        verdict(ok)
    );
    assert!(ok, "9-node direct {small} should exceed 24-node {large}");
}

#[test]
fn criterion_04_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(4..=6);
        let truth;
        loop {
            let w = Matrix::from_fn(n, n, |r, c| {
                if r == c || rng.gen_bool(0.5) {
                    0.0
                } else {
                    let magnitude = rng.gen_range(0.3..0.9);
                    if rng.gen_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    }
                }
            });
            if w.data().iter().any(|v| *v != 0.0) {
                truth = w;
                break;
            }
        }
        let adjacency = Matrix::from_fn(n, n, |r, c| fhm::tensor::sign(truth.get(r, c)));
        let edge_mask = Matrix::from_fn(n, n, |r, c| f64::from(truth.get(r, c) != 0.0));
        let magnitudes = Matrix::from_fn(n, n, |r, c| truth.get(r, c).abs());
        let state: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let h = Matrix::from_column(&state).unwrap();

        let reference = ClassicFcm::new(truth.clone(), FcmActivation::Sigmoid)
            .unwrap()
            .linear_drive(&state)
            .unwrap();
        let masked_form = model::mini_fcm(&h, &truth, &edge_mask).unwrap();
        let signed_form = model::mini_fcm(&h, &magnitudes, &adjacency).unwrap();
        for j in 0..n {
            worst = worst.max((masked_form.get(j, 0) - reference[j]).abs());
            worst = worst.max((signed_form.get(j, 0) - reference[j]).abs());
        }
    }
    let ok = worst < 1e-10;
    println!(
        "criterion 4: {} (inner-map drive vs reference FCM, max abs diff {worst:.2e})",
        verdict(ok)
    );
    assert!(ok, "max abs diff {worst}");
}

#[test]
fn criterion_05_mask_respect() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut pairs = 0;
    while pairs < 100 {
        let n = rng.gen_range(3..=7);
        let graph = random_graph(&mut rng, n);
        let masked: Vec<(usize, usize)> = (0..n)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .filter(|&(r, c)| graph.adjacency().get(r, c) == 0.0)
            .collect();
        if masked.is_empty() {
            continue;
        }
        let config = ModelConfig {
            d_hidden: 8,
            d_latent: 6,
        };
        let params = FhmParams::init(&graph, &config, &mut rng);
        let x0 = Matrix::from_fn(n, model::NODE_FEATURES, |_, _| rng.gen_range(0.0..1.0));
        let t_max = 4;
        let base = model::forward_full(&x0, &graph, &params, t_max, &params.w_fcm).unwrap();

        let (r, c) = masked[rng.gen_range(0..masked.len())];
        let mut tampered = params.clone();
        let spike = if rng.gen_bool(0.5) { 10.0 } else { -10.0 };
        tampered.w_fcm.set(r, c, spike);
        let out = model::forward_full(&x0, &graph, &tampered, t_max, &tampered.w_fcm).unwrap();

        assert_eq!(base.h_curr, out.h_curr, "h_curr changed via masked entry");
        assert_eq!(base.h_prop, out.h_prop, "h_prop changed via masked entry");
        assert_eq!(base.h_final, out.h_final, "h_final changed via masked entry");
        assert_eq!(
            base.head_outputs, out.head_outputs,
            "head outputs changed via masked entry"
        );
        assert_eq!(
            base.s_perf.to_bits(),
            out.s_perf.to_bits(),
            "selection score changed via masked entry"
        );
        assert_eq!(base.selected_step, out.selected_step);
        assert_eq!(base.trace, out.trace, "step trace changed via masked entry");
        pairs += 1;
    }
    println!("criterion 5: PASS (mask respect: 100 spiked masked entries, outputs bit-identical)");
}

#[test]
fn criterion_06_selection_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    for _ in 0..1000 {
        let len = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..len).map(|_| levels[rng.gen_range(0..levels.len())]).collect();
        let zero = Matrix::zeros(1, 1);
        let mut state = PropagationState::new(zero.clone(), Matrix::from_fn(1, 1, |_, _| -1.0), len, zero);
        for (i, &score) in scores.iter().enumerate() {
            state.select_best(Matrix::from_fn(1, 1, |_, _| i as f64), score);
        }
        assert!(state.is_done());
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&s| s == max).unwrap();
        assert_eq!(state.s_perf, max, "selected score is not the max");
        assert_eq!(
            state.h_perf.get(0, 0),
            first as f64,
            "selected state is not the first attaining the max (scores {scores:?})"
        );
    }
    println!("criterion 6: PASS (selection: 1000 sequences keep the earliest maximal score)");
}

struct CountingNoise {
    inner: ChaCha8Rng,
    draws: usize,
}

impl NoiseSource for CountingNoise {
    fn draw(&mut self, std: f64) -> f64 {
        self.draws += 1;
        if std == 0.0 {
            return 0.0;
        }
        let normal = rand_distr::Normal::new(0.0, std).unwrap();
        self.inner.sample(normal)
    }
}

fn random_topology(seed: u64) -> TopologySpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<String> = (0..5).map(|i| format!("n{i}")).collect();
    loop {
        let mut edges = Vec::new();
        for from in 0..5usize {
            for to in 0..5usize {
                if from != to && rng.gen_bool(0.5) {
                    edges.push(EdgeSpec {
                        from: nodes[from].clone(),
                        to: nodes[to].clone(),
                        sign: if rng.gen_bool(0.85) { 1 } else { -1 },
                    });
                }
            }
        }
        let positive_inflow =
            (0..5).any(|j| edges.iter().any(|e| e.to == nodes[j] && e.sign == 1));
        if edges.len() < 3 || !positive_inflow {
            continue;
        }
        let groups = BTreeMap::from([
            ("a".to_string(), nodes[..3].to_vec()),
            ("b".to_string(), nodes[3..].to_vec()),
        ]);
        return TopologySpec {
            name: format!("random-5-{seed}"),
            nodes: nodes.clone(),
            edges,
            groups,
            generator: GeneratorParams {
                noise_level: 0.05,
                samples: 40,
                seed,
            },
        };
    }
}

#[test]
fn criterion_07_inverse_solver() {
    let trials = 20;
    let steps = 1000;
    let mut reached = 0;
    let mut shrunk = 0;
    for trial in 0..trials {
        let spec = random_topology(2000 + trial);
        let graph = spec.to_graph().unwrap();
        let dataset = generate_synthetic(&spec).unwrap();
        let config = TrainConfig {
            epochs: 80,
            folds: 2,
            seed: trial,
            ..TrainConfig::default()
        };
        let cv = cross_validate(&dataset, &graph, &config, &ModelConfig::default(), 2).unwrap();
        let w = cv.best().params.w_fcm.transpose();
        let adjacency = graph.adjacency().transpose();

        let inflow = |j: usize| -> f64 {
            (0..5)
                .filter(|&k| adjacency.get(j, k) != 0.0)
                .map(|k| w.get(j, k).max(0.0))
                .sum()
        };
        let target_node = (0..5)
            .max_by(|&a, &b| inflow(a).partial_cmp(&inflow(b)).unwrap())
            .unwrap();
        let targets = BTreeMap::from([(target_node, 0.65)]);

        let problem = {
            let mut p = InverseProblem::from_adjacency(w, &adjacency, targets).unwrap();
            p.steps = steps;
            p
        };

        let solution = problem.solve_seeded(3000 + trial).unwrap();
        let linear = solution.final_output[target_node];
        let squashed = solution.predicted[target_node];
        if (linear - 0.65).abs() < 0.02 && (squashed - 0.65).abs() < 0.02 {
            reached += 1;
        }

        let mut tight = problem.clone();
        tight.lambda_soft = 10.0;
        let mut loose = problem.clone();
        loose.lambda_soft = 0.0;
        let tight_run = tight.solve_seeded(4000 + trial).unwrap();
        let loose_run = loose.solve_seeded(4000 + trial).unwrap();
        if tight_run.forbidden_norm < loose_run.forbidden_norm {
            shrunk += 1;
        }

        let mut spy = CountingNoise {
            inner: ChaCha8Rng::seed_from_u64(5000 + trial),
            draws: 0,
        };
        problem.solve(&mut spy).unwrap();
        assert_eq!(
            spy.draws,
            (steps / 2) * graph.node_count(),
            "noise draws off the half-way phase boundary"
        );
    }
    let ok = reached >= 18 && shrunk >= 18;
    println!(
        "criterion 7: {} (inverse solver: target reached {reached}/20, forbidden flow shrunk {shrunk}/20, noise phase exact)",
        verdict(ok)
    );
    assert!(ok, "reached {reached}/20, shrunk {shrunk}/20");
}

#[test]
fn criterion_08_schedule_exactness() {
    let mut worst = 0.0f64;
    for &lambda in &[0.05, 0.1, 1.0, 10.0] {
        for &steps in &[1usize, 7, 1000] {
            worst = worst.max((fhm::inverse::lambda_at(0, steps, lambda) - lambda).abs());
            worst = worst.max((fhm::inverse::lambda_at(steps, steps, lambda) - 2.0 * lambda).abs());
        }
    }
    let ok = worst < 1e-12 && DEFAULT_NOISE_STD == 0.01;
    println!(
        "criterion 8: {} (ramp endpoints within {worst:.1e}; default noise std {DEFAULT_NOISE_STD})",
        verdict(ok)
    );
    assert!(ok, "endpoint error {worst}, noise std {DEFAULT_NOISE_STD}");
}

#[test]
fn criterion_09_train_determinism() {
    let bin = env!("CARGO_BIN_EXE_fhm");
    let root = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for run in 0..2 {
        let out = root.path().join(format!("run{run}"));
        let output = Command::new(bin)
            .args([
                "train",
                "--topology",
                "base-urban-9",
                "--seed",
                "11",
                "--epochs",
                "40",
                "--out",
            ])
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "train run {run} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        let dir = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .next()
            .unwrap();
        artifacts.push((
            std::fs::read(dir.join("report.json")).unwrap(),
            std::fs::read(dir.join("report.txt")).unwrap(),
        ));
    }
    let ok = artifacts[0] == artifacts[1];
    println!(
        "criterion 9: {} (two seeded train runs produce byte-identical reports)",
        verdict(ok)
    );
    assert!(ok, "report bytes differ between identical seeded runs");
}

#[test]
fn criterion_10_real_data_smoke() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
        .join("auto_mpg_sample.csv");
    let spec = builtin_topology("mpg-6").unwrap();
    let graph = spec.to_graph().unwrap();
    let load = load_csv(&path, &graph).unwrap();
    assert!(load.dataset.rows() >= 40, "sample should keep most rows");

    let config = TrainConfig {
        seed: 10,
        ..TrainConfig::default()
    };
    let cv = cross_validate(&load.dataset, &graph, &config, &ModelConfig::default(), 5).unwrap();
    let mut finite = cv.aggregate.direct_mean.is_finite();
    let transitive = cv.aggregate.transitive_mean;
    finite &= transitive.map_or(false, |t| t.is_finite());
    for fold in &cv.folds {
        finite &= fold.accuracy.direct.is_finite();
        finite &= fold.accuracy.transitive.map_or(false, |t| t.is_finite());
        finite &= fold.metrics.validation_loss.is_finite();
        finite &= fold.params.w_fcm.data().iter().all(|v| v.is_finite());
    }
    let ok = finite;
    println!(
        "criterion 10: {} (mpg sample: direct {:.4}, transitive {:.4}, all finite)",
        verdict(ok),
        cv.aggregate.direct_mean,
        transitive.unwrap_or(f64::NAN)
    );
    assert!(ok, "mpg training produced non-finite values");
}
