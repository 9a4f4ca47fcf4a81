//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use ocats::cache::Cache;
use ocats::domain::{EmbeddedInstance, Embedding, Instance, LabelSpace};
use ocats::experiment::{
    self, simulate_streams, tune_lambdas, Backend, DatasetPaths, ExperimentConfig, LambdaThresholds, Prepared,
    SplitConfig, TuningConfig,
};
use ocats::gate::Thresholds;
use ocats::ingest::{make_few_shot_split, make_streams, SelectionStrategy};
use ocats::metrics::{accuracy, discounted, RunTrace};
use ocats::router::{Router, RouterConfig};
use ocats::students::{entropy, knn_predict, EntropyDomain, MlpConfig, MlpModel, StudentKind};
use ocats::synthetic::{self, SyntheticSpec};
use ocats::teachers::OracleTeacher;
use ocats::tuner::{tune, SearchSpace, TpeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn discounted_example() -> Outcome {
    let s = discounted(0.8, 1, 3, 0.15).map_err(|e| e.to_string())?;
    check(
        s.phi_hat == 0.75,
        format!("phi_hat = {}", s.phi_hat),
        format!("phi_hat = {} (expected 0.75)", s.phi_hat),
    )
}

fn entropy_bounds() -> Outcome {
    let h77 = entropy(&[1.0 / 77.0; 77]);
    let h2 = entropy(&[0.5, 0.5]);
    check(
        (h77 - 4.34).abs() < 5e-3 && (h2 - 0.69).abs() < 5e-3,
        format!("H(U77) = {h77:.4}, H(U2) = {h2:.4}"),
        format!("H(U77) = {h77}, H(U2) = {h2}"),
    )
}

struct OraclePrediction {
    label: usize,
    probs: Vec<f64>,
    entropy: f64,
    centroid_distance: f64,
}

fn raw_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 2.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Direct formulas over raw vectors: sort all distances, weight the k
/// nearest by inverse squared distance, log-sum-exp softmax over the classes
/// that appear.
fn knn_oracle(raw: &[(Vec<f64>, usize)], query: &[f64], k: usize, classes: usize) -> OraclePrediction {
    let mut scored: Vec<(f64, usize)> = raw
        .iter()
        .enumerate()
        .map(|(i, (v, _))| (raw_cosine_distance(query, v), i))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let weights: Vec<f64> = scored.iter().map(|(d, _)| 1.0 / d.max(1e-6).powi(2)).collect();
    let mut w_class = vec![0.0; classes];
    let mut present = vec![false; classes];
    for ((_, i), w) in scored.iter().zip(&weights) {
        w_class[raw[*i].1] += w;
        present[raw[*i].1] = true;
    }
    let max = (0..classes)
        .filter(|&c| present[c])
        .map(|c| w_class[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + (0..classes)
            .filter(|&c| present[c])
            .map(|c| (w_class[c] - max).exp())
            .sum::<f64>()
            .ln();
    let probs: Vec<f64> = (0..classes)
        .map(|c| if present[c] { (w_class[c] - lse).exp() } else { 0.0 })
        .collect();
    let h = -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    let mut label = 0;
    for c in 1..classes {
        if probs[c] > probs[label] {
            label = c;
        }
    }
    let total: f64 = weights.iter().sum();
    let dim = query.len();
    let mut centroid = vec![0.0; dim];
    for ((_, i), w) in scored.iter().zip(&weights) {
        let v = &raw[*i].0;
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..dim {
            centroid[j] += w / total * v[j] / n;
        }
    }
    OraclePrediction {
        label,
        probs,
        entropy: h,
        centroid_distance: raw_cosine_distance(query, &centroid),
    }
}

fn knn_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut compared, mut label_mismatch, mut worst) = (0usize, 0usize, 0.0f64);
    for _ in 0..200 {
        let dim = rng.random_range(8..=768);
        let n = rng.random_range(1..=500);
        let classes = rng.random_range(2..=12);
        let space = LabelSpace::new((0..classes).map(|c| format!("c{c}"))).unwrap();
        let raw: Vec<(Vec<f64>, usize)> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (v, rng.random_range(0..classes))
            })
            .collect();
        let mut cache = Cache::new(space.clone());
        for (i, (v, c)) in raw.iter().enumerate() {
            let item = EmbeddedInstance {
                instance: Instance::new(format!("e{i}"), "x"),
                embedding: Embedding::normalized(v.clone()).unwrap(),
            };
            cache.insert(item, space.name(*c)).unwrap();
        }
        for _ in 0..50 {
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = knn_predict(
                &cache,
                &Embedding::normalized(q.clone()).unwrap(),
                5,
                EntropyDomain::Present,
            )
            .map_err(|e| e.to_string())?;
            let o = knn_oracle(&raw, &q, 5, classes);
            compared += 1;
            if p.label != o.label {
                label_mismatch += 1;
            }
            let diff = p
                .probs
                .iter()
                .zip(&o.probs)
                .map(|(a, b)| (a - b).abs())
                .chain([
                    (p.entropy - o.entropy).abs(),
                    (p.centroid_distance - o.centroid_distance).abs(),
                ])
                .fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    check(
        label_mismatch == 0 && worst <= 1e-9,
        format!("{compared} queries, labels identical, max abs diff {worst:.2e}"),
        format!("{label_mismatch}/{compared} label mismatches, max abs diff {worst:.2e}"),
    )
}

fn mlp_gradient_check() -> Outcome {
    let (dim, classes, n) = (16, 3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0));
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut model = MlpModel::init(dim, 10, classes, 5);
    let (_, grads) = model.loss_and_gradients(x.view(), &y, None);
    let analytic = grads.flatten();
    let params = model.parameters();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + h;
        model.set_parameters(&p);
        let up = model.loss(x.view(), &y);
        p[i] = params[i] - h;
        model.set_parameters(&p);
        let down = model.loss(x.view(), &y);
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    model.set_parameters(&params);
    check(
        worst < 1e-4,
        format!("{} parameters, max relative error {worst:.2e}", params.len()),
        format!("max relative error {worst:.2e}"),
    )
}

fn tpe_sanity() -> Outcome {
    let space = SearchSpace::for_labels(77);
    let f = |th: Thresholds| -(th.t_c - 1.0).powi(2) - (th.t_h - 2.0).powi(2);
    let steps = 200;
    let mut grid_best = f64::NEG_INFINITY;
    for i in 0..steps {
        for j in 0..steps {
            let c = space.t_c.0 + (space.t_c.1 - space.t_c.0) * i as f64 / (steps - 1) as f64;
            let h = space.t_h.0 + (space.t_h.1 - space.t_h.0) * j as f64 / (steps - 1) as f64;
            grid_best = grid_best.max(f(Thresholds::new(c, h)));
        }
    }
    let mut hits = 0;
    for seed in 0..100 {
        let cfg = TpeConfig {
            seed,
            ..TpeConfig::default()
        };
        let r = tune(&space, &cfg, &|th| Ok(f(th))).map_err(|e| e.to_string())?;
        if r.best.objective >= grid_best - 0.05 {
            hits += 1;
        }
    }
    check(
        hits >= 95,
        format!("{hits}/100 repetitions within 0.05 of the 200x200 optimum {grid_best:.5}"),
        format!("only {hits}/100 repetitions within 0.05"),
    )
}

const LAMBDAS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];

fn tradeoff_setup() -> (Prepared, OracleTeacher) {
    let data = synthetic::generate(&SyntheticSpec {
        classes: 20,
        dim: 64,
        train_per_class: 40,
        test_size: 2000,
        // Wide enough that the student misses often and tuned thresholds move with lambda.
        spread: 2.5,
        seed: 7,
    })
    .unwrap();
    let split = make_few_shot_split(&data.train, 3, 20, 0, SelectionStrategy::Uniform)
        .unwrap()
        .embed(&data.embeddings)
        .unwrap();
    let teacher = OracleTeacher::new(data.train.label_space.clone(), 0.83, 0).unwrap();
    let prepared = Prepared {
        labels: data.train.label_space.clone(),
        test: data.embeddings.attach(&data.test.items).unwrap(),
        train: data.train,
        split,
    };
    (prepared, teacher)
}

struct TradeoffRow {
    lambda: f64,
    thresholds: Thresholds,
    calls: f64,
    accuracy: f64,
    phi_hat: f64,
    teacher_phi_hat: f64,
}

fn tradeoff_rows(router: &RouterConfig, tuning: &TuningConfig) -> Result<Vec<TradeoffRow>, String> {
    let (prepared, teacher) = tradeoff_setup();
    let reports = tune_lambdas(&prepared, router, tuning, &teacher, &LAMBDAS).map_err(|e| e.to_string())?;
    let plan: Vec<(f64, Thresholds)> = reports.iter().map(|r| (r.lambda, r.best.thresholds)).collect();
    let streams = make_streams(&prepared.test, 5, 0);
    let runs = simulate_streams(&prepared, router, &teacher, &plan, &streams).map_err(|e| e.to_string())?;
    let baseline: Vec<RunTrace> = streams
        .iter()
        .map(|s| experiment::always_teacher_trace(s, &teacher))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let teacher_acc = baseline.iter().map(|t| accuracy(t).unwrap()).sum::<f64>() / baseline.len() as f64;
    Ok(plan
        .iter()
        .map(|&(lambda, thresholds)| {
            let mine: Vec<&RunTrace> = runs.iter().filter(|r| r.lambda == lambda).map(|r| &r.trace).collect();
            let k = mine.len() as f64;
            let calls = mine.iter().map(|t| t.calls() as f64).sum::<f64>() / k;
            let acc = mine.iter().map(|t| accuracy(t).unwrap()).sum::<f64>() / k;
            let phi_hat = mine
                .iter()
                .map(|t| {
                    discounted(accuracy(t).unwrap(), t.calls(), t.served(), lambda)
                        .unwrap()
                        .phi_hat
                })
                .sum::<f64>()
                / k;
            TradeoffRow {
                lambda,
                thresholds,
                calls,
                accuracy: acc,
                phi_hat,
                teacher_phi_hat: teacher_acc - lambda,
            }
        })
        .collect())
}

fn tradeoff_verdict(rows: &[TradeoffRow], check_accuracy: bool) -> Outcome {
    let table = rows
        .iter()
        .map(|r| {
            format!(
                "λ={} th=({:.3},{:.3}) calls={:.1} acc={:.4} φ̂={:.4} teacher φ̂={:.4}",
                r.lambda, r.thresholds.t_c, r.thresholds.t_h, r.calls, r.accuracy, r.phi_hat, r.teacher_phi_hat
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    let a = rows.iter().all(|r| r.phi_hat > r.teacher_phi_hat);
    let b = rows.windows(2).all(|w| w[1].calls <= w[0].calls);
    let c = rows.windows(2).all(|w| w[1].accuracy <= w[0].accuracy + 0.01);
    let verdict = format!(
        "(a) {} (b) {}{}",
        a,
        b,
        if check_accuracy {
            format!(" (c) {c}")
        } else {
            String::new()
        }
    );
    check(
        a && b && (!check_accuracy || c),
        format!("{verdict} | {table}"),
        format!("{verdict} | {table}"),
    )
}

fn end_to_end_tradeoff() -> Outcome {
    let rows = tradeoff_rows(&RouterConfig::default(), &TuningConfig::default())?;
    tradeoff_verdict(&rows, true)
}

fn mlp_tradeoff() -> Outcome {
    let router = RouterConfig {
        student: StudentKind::Mlp,
        mlp: Some(acceptance_mlp()),
        ..RouterConfig::default()
    };
    let rows = tradeoff_rows(&router, &TuningConfig::default())?;
    tradeoff_verdict(&rows, false)
}

/// Lighter network for the single-core time budget; see the README.
fn acceptance_mlp() -> MlpConfig {
    MlpConfig {
        hidden_units: 128,
        epochs: 60,
        learning_rate: 1e-3,
        retrain_every: 100,
        ..MlpConfig::default()
    }
}

fn small_run_config(dir: &Path) -> ExperimentConfig {
    let data = synthetic::generate(&SyntheticSpec {
        classes: 5,
        dim: 24,
        train_per_class: 12,
        test_size: 400,
        spread: 0.8,
        seed: 3,
    })
    .unwrap();
    synthetic::write_dataset(&data.train, &dir.join("train.jsonl")).unwrap();
    synthetic::write_dataset(&data.test, &dir.join("test.jsonl")).unwrap();
    let ids = data.train.items.iter().chain(&data.test.items).map(|i| i.id.as_str());
    synthetic::write_embeddings(&data.embeddings, ids, &dir.join("embeddings.jsonl")).unwrap();
    let mut config = ExperimentConfig {
        dataset: Some(DatasetPaths {
            train: "train.jsonl".into(),
            test: "test.jsonl".into(),
            format: None,
        }),
        embeddings: Some("embeddings.jsonl".into()),
        split: SplitConfig {
            n_train: 3,
            n_dev: 5,
            ..SplitConfig::default()
        },
        lambdas: vec![0.05, 0.2],
        n_shuffles: 3,
        thresholds: vec![
            LambdaThresholds {
                lambda: 0.05,
                t_c: 0.35,
                t_h: 0.6,
            },
            LambdaThresholds {
                lambda: 0.2,
                t_c: 0.5,
                t_h: 1.0,
            },
        ],
        output_dir: "run".into(),
        ..ExperimentConfig::default()
    };
    config.teacher.backend = Backend::Oracle;
    config.teacher.accuracy = 0.83;
    config.resolve_paths(dir);
    config
}

fn read_traces(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.join("traces")];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_prefix() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = small_run_config(tmp.path());
    experiment::run_simulate(&config, false).map_err(|e| e.to_string())?;
    let first = read_traces(&config.output_dir);

    let mut replay = ExperimentConfig::load(&config.output_dir.join("manifest.json")).map_err(|e| e.to_string())?;
    replay.output_dir = tmp.path().join("replay");
    experiment::run_simulate(&replay, false).map_err(|e| e.to_string())?;
    let second = read_traces(&replay.output_dir);
    let identical = !first.is_empty() && first == second;

    let prepared = experiment::prepare(&config).map_err(|e| e.to_string())?;
    let teacher = experiment::build_teacher(&config, &prepared, false).map_err(|e| e.to_string())?;
    let stream = make_streams(&prepared.test, 1, 99).remove(0);
    let router = RouterConfig {
        thresholds: Thresholds::new(0.35, 0.6),
        ..RouterConfig::default()
    };
    let run = |items: Vec<EmbeddedInstance>| {
        let mut r = Router::new(prepared.seed_cache().unwrap(), router.clone()).unwrap();
        r.run_stream(
            &ocats::ingest::Stream {
                items,
                shuffle_seed: 99,
            },
            teacher.as_ref(),
        )
        .unwrap()
    };
    let full = run(stream.items.clone());
    let prefix = run(stream.items[..100].to_vec());
    let prefix_ok = prefix.steps[..] == full.steps[..100];
    check(
        identical && prefix_ok,
        format!(
            "{} trace files byte-identical on manifest replay; 100-step prefix matches",
            first.len()
        ),
        format!("byte-identical: {identical}, prefix: {prefix_ok}"),
    )
}

fn cache_growth_and_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = small_run_config(tmp.path());
    let outcome = experiment::run_simulate(&config, false).map_err(|e| e.to_string())?;
    let seed = config.split.n_train * 5;
    let mut growth_ok = true;
    let mut round_trip_ok = true;
    for (i, run) in outcome.runs.iter().enumerate() {
        growth_ok &= run.cache.len() as u64 == seed as u64 + run.trace.calls();
        let path = tmp.path().join(format!("cache_{i}.jsonl"));
        run.cache.save(&path).map_err(|e| e.to_string())?;
        round_trip_ok &= Cache::load(&path).map_err(|e| e.to_string())? == run.cache;
    }
    check(
        growth_ok && round_trip_ok,
        format!("{} runs: size = {seed} + M, save/load identical", outcome.runs.len()),
        format!("growth: {growth_ok}, round trip: {round_trip_ok}"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("discounted_score_worked_example", discounted_example),
        ("entropy_bounds", entropy_bounds),
        ("knn_oracle_equivalence", knn_oracle_equivalence),
        ("mlp_gradient_check", mlp_gradient_check),
        ("tpe_sanity", tpe_sanity),
        ("end_to_end_tradeoff", end_to_end_tradeoff),
        ("determinism_and_prefix", determinism_and_prefix),
        ("cache_growth_and_round_trip", cache_growth_and_round_trip),
        ("mlp_student_tradeoff", mlp_tradeoff),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
