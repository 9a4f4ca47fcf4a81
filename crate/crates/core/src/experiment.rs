//! Experiment configuration and the split, tune, simulate and report
//! pipelines behind the command-line front end.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! split.json
//! tuning/lambda_<λ>.json, tuning/lambda_<λ>_contour.csv
//! traces/lambda_<λ>/stream_<i>.csv
//! traces/always_teacher/stream_<i>.csv
//! trajectory_lambda_<λ>.csv
//! summary.json
//! manifest.json
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::domain::{EmbeddedInstance, LabelSpace};
use crate::error::{Error, Result};
use crate::gate::Thresholds;
use crate::ingest::{
    load_dataset, load_embeddings, make_few_shot_split, make_streams, DataFormat, Dataset, FewShotSplit,
    SelectionStrategy, SplitOverride, Stream,
};
use crate::metrics::{
    accuracy, aggregate_trajectories, discounted, trajectory, write_trajectory_csv, MeanStd, RunTrace, Source,
};
use crate::router::{Router, RouterConfig};
use crate::teachers::{
    FixtureStore, LiveEndpoint, LiveTeacher, OracleTeacher, PromptContext, RecordingTeacher, ReplayTeacher,
    TaskTemplate, Teacher,
};
use crate::tuner::{dev_outcome, tune, DevOutcome, SearchSpace, TpeConfig, TunerObservation, TuningReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<DataFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub seed: u64,
    pub strategy: SelectionStrategy,
    /// Explicit train/dev id lists replacing the seeded draw.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ids: Option<PathBuf>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_train: 3,
            n_dev: 13,
            seed: 0,
            strategy: SelectionStrategy::Uniform,
            ids: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Oracle,
    Replay,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub backend: Backend,
    /// Oracle: probability of returning the gold label.
    pub accuracy: f64,
    pub seed: u64,
    pub cost_units: f64,
    pub template: TaskTemplate,
    /// Replay source, or recording target for live runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Oracle,
            accuracy: 0.8268,
            seed: 0,
            cost_units: 1.0,
            template: TaskTemplate::Intent,
            fixtures: None,
            url: None,
            model: None,
            timeout_secs: 60.0,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaThresholds {
    pub lambda: f64,
    pub t_c: f64,
    pub t_h: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    #[serde(flatten)]
    pub tpe: TpeConfig,
    /// Defaults to `t_c` in `[0, 2]` and `t_h` in `[0, ln L]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hashing { dim: usize, seed: u64 },
    Http { url: String, dim: usize },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: 768, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    /// Picks the thresholds when `thresholds` is unset.
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    pub embedder: EmbedderConfig,
    /// Loaded at start when present, written on shutdown.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            lambda: 0.05,
            thresholds: None,
            embedder: EmbedderConfig::default(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetPaths>,
    /// Vectors for every train and test id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub split: SplitConfig,
    pub router: RouterConfig,
    pub teacher: TeacherConfig,
    pub lambdas: Vec<f64>,
    pub n_shuffles: usize,
    pub stream_seed: u64,
    /// Per-lambda thresholds; missing lambdas are read from tuning reports.
    pub thresholds: Vec<LambdaThresholds>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning_dir: Option<PathBuf>,
    pub tuning: TuningConfig,
    pub output_dir: PathBuf,
    /// Truncates the test stream before shuffling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
    pub trajectory_window: usize,
    pub serve: ServeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            labels: None,
            dataset: None,
            embeddings: None,
            split: SplitConfig::default(),
            router: RouterConfig::default(),
            teacher: TeacherConfig::default(),
            lambdas: vec![0.05, 0.1, 0.2, 0.3],
            n_shuffles: 5,
            stream_seed: 0,
            thresholds: Vec::new(),
            tuning_dir: None,
            tuning: TuningConfig::default(),
            output_dir: PathBuf::from("out"),
            max_test: None,
            trajectory_window: 10,
            serve: ServeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file, or the `config` member of a run manifest. A
    /// manifest's resolved thresholds fill in when the config has none inline,
    /// so a rerun needs no tuning directory. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::schema(path, e))?;
        let (value, resolved) = match value {
            serde_json::Value::Object(mut map) if map.contains_key("manifest_version") => {
                let config = map
                    .remove("config")
                    .ok_or_else(|| Error::schema(path, "manifest without config"))?;
                let resolved: Vec<LambdaThresholds> = match map.remove("thresholds") {
                    Some(t) => serde_json::from_value(t).map_err(|e| Error::schema(path, e))?,
                    None => Vec::new(),
                };
                (config, resolved)
            }
            other => (other, Vec::new()),
        };
        let mut config: Self = serde_json::from_value(value).map_err(|e| Error::schema(path, e))?;
        if config.thresholds.is_empty() {
            config.thresholds = resolved;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.dataset {
            fix(&mut d.train);
            fix(&mut d.test);
        }
        for p in [
            self.embeddings.as_mut(),
            self.split.ids.as_mut(),
            self.teacher.fixtures.as_mut(),
            self.tuning_dir.as_mut(),
            self.serve.cache.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(
                "lambdas must be a nonempty list of non-negative numbers".into(),
            ));
        }
        if self.n_shuffles == 0 {
            return Err(Error::Config("n_shuffles must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher.accuracy) {
            return Err(Error::Config("teacher.accuracy must lie in [0, 1]".into()));
        }
        self.router.validate()?;
        self.tuning.tpe.validate()?;
        if let Some(space) = &self.tuning.space {
            space.validate()?;
        }
        Ok(())
    }

    fn require_inputs(&self) -> Result<(&DatasetPaths, &Path)> {
        let dataset = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("dataset.train and dataset.test are required".into()))?;
        let embeddings = self
            .embeddings
            .as_deref()
            .ok_or_else(|| Error::Config("embeddings path is required".into()))?;
        for p in [dataset.train.as_path(), dataset.test.as_path(), embeddings] {
            if !p.exists() {
                return Err(Error::Config(format!("file not found: {}", p.display())));
            }
        }
        Ok((dataset, embeddings))
    }

    pub fn tuning_dir(&self) -> PathBuf {
        self.tuning_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("tuning"))
    }
}

/// Directory-safe rendering of a lambda value.
pub fn lambda_tag(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

fn load_label_space(config: &ExperimentConfig, train: &Path, format: DataFormat) -> Result<LabelSpace> {
    match &config.labels {
        Some(labels) => LabelSpace::new(labels.iter().cloned()),
        None => Ok(load_dataset(train, format, None)?.label_space),
    }
}

/// Loaded inputs shared by every pipeline.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub labels: LabelSpace,
    pub train: Dataset,
    pub split: FewShotSplit<EmbeddedInstance>,
    pub test: Vec<EmbeddedInstance>,
}

impl Prepared {
    /// Cache seeded with the few-shot train items under their gold labels.
    pub fn seed_cache(&self) -> Result<Cache> {
        Cache::seed(
            self.labels.clone(),
            self.split
                .train
                .iter()
                .map(|e| (e.clone(), e.instance.gold_label.as_deref().unwrap_or(""))),
        )
    }

    /// The dev items in one fixed shuffled order.
    pub fn dev_stream(&self) -> Stream<EmbeddedInstance> {
        make_streams(&self.split.dev, 1, self.split.seed).remove(0)
    }

    pub fn demonstrators(&self) -> Vec<crate::domain::Instance> {
        self.split.train.iter().map(|e| e.instance.clone()).collect()
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (paths, embeddings_path) = config.require_inputs()?;
    let train_format = paths.format.unwrap_or_else(|| DataFormat::from_path(&paths.train));
    let test_format = paths.format.unwrap_or_else(|| DataFormat::from_path(&paths.test));
    let labels = load_label_space(config, &paths.train, train_format)?;
    let train = load_dataset(&paths.train, train_format, Some(&labels))?;
    let mut test = load_dataset(&paths.test, test_format, Some(&labels))?;
    if let Some(max) = config.max_test {
        test.items.truncate(max);
    }
    let embeddings = load_embeddings(embeddings_path)?;
    let split = match &config.split.ids {
        Some(path) => SplitOverride::load(path)?.apply(&train)?,
        None => make_few_shot_split(
            &train,
            config.split.n_train,
            config.split.n_dev,
            config.split.seed,
            config.split.strategy,
        )?,
    };
    Ok(Prepared {
        split: split.embed(&embeddings)?,
        test: embeddings.attach(&test.items)?,
        labels,
        train,
    })
}

/// Builds the configured teacher. Live calls need `allow_paid`.
pub fn build_teacher(config: &ExperimentConfig, prepared: &Prepared, allow_paid: bool) -> Result<Box<dyn Teacher>> {
    build_teacher_with(config, prepared.labels.clone(), &prepared.demonstrators(), allow_paid)
}

pub fn build_teacher_with(
    config: &ExperimentConfig,
    labels: LabelSpace,
    demos: &[crate::domain::Instance],
    allow_paid: bool,
) -> Result<Box<dyn Teacher>> {
    let t = &config.teacher;
    let context = || PromptContext::new(labels.clone(), demos, t.template);
    let fixtures = || {
        t.fixtures
            .as_deref()
            .ok_or_else(|| Error::Config("teacher.fixtures is required for this backend".into()))
            .and_then(FixtureStore::open)
    };
    Ok(match t.backend {
        Backend::Oracle => {
            Box::new(OracleTeacher::new(labels.clone(), t.accuracy, t.seed)?.with_cost_units(t.cost_units))
        }
        Backend::Replay => {
            let path = t.fixtures.as_deref().unwrap_or(Path::new(""));
            if !path.exists() {
                return Err(Error::Config(format!("fixture file not found: {}", path.display())));
            }
            Box::new(ReplayTeacher::new(context()?, fixtures()?))
        }
        Backend::Live => {
            if !allow_paid {
                return Err(Error::Config(
                    "the live teacher makes paid calls; pass --allow-paid".into(),
                ));
            }
            let url = t
                .url
                .clone()
                .ok_or_else(|| Error::Config("teacher.url is required".into()))?;
            let model = t
                .model
                .clone()
                .ok_or_else(|| Error::Config("teacher.model is required".into()))?;
            let mut endpoint = LiveEndpoint::from_env(url, model)?;
            endpoint.timeout = Duration::from_secs_f64(t.timeout_secs);
            endpoint.max_in_flight = t.max_in_flight.max(1);
            endpoint.cost_units = t.cost_units;
            let live = LiveTeacher::new(context()?, endpoint);
            match t.fixtures {
                Some(_) => Box::new(RecordingTeacher::new(live, context()?, fixtures()?)),
                None => Box::new(live),
            }
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: usize,
    pub dev: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub seed: u64,
    pub fingerprint: String,
    pub train_ids: Vec<String>,
    pub dev_ids: Vec<String>,
    pub counts: BTreeMap<String, ClassCounts>,
}

pub fn run_split(config: &ExperimentConfig) -> Result<SplitReport> {
    let prepared = prepare(config)?;
    let mut counts: BTreeMap<String, ClassCounts> = prepared
        .labels
        .labels()
        .iter()
        .map(|l| (l.clone(), ClassCounts { train: 0, dev: 0 }))
        .collect();
    let gold = |e: &EmbeddedInstance| e.instance.gold_label.clone().unwrap_or_default();
    for e in &prepared.split.train {
        counts.entry(gold(e)).or_insert(ClassCounts { train: 0, dev: 0 }).train += 1;
    }
    for e in &prepared.split.dev {
        counts.entry(gold(e)).or_insert(ClassCounts { train: 0, dev: 0 }).dev += 1;
    }
    let plain = FewShotSplit {
        train: prepared.split.train.iter().map(|e| e.instance.clone()).collect(),
        dev: prepared.split.dev.iter().map(|e| e.instance.clone()).collect(),
        seed: prepared.split.seed,
    };
    let report = SplitReport {
        seed: plain.seed,
        fingerprint: plain.fingerprint(),
        train_ids: plain.train.iter().map(|i| i.id.clone()).collect(),
        dev_ids: plain.dev.iter().map(|i| i.id.clone()).collect(),
        counts,
    };
    create_dir(&config.output_dir)?;
    write_json(&config.output_dir.join("split.json"), &report)?;
    write_manifest(config, "split", &[])?;
    Ok(report)
}

/// Dev-stream outcomes keyed by exact threshold bits; objectives for any
/// lambda derive from the same outcome.
#[derive(Debug, Default)]
pub struct DevMemo {
    outcomes: Mutex<HashMap<(u64, u64), DevOutcome>>,
}

impl DevMemo {
    pub fn get_or_run(&self, th: Thresholds, run: impl FnOnce() -> Result<DevOutcome>) -> Result<DevOutcome> {
        let key = (th.t_c.to_bits(), th.t_h.to_bits());
        if let Some(o) = self.outcomes.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(*o);
        }
        let outcome = run()?;
        self.outcomes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, outcome);
        Ok(outcome)
    }

    pub fn len(&self) -> usize {
        self.outcomes.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tunes thresholds for every lambda in `lambdas` on the dev stream.
///
/// Each lambda runs its own lattice and estimator trials, then selects from
/// every threshold pair evaluated for any lambda. Dev outcomes do not depend
/// on lambda, so the pooled candidates cost nothing extra to re-score, and a
/// shared candidate set makes the selected call rate non-increasing in lambda.
/// A report's `observations` list the pool in evaluation order.
pub fn tune_lambdas(
    prepared: &Prepared,
    router: &RouterConfig,
    tuning: &TuningConfig,
    teacher: &dyn Teacher,
    lambdas: &[f64],
) -> Result<Vec<TuningReport>> {
    let seed = prepared.seed_cache()?;
    let dev = prepared.dev_stream();
    let space = tuning
        .space
        .unwrap_or_else(|| SearchSpace::for_labels(prepared.labels.len()));
    let memo = DevMemo::default();
    let mut pool: Vec<Thresholds> = Vec::new();
    let mut seen = HashSet::new();
    let mut results = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let evaluator = |th: Thresholds| {
            memo.get_or_run(th, || dev_outcome(th, &dev, &seed, router, teacher))?
                .objective(lambda)
        };
        let result = tune(&space, &tuning.tpe, &evaluator)?;
        for o in &result.observations {
            if seen.insert((o.thresholds.t_c.to_bits(), o.thresholds.t_h.to_bits())) {
                pool.push(o.thresholds);
            }
        }
        results.push((lambda, result));
    }
    results
        .into_iter()
        .map(|(lambda, mut result)| {
            result.observations = pool
                .iter()
                .enumerate()
                .map(|(trial, &th)| {
                    let outcome = memo.get_or_run(th, || dev_outcome(th, &dev, &seed, router, teacher))?;
                    Ok(TunerObservation {
                        trial,
                        thresholds: th,
                        objective: outcome.objective(lambda)?,
                    })
                })
                .collect::<Result<_>>()?;
            result.best = *result
                .observations
                .iter()
                .reduce(|best, o| if o.objective > best.objective { o } else { best })
                .expect("pool holds the lattice");
            Ok(TuningReport::new(lambda, space, tuning.tpe.clone(), result))
        })
        .collect()
}

pub fn run_tune(config: &ExperimentConfig, allow_paid: bool) -> Result<Vec<TuningReport>> {
    let prepared = prepare(config)?;
    let teacher = build_teacher(config, &prepared, allow_paid)?;
    let reports = tune_lambdas(
        &prepared,
        &config.router,
        &config.tuning,
        teacher.as_ref(),
        &config.lambdas,
    )?;
    let dir = config.tuning_dir();
    create_dir(&dir)?;
    for report in &reports {
        let tag = lambda_tag(report.lambda);
        report.save(&dir.join(format!("{tag}.json")))?;
        let path = dir.join(format!("{tag}_contour.csv"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        report.contour.write_csv(BufWriter::new(file))?;
    }
    create_dir(&config.output_dir)?;
    write_manifest(config, "tune", &[])?;
    Ok(reports)
}

/// Inline thresholds first, then `tuning_dir` reports.
pub fn thresholds_for(config: &ExperimentConfig, lambda: f64) -> Result<Thresholds> {
    if let Some(t) = config.thresholds.iter().find(|t| t.lambda == lambda) {
        return Ok(Thresholds::new(t.t_c, t.t_h));
    }
    let path = config.tuning_dir().join(format!("{}.json", lambda_tag(lambda)));
    if !path.exists() {
        return Err(Error::Config(format!(
            "no thresholds for lambda {lambda}: set `thresholds` or run tune ({} missing)",
            path.display()
        )));
    }
    Ok(TuningReport::load(&path)?.best.thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub shuffle_seed: u64,
    pub served: u64,
    pub calls: u64,
    pub accuracy: f64,
    pub phi_hat: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub thresholds: Thresholds,
    pub streams: Vec<StreamSummary>,
    pub calls: MeanStd,
    pub accuracy: MeanStd,
    pub phi_hat: MeanStd,
    /// Teacher answering every instance; absent for live runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub always_teacher: Option<Baseline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub accuracy: MeanStd,
    pub phi_hat: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_shuffles: usize,
    pub lambdas: Vec<LambdaSummary>,
}

impl Summary {
    pub fn for_lambda(&self, lambda: f64) -> Option<&LambdaSummary> {
        self.lambdas.iter().find(|l| l.lambda == lambda)
    }
}

/// One simulated stream; `error` is set when it was cut short.
#[derive(Debug)]
pub struct StreamRun {
    pub lambda: f64,
    pub index: usize,
    pub trace: RunTrace,
    pub cache: Cache,
    pub error: Option<Error>,
}

fn run_one(
    prepared: &Prepared,
    router: &RouterConfig,
    th: Thresholds,
    teacher: &dyn Teacher,
    stream: &Stream<EmbeddedInstance>,
    lambda: f64,
    index: usize,
) -> Result<StreamRun> {
    let config = RouterConfig {
        thresholds: th,
        ..router.clone()
    };
    let mut r = Router::new(prepared.seed_cache()?, config)?;
    let (trace, error) = match r.run_stream(stream, teacher) {
        Ok(t) => (t, None),
        Err(a) => (a.trace, Some(a.error)),
    };
    Ok(StreamRun {
        lambda,
        index,
        trace,
        cache: r.into_cache(),
        error,
    })
}

/// Runs every (lambda, shuffle) pair; pairs run in parallel, results come
/// back in (lambda, shuffle) order.
pub fn simulate_streams(
    prepared: &Prepared,
    router: &RouterConfig,
    teacher: &dyn Teacher,
    plan: &[(f64, Thresholds)],
    streams: &[Stream<EmbeddedInstance>],
) -> Result<Vec<StreamRun>> {
    let jobs: Vec<(f64, Thresholds, usize)> = plan
        .iter()
        .flat_map(|&(l, th)| (0..streams.len()).map(move |i| (l, th, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(lambda, th, i)| run_one(prepared, router, th, teacher, &streams[i], lambda, i))
        .collect()
}

/// The teacher's answer for every stream item, as a trace.
pub fn always_teacher_trace(stream: &Stream<EmbeddedInstance>, teacher: &dyn Teacher) -> Result<RunTrace> {
    let mut trace = RunTrace::default();
    for (step, item) in stream.items.iter().enumerate() {
        let predicted = match teacher.ask(&item.instance) {
            Ok(r) => Some(r.label),
            Err(Error::TeacherProtocol { .. }) => None,
            Err(e) => {
                return Err(Error::Instance {
                    id: item.id().to_string(),
                    source: Box::new(e),
                })
            }
        };
        trace.steps.push(crate::metrics::TraceStep {
            step,
            id: item.id().to_string(),
            decision: Source::Teacher,
            predicted,
            gold: item.instance.gold_label.clone(),
            distance: 2.0,
            entropy: 0.0,
            calls: step as u64 + 1,
            served: step as u64 + 1,
        });
    }
    Ok(trace)
}

fn stream_summary(trace: &RunTrace, lambda: f64, shuffle_seed: u64, complete: bool) -> Result<StreamSummary> {
    let acc = accuracy(trace)?;
    Ok(StreamSummary {
        shuffle_seed,
        served: trace.served(),
        calls: trace.calls(),
        accuracy: acc,
        phi_hat: discounted(acc, trace.calls(), trace.served(), lambda)?.phi_hat,
        complete,
    })
}

/// Summary statistics from traces; the single source for both simulate and
/// report.
pub fn summarize(
    plan: &[(f64, Thresholds)],
    traces: &[Vec<(RunTrace, bool)>],
    seeds: &[u64],
    baseline: Option<&[RunTrace]>,
) -> Result<Summary> {
    let lambdas = plan
        .iter()
        .zip(traces)
        .map(|(&(lambda, thresholds), runs)| {
            let streams = runs
                .iter()
                .zip(seeds)
                .map(|((t, complete), &seed)| stream_summary(t, lambda, seed, *complete))
                .collect::<Result<Vec<_>>>()?;
            let col = |f: fn(&StreamSummary) -> f64| MeanStd::of(&streams.iter().map(f).collect::<Vec<_>>());
            let always_teacher = match baseline {
                Some(b) => {
                    let s = b
                        .iter()
                        .zip(seeds)
                        .map(|(t, &seed)| stream_summary(t, lambda, seed, true))
                        .collect::<Result<Vec<_>>>()?;
                    Some(Baseline {
                        accuracy: MeanStd::of(&s.iter().map(|x| x.accuracy).collect::<Vec<_>>()),
                        phi_hat: MeanStd::of(&s.iter().map(|x| x.phi_hat).collect::<Vec<_>>()),
                    })
                }
                None => None,
            };
            Ok(LambdaSummary {
                lambda,
                thresholds,
                calls: col(|s| s.calls as f64),
                accuracy: col(|s| s.accuracy),
                phi_hat: col(|s| s.phi_hat),
                streams,
                always_teacher,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary {
        n_shuffles: seeds.len(),
        lambdas,
    })
}

/// Outcome of [`run_simulate`]; `error` reports the first aborted stream
/// after all partial results were written.
#[derive(Debug)]
pub struct SimulateOutcome {
    pub summary: Summary,
    pub runs: Vec<StreamRun>,
    pub error: Option<Error>,
}

pub fn run_simulate(config: &ExperimentConfig, allow_paid: bool) -> Result<SimulateOutcome> {
    let prepared = prepare(config)?;
    let plan = config
        .lambdas
        .iter()
        .map(|&l| Ok((l, thresholds_for(config, l)?)))
        .collect::<Result<Vec<_>>>()?;
    let teacher = build_teacher(config, &prepared, allow_paid)?;
    let streams = make_streams(&prepared.test, config.n_shuffles, config.stream_seed);
    let runs = simulate_streams(&prepared, &config.router, teacher.as_ref(), &plan, &streams)?;
    let baseline = match config.teacher.backend {
        Backend::Live => None,
        _ => Some(
            streams
                .par_iter()
                .map(|s| always_teacher_trace(s, teacher.as_ref()))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    write_simulation(config, &plan, &streams, &runs, baseline.as_deref())?;
    let summary = report(&config.output_dir)?;
    let error = runs.iter().find_map(|r| {
        r.error
            .as_ref()
            .map(|e| Error::TeacherUnavailable(format!("lambda {} stream {}: {e}", r.lambda, r.index)))
    });
    Ok(SimulateOutcome { summary, runs, error })
}

fn trace_path(dir: &Path, group: &str, index: usize) -> PathBuf {
    dir.join("traces").join(group).join(format!("stream_{index}.csv"))
}

fn write_trace(path: &Path, trace: &RunTrace) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    trace.write_csv(BufWriter::new(file))
}

/// Run metadata that [`report`] needs besides the traces.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunIndex {
    plan: Vec<LambdaThresholds>,
    shuffle_seeds: Vec<u64>,
    complete: Vec<Vec<bool>>,
    baseline: bool,
    trajectory_window: usize,
}

fn write_simulation(
    config: &ExperimentConfig,
    plan: &[(f64, Thresholds)],
    streams: &[Stream<EmbeddedInstance>],
    runs: &[StreamRun],
    baseline: Option<&[RunTrace]>,
) -> Result<()> {
    let out = &config.output_dir;
    create_dir(out)?;
    for run in runs {
        write_trace(&trace_path(out, &lambda_tag(run.lambda), run.index), &run.trace)?;
    }
    if let Some(b) = baseline {
        for (i, t) in b.iter().enumerate() {
            write_trace(&trace_path(out, "always_teacher", i), t)?;
        }
    }
    let index = RunIndex {
        plan: plan
            .iter()
            .map(|&(lambda, th)| LambdaThresholds {
                lambda,
                t_c: th.t_c,
                t_h: th.t_h,
            })
            .collect(),
        shuffle_seeds: streams.iter().map(|s| s.shuffle_seed).collect(),
        complete: plan
            .iter()
            .map(|&(l, _)| {
                runs.iter()
                    .filter(|r| r.lambda == l)
                    .map(|r| r.error.is_none())
                    .collect()
            })
            .collect(),
        baseline: baseline.is_some(),
        trajectory_window: config.trajectory_window,
    };
    write_json(&out.join("traces").join("index.json"), &index)?;
    write_manifest(config, "simulate", plan)?;
    Ok(())
}

/// Recomputes the summary, trajectories and `summary.json` from the trace
/// files under `output_dir`.
pub fn report(output_dir: &Path) -> Result<Summary> {
    let index_path = output_dir.join("traces").join("index.json");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: RunIndex = serde_json::from_str(&text).map_err(|e| Error::schema(&index_path, e))?;
    let read = |group: &str, i: usize| -> Result<RunTrace> {
        let path = trace_path(output_dir, group, i);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        RunTrace::read_csv(std::io::BufReader::new(file))
    };
    let n = index.shuffle_seeds.len();
    let plan: Vec<(f64, Thresholds)> = index
        .plan
        .iter()
        .map(|p| (p.lambda, Thresholds::new(p.t_c, p.t_h)))
        .collect();
    let mut traces = Vec::with_capacity(plan.len());
    for (li, &(lambda, _)) in plan.iter().enumerate() {
        let runs = (0..n)
            .map(|i| Ok((read(&lambda_tag(lambda), i)?, index.complete[li][i])))
            .collect::<Result<Vec<_>>>()?;
        let complete: Vec<&RunTrace> = runs.iter().filter(|(_, c)| *c).map(|(t, _)| t).collect();
        if !complete.is_empty() {
            let points = complete
                .iter()
                .map(|t| trajectory(t, lambda, index.trajectory_window))
                .collect::<Result<Vec<_>>>()?;
            let path = output_dir.join(format!("trajectory_{}.csv", lambda_tag(lambda)));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_trajectory_csv(&aggregate_trajectories(&points)?, BufWriter::new(file))?;
        }
        traces.push(runs);
    }
    let baseline = if index.baseline {
        Some((0..n).map(|i| read("always_teacher", i)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let summary = summarize(&plan, &traces, &index.shuffle_seeds, baseline.as_deref())?;
    write_json(&output_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a ExperimentConfig,
    thresholds: Vec<LambdaThresholds>,
}

fn write_manifest(config: &ExperimentConfig, command: &str, plan: &[(f64, Thresholds)]) -> Result<()> {
    let manifest = Manifest {
        manifest_version: 1,
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        thresholds: plan
            .iter()
            .map(|&(lambda, th)| LambdaThresholds {
                lambda,
                t_c: th.t_c,
                t_h: th.t_h,
            })
            .collect(),
    };
    write_json(&config.output_dir.join("manifest.json"), &manifest)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
