//! HTTP gateway around one router. Predictions run under the read lock; the
//! write lock is held only to bump counters or cache a teacher reply.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use anyhow::Context;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router as Http};
use ocats::cache::Cache;
use ocats::domain::{EmbeddedInstance, Instance, LabelSpace};
use ocats::embedder::{Embedder, HashingEmbedder, HttpEmbedder};
use ocats::experiment::{self, Backend, EmbedderConfig, ExperimentConfig};
use ocats::ingest::{load_dataset, make_few_shot_split, DataFormat, SplitOverride};
use ocats::metrics::Source;
use ocats::router::{Router, RouterConfig};
use ocats::teachers::Teacher;
use serde::{Deserialize, Serialize};

struct Gateway {
    router: RwLock<Router>,
    teacher: Arc<dyn Teacher>,
    embedder: Arc<dyn Embedder>,
    next_id: AtomicU64,
}

#[derive(Deserialize)]
struct ClassifyRequest {
    text: String,
}

#[derive(Serialize)]
struct ClassifyResponse {
    label: Option<String>,
    source: Source,
    distance: f64,
    entropy: f64,
}

#[derive(Serialize)]
struct Stats {
    #[serde(rename = "N")]
    served: u64,
    #[serde(rename = "M")]
    calls: u64,
    rho: f64,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<ocats::Error> for ApiError {
    fn from(e: ocats::Error) -> Self {
        let status = match &e {
            ocats::Error::Instance { source, .. } if source.is_validation() => StatusCode::BAD_REQUEST,
            e if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::BAD_GATEWAY,
        };
        ApiError(status, e.to_string())
    }
}

fn read(g: &Gateway) -> std::sync::RwLockReadGuard<'_, Router> {
    g.router.read().unwrap_or_else(|e| e.into_inner())
}

fn write(g: &Gateway) -> std::sync::RwLockWriteGuard<'_, Router> {
    g.router.write().unwrap_or_else(|e| e.into_inner())
}

async fn classify(
    State(g): State<Arc<Gateway>>,
    Json(req): Json<ClassifyRequest>,
) -> Result<Json<ClassifyResponse>, ApiError> {
    if req.text.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "text must not be empty".into()));
    }
    let id = format!("req-{}", g.next_id.fetch_add(1, Ordering::Relaxed));
    let worker = g.clone();
    tokio::task::spawn_blocking(move || -> Result<ClassifyResponse, ApiError> {
        let embedding = worker.embedder.embed(&req.text)?;
        let item = EmbeddedInstance {
            instance: Instance::new(id, req.text),
            embedding,
        };
        let assessment = read(&worker).assess(&item)?;
        let signals = assessment.decision.signals;
        let respond = |label, source| ClassifyResponse {
            label,
            source,
            distance: signals.distance,
            entropy: signals.entropy,
        };
        if let (true, Some(p)) = (assessment.decision.use_student, &assessment.prediction) {
            let mut router = write(&worker);
            router.record_student();
            let label = router.cache().labels().name(p.label).to_string();
            return Ok(respond(Some(label), Source::Student));
        }
        let reply = worker.teacher.ask(&item.instance);
        let label = write(&worker).absorb(item, reply)?;
        Ok(respond(label, Source::Teacher))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map(Json)
}

async fn stats(State(g): State<Arc<Gateway>>) -> Json<Stats> {
    let router = read(&g);
    let (served, calls) = (router.served(), router.calls());
    Json(Stats {
        served,
        calls,
        rho: if served == 0 { 0.0 } else { calls as f64 / served as f64 },
    })
}

fn build_embedder(config: &EmbedderConfig) -> anyhow::Result<Arc<dyn Embedder>> {
    Ok(match config {
        EmbedderConfig::Hashing { dim, seed } => Arc::new(HashingEmbedder::new(*dim, *seed)?),
        EmbedderConfig::Http { url, dim } => Arc::new(HttpEmbedder::new(url.clone(), *dim, Duration::from_secs(30))),
    })
}

/// Seed cache and prompt demonstrators. A saved cache wins over the few-shot
/// split; the split is embedded with the serving embedder so that cached and
/// incoming vectors share one space.
fn seed_state(config: &ExperimentConfig, embedder: &dyn Embedder) -> anyhow::Result<(Cache, Vec<Instance>)> {
    let mut demos = Vec::new();
    let mut labels = config
        .labels
        .as_ref()
        .map(|l| LabelSpace::new(l.iter().cloned()))
        .transpose()?;
    if let Some(paths) = &config.dataset {
        let format = paths.format.unwrap_or_else(|| DataFormat::from_path(&paths.train));
        let train = load_dataset(&paths.train, format, labels.as_ref())?;
        let split = match &config.split.ids {
            Some(p) => SplitOverride::load(p)?.apply(&train)?,
            None => make_few_shot_split(
                &train,
                config.split.n_train,
                config.split.n_dev,
                config.split.seed,
                config.split.strategy,
            )?,
        };
        labels = Some(train.label_space);
        demos = split.train;
    }
    if let Some(path) = config.serve.cache.as_deref().filter(|p| p.exists()) {
        let cache = Cache::load(path)?;
        if let Some(dim) = cache.dim().filter(|d| *d != embedder.dim()) {
            anyhow::bail!(ocats::Error::Config(format!(
                "cache {} has dim {dim}, embedder produces {}",
                path.display(),
                embedder.dim()
            )));
        }
        return Ok((cache, demos));
    }
    let labels = labels.ok_or_else(|| ocats::Error::Config("serve needs `labels` or a dataset".into()))?;
    let mut cache = Cache::new(labels);
    for d in &demos {
        let item = EmbeddedInstance {
            instance: d.clone(),
            embedding: embedder.embed(&d.text)?,
        };
        cache.insert(item, d.gold_label.as_deref().unwrap_or(""))?;
    }
    Ok((cache, demos))
}

fn persist(router: &Router, path: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = path {
        router.cache().save(path)?;
        tracing::info!(path = %path.display(), entries = router.cache().len(), "cache saved");
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

pub fn run(config: ExperimentConfig, allow_paid: bool) -> anyhow::Result<()> {
    if config.teacher.backend == Backend::Oracle {
        anyhow::bail!(ocats::Error::Config(
            "serve needs the live or replay teacher; the oracle answers from gold labels requests do not carry".into()
        ));
    }
    let embedder = build_embedder(&config.serve.embedder)?;
    let (cache, demos) = seed_state(&config, embedder.as_ref())?;
    let thresholds = match config.serve.thresholds {
        Some(t) => t,
        None => experiment::thresholds_for(&config, config.serve.lambda)?,
    };
    let teacher: Arc<dyn Teacher> = Arc::from(experiment::build_teacher_with(
        &config,
        cache.labels().clone(),
        &demos,
        allow_paid,
    )?);
    let router = Router::new(
        cache,
        RouterConfig {
            thresholds,
            ..config.router.clone()
        },
    )?;
    let gateway = Arc::new(Gateway {
        router: RwLock::new(router),
        teacher,
        embedder,
        next_id: AtomicU64::new(0),
    });
    let app = Http::new()
        .route("/classify", post(classify))
        .route("/stats", get(stats))
        .with_state(gateway.clone());

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.serve.addr)
            .await
            .with_context(|| format!("binding {}", config.serve.addr))?;
        let local = listener.local_addr()?;
        println!("listening on {local}");
        tracing::info!(%local, t_c = thresholds.t_c, t_h = thresholds.t_h, "serving");
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("serving")
    })?;
    let router = read(&gateway);
    persist(&router, config.serve.cache.as_deref())
}
