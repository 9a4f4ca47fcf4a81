//! Teacher backends: a live chat-completion client, a record/replay fixture
//! store, and a simulated oracle that answers from gold labels.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Instance, LabelSpace};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "OCATS_TEACHER_API_KEY";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTemplate {
    #[default]
    Intent,
    Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_message: String,
    /// (user text, assistant label) pairs in presentation order.
    pub demonstrators: Vec<(String, String)>,
    pub query_text: String,
}

impl PromptBundle {
    /// System message, demonstrator turns, then the query as the last user turn.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(2 + 2 * self.demonstrators.len());
        out.push(ChatMessage::new("system", &self.system_message));
        for (user, assistant) in &self.demonstrators {
            out.push(ChatMessage::new("user", user));
            out.push(ChatMessage::new("assistant", assistant));
        }
        out.push(ChatMessage::new("user", &self.query_text));
        out
    }

    /// Hex SHA-256 of the serialized message list; detects prompt drift
    /// between recording and replay.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.messages()).expect("messages serialize");
        hex::encode(Sha256::digest(&json))
    }
}

fn system_message(space: &LabelSpace, template: TaskTemplate) -> String {
    match template {
        TaskTemplate::Intent => {
            let mut msg = String::from(
                "You are an expert assistant in the field of customer service. \
                 Your task is to help workers in the customer service department of a company.\n\
                 Your task is to classify the customer's question in order to help the customer \
                 service worker to answer the question. In order to help the worker you MUST respond \
                 with the number and the name of one of the following classes you know.\n\
                 In case you reply with something else, you will be penalized.\n\
                 The classes are:",
            );
            for label in space.labels() {
                msg.push_str("\n- ");
                msg.push_str(label);
            }
            msg
        }
        TaskTemplate::Sentiment => {
            let quoted: Vec<String> = space.labels().iter().map(|l| format!("'{l}'")).collect();
            let choices = match quoted.as_slice() {
                [a, b] => format!("{a} or {b}"),
                [init @ .., last] => format!("{}, or {last}", init.join(", ")),
                [] => String::new(),
            };
            format!("Analyze the sentiment of the following reviews and classify them as either {choices}.")
        }
    }
}

/// Everything a prompt needs apart from the query.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub space: LabelSpace,
    pub template: TaskTemplate,
    system_message: String,
    demonstrators: Vec<(String, String)>,
}

impl PromptContext {
    /// Demonstrators are ordered by class (label order), then by their order
    /// in `demos`. Demos without a valid gold label are rejected.
    pub fn new(space: LabelSpace, demos: &[Instance], template: TaskTemplate) -> Result<Self> {
        let mut indexed = Vec::with_capacity(demos.len());
        for (pos, demo) in demos.iter().enumerate() {
            let gold = demo
                .gold_label
                .as_deref()
                .ok_or_else(|| Error::MissingGold(demo.id.clone()))?;
            indexed.push((space.index(gold)?, pos));
        }
        indexed.sort();
        let demonstrators = indexed
            .into_iter()
            .map(|(label, pos)| (demos[pos].text.clone(), space.name(label).to_string()))
            .collect();
        Ok(Self {
            system_message: system_message(&space, template),
            space,
            template,
            demonstrators,
        })
    }

    pub fn bundle(&self, query: &Instance) -> PromptBundle {
        PromptBundle {
            system_message: self.system_message.clone(),
            demonstrators: self.demonstrators.clone(),
            query_text: query.text.clone(),
        }
    }
}

pub fn build_prompt(
    space: &LabelSpace,
    demos: &[Instance],
    query: &Instance,
    template: TaskTemplate,
) -> Result<PromptBundle> {
    Ok(PromptContext::new(space.clone(), demos, template)?.bundle(query))
}

/// Trims, lowercases, and strips a leading numeric class prefix such as
/// `"12 - "`, `"12. "` or `"12: "`, plus surrounding quotes and a trailing
/// period, repeating until nothing changes.
pub fn canonical_text(raw: &str) -> String {
    let mut current = raw.to_string();
    loop {
        let next = canonical_step(&current);
        if next == current {
            return next;
        }
        current = next;
    }
}

fn canonical_step(s: &str) -> String {
    let mut t = s.trim().to_lowercase();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = t[digits..].trim_start();
        if let Some(stripped) = rest.strip_prefix(['-', '.', ':', ')']) {
            t = stripped.trim_start().to_string();
        }
    }
    for q in ['"', '\'', '`'] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) {
            t = t[1..t.len() - 1].to_string();
        }
    }
    if let Some(stripped) = t.strip_suffix('.') {
        t = stripped.to_string();
    }
    t.trim().to_string()
}

/// Maps raw teacher text to a label index by case-insensitive exact match.
pub fn canonicalize(raw: &str, space: &LabelSpace) -> Result<usize> {
    let text = canonical_text(raw);
    space
        .labels()
        .iter()
        .position(|l| l.to_lowercase() == text)
        .ok_or_else(|| Error::TeacherProtocol {
            raw_text: raw.to_string(),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherResponse {
    pub label: String,
    pub raw_text: String,
    pub latency_ms: f64,
    pub cost_units: f64,
}

pub trait Teacher: Send + Sync {
    /// One paid call. Unparseable replies surface as
    /// [`Error::TeacherProtocol`].
    fn ask(&self, instance: &Instance) -> Result<TeacherResponse>;

    fn label_space(&self) -> &LabelSpace;
}

/// Simulated teacher: gold label with probability `accuracy`, otherwise a
/// uniformly drawn wrong label. Each answer depends only on the seed and the
/// instance id.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    space: LabelSpace,
    accuracy: f64,
    seed: u64,
    cost_units: f64,
}

impl OracleTeacher {
    pub fn new(space: LabelSpace, accuracy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Config(format!("oracle accuracy {accuracy} outside [0, 1]")));
        }
        Ok(Self {
            space,
            accuracy,
            seed,
            cost_units: 1.0,
        })
    }

    pub fn with_cost_units(mut self, cost_units: f64) -> Self {
        self.cost_units = cost_units;
        self
    }

    fn rng_for(&self, id: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(id.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

pub fn call_oracle(teacher: &OracleTeacher, instance: &Instance) -> Result<TeacherResponse> {
    let gold = instance
        .gold_label
        .as_deref()
        .ok_or_else(|| Error::OracleNeedsGold(instance.id.clone()))?;
    let gold = teacher.space.index(gold)?;
    let mut rng = teacher.rng_for(&instance.id);
    let label = if rng.random::<f64>() < teacher.accuracy {
        gold
    } else {
        let wrong = rng.random_range(0..teacher.space.len() - 1);
        if wrong >= gold {
            wrong + 1
        } else {
            wrong
        }
    };
    let name = teacher.space.name(label).to_string();
    Ok(TeacherResponse {
        raw_text: name.clone(),
        label: name,
        latency_ms: 0.0,
        cost_units: teacher.cost_units,
    })
}

impl Teacher for OracleTeacher {
    fn ask(&self, instance: &Instance) -> Result<TeacherResponse> {
        call_oracle(self, instance)
    }

    fn label_space(&self) -> &LabelSpace {
        &self.space
    }
}

/// Connection settings for the live chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct LiveEndpoint {
    pub url: String,
    pub model: String,
    pub api_key: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    /// Delay before the first retry; doubles for each further retry.
    pub backoff_base: Duration,
    pub max_retries: u32,
    pub cost_units: f64,
}

impl LiveEndpoint {
    /// Reads the credential from [`API_KEY_ENV`].
    pub fn from_env(url: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(url, model, api_key))
    }

    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            backoff_base: Duration::from_secs(1),
            max_retries: 3,
            cost_units: 1.0,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    released: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            released: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.released.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.released.notify_one();
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

pub struct LiveTeacher {
    context: PromptContext,
    endpoint: LiveEndpoint,
    agent: ureq::Agent,
    permits: Permits,
}

impl LiveTeacher {
    pub fn new(context: PromptContext, endpoint: LiveEndpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let permits = Permits::new(endpoint.max_in_flight);
        Self {
            context,
            endpoint,
            agent,
            permits,
        }
    }

    pub fn context(&self) -> &PromptContext {
        &self.context
    }

    fn attempt(&self, body: &CompletionRequest<'_>) -> std::result::Result<String, Attempt> {
        let mut response = self
            .agent
            .post(&self.endpoint.url)
            .header("Authorization", &format!("Bearer {}", self.endpoint.api_key))
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(Error::TeacherUnavailable(format!(
                "HTTP {status}: {detail}"
            ))));
        }
        let parsed: CompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Attempt::Fatal(Error::TeacherUnavailable(format!("malformed response: {e}"))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(Error::TeacherUnavailable("response has no choices".into())))
    }

    /// Sends the prompt, retrying transport errors, 429 and 5xx with
    /// exponential backoff.
    pub fn call_live(&self, bundle: &PromptBundle) -> Result<TeacherResponse> {
        let body = CompletionRequest {
            model: &self.endpoint.model,
            messages: bundle.messages(),
            temperature: 0.0,
        };
        let _permit = self.permits.acquire();
        let started = Instant::now();
        let mut delay = self.endpoint.backoff_base;
        let mut retries = 0;
        let raw_text = loop {
            match self.attempt(&body) {
                Ok(text) => break text,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) if retries < self.endpoint.max_retries => {
                    tracing::warn!(%reason, retry = retries + 1, "teacher call failed, backing off");
                    std::thread::sleep(delay);
                    delay *= 2;
                    retries += 1;
                }
                Err(Attempt::Retry(reason)) => {
                    return Err(Error::TeacherUnavailable(format!(
                        "{reason} (after {} attempts)",
                        retries + 1
                    )))
                }
            }
        };
        let label = canonicalize(&raw_text, &self.context.space)?;
        Ok(TeacherResponse {
            label: self.context.space.name(label).to_string(),
            raw_text,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            cost_units: self.endpoint.cost_units,
        })
    }
}

impl Teacher for LiveTeacher {
    fn ask(&self, instance: &Instance) -> Result<TeacherResponse> {
        self.call_live(&self.context.bundle(instance))
    }

    fn label_space(&self) -> &LabelSpace {
        &self.context.space
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub id: String,
    pub prompt_hash: String,
    pub raw_text: String,
    pub label: String,
}

/// JSONL store of recorded teacher replies keyed by instance id. The last
/// record for an id wins.
#[derive(Debug)]
pub struct FixtureStore {
    path: PathBuf,
    records: RwLock<HashMap<String, FixtureRecord>>,
    writer: Mutex<()>,
}

impl FixtureStore {
    /// Opens `path`, reading existing records; a missing file is an empty store.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = HashMap::new();
        match File::open(path) {
            Ok(file) => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: FixtureRecord =
                        serde_json::from_str(&line).map_err(|e| Error::format(path, i as u64 + 1, e))?;
                    records.insert(record.id.clone(), record);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(Self {
            path: path.to_path_buf(),
            records: RwLock::new(records),
            writer: Mutex::new(()),
        })
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str, prompt_hash: &str) -> Result<FixtureRecord> {
        let records = self.records.read().unwrap_or_else(|e| e.into_inner());
        match records.get(id) {
            Some(r) if r.prompt_hash == prompt_hash => Ok(r.clone()),
            _ => Err(Error::FixtureMiss {
                id: id.to_string(),
                prompt_hash: prompt_hash.to_string(),
            }),
        }
    }

    /// Appends one line with a single write so concurrent writers never
    /// interleave partial records.
    pub fn record(&self, record: FixtureRecord) -> Result<()> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.records
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(record.id.clone(), record);
        Ok(())
    }
}

/// Answers from a fixture store only.
pub struct ReplayTeacher {
    context: PromptContext,
    store: FixtureStore,
}

impl ReplayTeacher {
    pub fn new(context: PromptContext, store: FixtureStore) -> Self {
        Self { context, store }
    }
}

pub fn call_replay(context: &PromptContext, store: &FixtureStore, instance: &Instance) -> Result<TeacherResponse> {
    let hash = context.bundle(instance).hash();
    let record = store.get(&instance.id, &hash)?;
    let label = canonicalize(&record.raw_text, &context.space)?;
    Ok(TeacherResponse {
        label: context.space.name(label).to_string(),
        raw_text: record.raw_text,
        latency_ms: 0.0,
        cost_units: 1.0,
    })
}

impl Teacher for ReplayTeacher {
    fn ask(&self, instance: &Instance) -> Result<TeacherResponse> {
        call_replay(&self.context, &self.store, instance)
    }

    fn label_space(&self) -> &LabelSpace {
        &self.context.space
    }
}

/// Wraps another teacher and appends every reply, including unparseable
/// ones, to a fixture store.
pub struct RecordingTeacher<T> {
    inner: T,
    context: PromptContext,
    store: FixtureStore,
}

impl<T: Teacher> RecordingTeacher<T> {
    pub fn new(inner: T, context: PromptContext, store: FixtureStore) -> Self {
        Self { inner, context, store }
    }
}

impl<T: Teacher> Teacher for RecordingTeacher<T> {
    fn ask(&self, instance: &Instance) -> Result<TeacherResponse> {
        let hash = self.context.bundle(instance).hash();
        let result = self.inner.ask(instance);
        let (raw_text, label) = match &result {
            Ok(r) => (r.raw_text.clone(), r.label.clone()),
            Err(Error::TeacherProtocol { raw_text }) => (raw_text.clone(), String::new()),
            Err(_) => return result,
        };
        self.store.record(FixtureRecord {
            id: instance.id.clone(),
            prompt_hash: hash,
            raw_text,
            label,
        })?;
        result
    }

    fn label_space(&self) -> &LabelSpace {
        self.inner.label_space()
    }
}
