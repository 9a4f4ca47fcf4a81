//! Text encoders for live serving. Simulation reads precomputed vectors and
//! never embeds.

use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::domain::Embedding;
use crate::error::{Error, Result};

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Seeded feature hashing of lowercase word unigrams and bigrams into a
/// unit-norm vector. Equal texts map to equal vectors.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(feature.as_bytes())
            .finalize();
        let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((idx % self.dim as u64) as usize, sign)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut add = |feature: &str| {
            let (i, s) = self.bucket(feature);
            v[i] += s;
        };
        if tokens.is_empty() {
            add("\u{0}empty");
        }
        for t in &tokens {
            add(t);
        }
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
        if v.iter().all(|x| *x == 0.0) {
            v[self.bucket(&lower).0] = 1.0;
        }
        Embedding::normalized(v)
    }
}

/// Remote encoder: POST `{"input": text}` and read either `{"embedding": [..]}`
/// or `{"data": [{"embedding": [..]}]}`.
#[derive(Debug)]
pub struct HttpEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingReply {
    Flat { embedding: Vec<f64> },
    Data { data: Vec<DataItem> },
}

#[derive(Deserialize)]
struct DataItem {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        Self {
            url: url.into(),
            dim,
            agent,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let reply: EmbeddingReply = self
            .agent
            .post(&self.url)
            .send_json(serde_json::json!({ "input": text }))
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Config(format!("embedder {}: {e}", self.url)))?;
        let values = match reply {
            EmbeddingReply::Flat { embedding } => embedding,
            EmbeddingReply::Data { mut data } if !data.is_empty() => data.swap_remove(0).embedding,
            EmbeddingReply::Data { .. } => return Err(Error::Config("embedder returned no vectors".into())),
        };
        if values.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: values.len(),
            });
        }
        Embedding::normalized(values)
    }
}
