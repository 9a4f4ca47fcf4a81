//! Gaussian-cluster datasets with ready-made embeddings, for offline runs
//! without an encoder.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Embedding, Instance, LabelSpace};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, Embeddings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Items per class in the train pool the few-shot split draws from.
    pub train_per_class: usize,
    /// Test items, assigned to classes round-robin.
    pub test_size: usize,
    /// Per-coordinate noise scale relative to a unit-norm class center,
    /// multiplied by `1/sqrt(dim)`.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 64,
            train_per_class: 40,
            test_size: 2000,
            spread: 2.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub embeddings: Embeddings,
}

const WORDS: [&str; 12] = [
    "please", "card", "account", "transfer", "money", "help", "need", "why", "my", "the", "still", "pending",
];

pub fn class_name(i: usize) -> String {
    format!("class_{i:02}")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.classes < 2 || spec.dim == 0 {
        return Err(Error::Config(
            "synthetic data needs at least 2 classes and dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let space = LabelSpace::new((0..spec.classes).map(class_name))?;
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| Embedding::normalized(gaussian(&mut rng, spec.dim)).map(Embedding::into_inner))
        .collect::<Result<_>>()?;
    let scale = spec.spread / (spec.dim as f64).sqrt();
    let mut embeddings = Embeddings::new(spec.dim);

    let mut draw = |id: String, class: usize, rng: &mut ChaCha8Rng| -> Result<Instance> {
        let v: Vec<f64> = centers[class]
            .iter()
            .zip(gaussian(rng, spec.dim))
            .map(|(c, z)| c + scale * z)
            .collect();
        embeddings.insert(id.clone(), Embedding::normalized(v)?)?;
        let words = rng.random_range(3..12);
        let text = (0..words)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Instance::new(id, text).with_gold(class_name(class)))
    };

    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    for class in 0..spec.classes {
        for j in 0..spec.train_per_class {
            train.push(draw(format!("tr-{class:02}-{j:04}"), class, &mut rng)?);
        }
    }
    let test = (0..spec.test_size)
        .map(|j| draw(format!("te-{j:05}"), j % spec.classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticData {
        train: Dataset {
            name: "synthetic-train".into(),
            label_space: space.clone(),
            items: train,
        },
        test: Dataset {
            name: "synthetic-test".into(),
            label_space: space,
            items: test,
        },
        embeddings,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Writes `{id, text, label}` JSONL.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        text: &'a str,
        label: &'a str,
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for item in &dataset.items {
        let row = Row {
            id: &item.id,
            text: &item.text,
            label: item.gold_label.as_deref().unwrap_or(""),
        };
        writeln!(out, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `{id, vector}` JSONL for `ids` in order.
pub fn write_embeddings<'a>(
    embeddings: &Embeddings,
    ids: impl IntoIterator<Item = &'a str>,
    path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        id: &'a str,
        vector: &'a [f64],
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for id in ids {
        let vector = embeddings
            .get(id)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))?
            .as_slice();
        writeln!(out, "{}", serde_json::to_string(&Record { id, vector })?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
