//! Cheap local students. Both produce a label distribution, its entropy, and
//! the distance from the query to the weighted centroid of its cached
//! neighborhood; the gate consumes the last two.

mod knn;
mod mlp;

use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::domain::Embedding;
use crate::error::Result;

pub use knn::{knn_class_probs, knn_predict, weighted_centroid};
pub use mlp::{Gradients, MlpConfig, MlpModel, Optimizer, TrainingSet};

/// Which classes the k-NN softmax ranges over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyDomain {
    /// Only labels present among the neighbors.
    #[default]
    Present,
    /// Every label in the space; absent labels contribute `exp(0)`.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentPrediction {
    pub label: usize,
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub centroid_distance: f64,
    pub neighbors_used: usize,
}

impl StudentPrediction {
    pub fn from_probs(probs: Vec<f64>, centroid_distance: f64, neighbors_used: usize) -> Self {
        Self {
            label: argmax(&probs),
            entropy: entropy(&probs),
            probs,
            centroid_distance,
            neighbors_used,
        }
    }
}

/// Shannon entropy in nats over the nonzero components.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Knn,
    Mlp,
}

/// A student together with its retraining state.
#[derive(Debug, Clone)]
pub enum Student {
    Knn,
    Mlp {
        config: MlpConfig,
        model: Option<MlpModel>,
        calls_since_train: usize,
        trainings: usize,
    },
}

impl Student {
    /// Builds the student and, for the MLP, trains it on whatever the cache
    /// already holds.
    pub fn new(kind: StudentKind, mlp: Option<&MlpConfig>, cache: &Cache) -> Result<Self> {
        match kind {
            StudentKind::Knn => Ok(Student::Knn),
            StudentKind::Mlp => {
                let config = mlp.cloned().unwrap_or_default();
                let mut student = Student::Mlp {
                    config,
                    model: None,
                    calls_since_train: 0,
                    trainings: 0,
                };
                student.retrain(cache)?;
                Ok(student)
            }
        }
    }

    pub fn kind(&self) -> StudentKind {
        match self {
            Student::Knn => StudentKind::Knn,
            Student::Mlp { .. } => StudentKind::Mlp,
        }
    }

    /// The centroid distance always comes from the k-NN neighborhood; for the
    /// MLP only the distribution and entropy come from the network. Without a
    /// trained network the MLP student cannot predict and reports
    /// [`crate::Error::EmptyTraining`].
    pub fn predict(
        &self,
        cache: &Cache,
        query: &Embedding,
        k: usize,
        domain: EntropyDomain,
    ) -> Result<StudentPrediction> {
        match self {
            Student::Knn => knn_predict(cache, query, k, domain),
            Student::Mlp { model, .. } => {
                let neighbors = cache.k_nearest(query, k)?;
                let centroid_distance = knn::centroid_distance(query, &neighbors)?;
                let model = model.as_ref().ok_or(crate::Error::EmptyTraining)?;
                let probs = model.predict_proba(query.as_slice());
                Ok(StudentPrediction::from_probs(probs, centroid_distance, neighbors.len()))
            }
        }
    }

    /// Called after every teacher call, once the new entry is in the cache.
    /// Returns true when the model was rebuilt. The k-NN student reads the
    /// cache directly and never retrains.
    pub fn maybe_retrain(&mut self, cache: &Cache) -> Result<bool> {
        match self {
            Student::Knn => Ok(false),
            Student::Mlp {
                config,
                model,
                calls_since_train,
                ..
            } => {
                *calls_since_train += 1;
                if model.is_none() || *calls_since_train >= config.retrain_every {
                    self.retrain(cache)
                } else {
                    Ok(false)
                }
            }
        }
    }

    fn retrain(&mut self, cache: &Cache) -> Result<bool> {
        let Student::Mlp {
            config,
            model,
            calls_since_train,
            trainings,
        } = self
        else {
            return Ok(false);
        };
        let set = TrainingSet::from_cache(cache);
        if set.is_empty() {
            return Ok(false);
        }
        *model = Some(MlpModel::train(&set, None, cache.labels().len(), config)?);
        *calls_since_train = 0;
        *trainings += 1;
        Ok(true)
    }

    pub fn trainings(&self) -> usize {
        match self {
            Student::Knn => 0,
            Student::Mlp { trainings, .. } => *trainings,
        }
    }
}
