//! One-hidden-layer perceptron student: ReLU, dropout, softmax output,
//! cross-entropy loss, mini-batch training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Teacher calls between retrainings.
    pub retrain_every: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Epochs without dev-loss improvement before stopping; only used when a
    /// dev set is supplied.
    pub patience: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_units: 1024,
            dropout_rate: 0.22,
            learning_rate: 1.6e-5,
            epochs: 200,
            batch_size: 32,
            retrain_every: 100,
            seed: 0,
            optimizer: Optimizer::Adam,
            patience: 20,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mlp: {m}")));
        if self.hidden_units == 0 || self.epochs == 0 || self.batch_size == 0 || self.retrain_every == 0 {
            return bad("hidden_units, epochs, batch_size and retrain_every must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Dense inputs and class indices.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl TrainingSet {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Self {
        assert_eq!(x.nrows(), y.len());
        Self { x, y }
    }

    /// Valid cache entries in insertion order.
    pub fn from_cache(cache: &Cache) -> Self {
        let dim = cache.dim().unwrap_or(0);
        let valid: Vec<_> = cache.valid_entries().collect();
        let mut x = Array2::zeros((valid.len(), dim));
        let mut y = Vec::with_capacity(valid.len());
        for (row, entry) in valid.iter().enumerate() {
            x.row_mut(row)
                .iter_mut()
                .zip(entry.embedded.embedding.as_slice())
                .for_each(|(dst, src)| *dst = *src);
            y.push(entry.teacher_label.expect("valid entry"));
        }
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    /// Same layout as [`MlpModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// input × hidden
    w1: Array2<f64>,
    b1: Array1<f64>,
    /// hidden × classes
    w2: Array2<f64>,
    b2: Array1<f64>,
    seed: u64,
}

struct Forward {
    pre: Array2<f64>,
    hidden: Array2<f64>,
    probs: Array2<f64>,
}

impl MlpModel {
    /// He-style uniform initialization, zero biases.
    pub fn init(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let limit = (6.0 / rows as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
        };
        let w1 = uniform(input_dim, hidden);
        let w2 = uniform(hidden, classes);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(classes),
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_units(&self) -> usize {
        self.w1.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w2.ncols()
    }

    /// Trains a fresh model. With `dev` supplied, training stops once the dev
    /// loss has not improved for `config.patience` epochs and the best
    /// weights seen are returned.
    pub fn train(set: &TrainingSet, dev: Option<&TrainingSet>, classes: usize, config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        if set.is_empty() {
            return Err(Error::EmptyTraining);
        }
        if let Some(&bad) = set.y.iter().find(|&&y| y >= classes) {
            return Err(Error::UnknownLabel(format!("#{bad}")));
        }
        let mut model = Self::init(set.x.ncols(), config.hidden_units, classes, config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let mut optimizer = OptimizerState::new(config, &model);
        let mut order: Vec<usize> = (0..set.len()).collect();

        let mut best: Option<(f64, MlpModel)> = None;
        let mut stale = 0;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let x = set.x.select(Axis(0), batch);
                let y: Vec<usize> = batch.iter().map(|&i| set.y[i]).collect();
                let (_, grads) = model.loss_and_gradients(x.view(), &y, Some((&mut rng, config.dropout_rate)));
                optimizer.step(&mut model, &grads);
            }
            if let Some(dev) = dev.filter(|d| !d.is_empty()) {
                let loss = model.loss(dev.x.view(), &dev.y);
                match &best {
                    Some((best_loss, _)) if loss >= *best_loss => {
                        stale += 1;
                        if stale >= config.patience {
                            break;
                        }
                    }
                    _ => {
                        best = Some((loss, model.clone()));
                        stale = 0;
                    }
                }
            }
        }
        Ok(best.map(|(_, m)| m).unwrap_or(model))
    }

    fn forward(&self, x: ArrayView2<'_, f64>, mut dropout: Option<(&mut ChaCha8Rng, f64)>) -> Forward {
        let pre = x.dot(&self.w1) + &self.b1;
        let mut hidden = pre.mapv(|v| v.max(0.0));
        if let Some((rng, rate)) = dropout.as_mut() {
            if *rate > 0.0 {
                let keep = 1.0 - *rate;
                hidden.mapv_inplace(|h| if rng.random::<f64>() < keep { h / keep } else { 0.0 });
            }
        }
        let mut probs = hidden.dot(&self.w2) + &self.b2;
        for mut row in probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        Forward { pre, hidden, probs }
    }

    /// Mean cross-entropy without dropout.
    pub fn loss(&self, x: ArrayView2<'_, f64>, y: &[usize]) -> f64 {
        let fwd = self.forward(x, None);
        mean_cross_entropy(&fwd.probs, y)
    }

    /// Mean cross-entropy and its gradient. Dropout is applied when
    /// `dropout` carries an RNG and a positive rate.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[usize],
        dropout: Option<(&mut ChaCha8Rng, f64)>,
    ) -> (f64, Gradients) {
        let fwd = self.forward(x, dropout);
        let loss = mean_cross_entropy(&fwd.probs, y);
        let n = y.len() as f64;

        let mut d_logits = fwd.probs;
        for (mut row, &label) in d_logits.rows_mut().into_iter().zip(y) {
            row[label] -= 1.0;
        }
        d_logits.mapv_inplace(|v| v / n);

        let w2 = fwd.hidden.t().dot(&d_logits);
        let b2 = d_logits.sum_axis(Axis(0));
        let mut d_hidden = d_logits.dot(&self.w2.t());
        // `hidden` already holds the dropout mask and its rescaling; the ReLU
        // gate comes from the pre-activation.
        ndarray::Zip::from(&mut d_hidden)
            .and(&fwd.hidden)
            .and(&fwd.pre)
            .for_each(|d, &h, &p| {
                *d = if p > 0.0 { *d * h / p } else { 0.0 };
            });
        let w1 = x.t().dot(&d_hidden);
        let b1 = d_hidden.sum_axis(Axis(0));
        (loss, Gradients { w1, b1, w2, b2 })
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(view, None).probs.row(0).to_vec()
    }

    /// All weights flattened as w1, b1, w2, b2 (row-major).
    pub fn parameters(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) {
        let total = self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len();
        assert_eq!(values.len(), total, "parameter count");
        let mut it = values.iter().copied();
        for p in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *p = it.next().expect("length checked");
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &ModelFile::from(self))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let stored: ModelFile =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.line() as u64, e))?;
        stored.into_model().map_err(|m| Error::format(path, 0, m))
    }
}

fn mean_cross_entropy(probs: &Array2<f64>, y: &[usize]) -> f64 {
    let total: f64 = probs
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &label)| -row[label].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / y.len() as f64
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    input_dim: usize,
    hidden_units: usize,
    classes: usize,
    seed: u64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl From<&MlpModel> for ModelFile {
    fn from(m: &MlpModel) -> Self {
        Self {
            version: 1,
            input_dim: m.input_dim(),
            hidden_units: m.hidden_units(),
            classes: m.classes(),
            seed: m.seed,
            w1: m.w1.iter().copied().collect(),
            b1: m.b1.to_vec(),
            w2: m.w2.iter().copied().collect(),
            b2: m.b2.to_vec(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> std::result::Result<MlpModel, String> {
        if self.version != 1 {
            return Err(format!("unsupported version {}", self.version));
        }
        let w1 = Array2::from_shape_vec((self.input_dim, self.hidden_units), self.w1).map_err(|e| e.to_string())?;
        let w2 = Array2::from_shape_vec((self.hidden_units, self.classes), self.w2).map_err(|e| e.to_string())?;
        if self.b1.len() != self.hidden_units || self.b2.len() != self.classes {
            return Err("bias length mismatch".into());
        }
        Ok(MlpModel {
            w1,
            b1: Array1::from(self.b1),
            w2,
            b2: Array1::from(self.b2),
            seed: self.seed,
        })
    }
}

enum OptimizerState {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        t: i32,
        m: Gradients,
        v: Gradients,
    },
}

impl OptimizerState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(config: &MlpConfig, model: &MlpModel) -> Self {
        let zeros = || Gradients {
            w1: Array2::zeros(model.w1.raw_dim()),
            b1: Array1::zeros(model.b1.raw_dim()),
            w2: Array2::zeros(model.w2.raw_dim()),
            b2: Array1::zeros(model.b2.raw_dim()),
        };
        match config.optimizer {
            Optimizer::Sgd => OptimizerState::Sgd {
                lr: config.learning_rate,
            },
            Optimizer::Adam => OptimizerState::Adam {
                lr: config.learning_rate,
                t: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    fn step(&mut self, model: &mut MlpModel, g: &Gradients) {
        match self {
            OptimizerState::Sgd { lr } => {
                model.w1.scaled_add(-*lr, &g.w1);
                model.b1.scaled_add(-*lr, &g.b1);
                model.w2.scaled_add(-*lr, &g.w2);
                model.b2.scaled_add(-*lr, &g.b2);
            }
            OptimizerState::Adam { lr, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t);
                let c2 = 1.0 - Self::BETA2.powi(*t);
                let step = *lr * c2.sqrt() / c1;
                let eps = Self::EPS * c2.sqrt();
                macro_rules! adam {
                    ($p:expr, $g:expr, $m:expr, $v:expr) => {
                        ndarray::Zip::from(&mut $p)
                            .and(&$g)
                            .and(&mut $m)
                            .and(&mut $v)
                            .for_each(|p, &g, m, v| {
                                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                                *p -= step * *m / (v.sqrt() + eps);
                            })
                    };
                }
                adam!(model.w1, g.w1, m.w1, v.w1);
                adam!(model.b1, g.b1, m.b1, v.b1);
                adam!(model.w2, g.w2, m.w2, v.w2);
                adam!(model.b2, g.b2, m.b2, v.b2);
            }
        }
    }
}
