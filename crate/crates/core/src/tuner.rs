//! Threshold search: a lattice head start followed by a tree-structured
//! Parzen estimator over the two gate thresholds.
//!
//! The estimator treats each dimension independently. The history is split at
//! the gamma quantile of the objective into a good and a bad set; each set
//! gives a mixture of truncated Gaussians plus a uniform prior component, all
//! weighted `1/(n+1)`. Candidates are drawn from the good mixture and the one
//! maximizing `ln l(x) - ln g(x)` is proposed.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::domain::EmbeddedInstance;
use crate::error::{Error, Result};
use crate::gate::Thresholds;
use crate::ingest::Stream;
use crate::metrics::{accuracy, discounted};
use crate::router::{Router, RouterConfig};
use crate::teachers::Teacher;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub t_c: (f64, f64),
    pub t_h: (f64, f64),
}

impl SearchSpace {
    /// `t_c` in `[0, 2]`, `t_h` in `[0, ln L]`.
    pub fn for_labels(label_count: usize) -> Self {
        Self {
            t_c: (0.0, 2.0),
            t_h: (0.0, (label_count as f64).ln()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("t_c", self.t_c), ("t_h", self.t_h)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("{name} bounds must satisfy lo < hi")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, th: Thresholds) -> bool {
        (self.t_c.0..=self.t_c.1).contains(&th.t_c) && (self.t_h.0..=self.t_h.1).contains(&th.t_h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// Lattice points per dimension for the head start.
    pub resolution: usize,
    /// Estimator trials after the lattice.
    pub n_trials: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            resolution: 10,
            n_trials: 50,
            gamma: 0.25,
            n_candidates: 24,
            seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1)".into()));
        }
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunerObservation {
    pub trial: usize,
    pub thresholds: Thresholds,
    pub objective: f64,
}

/// `resolution` evenly spaced values including both bounds.
pub fn lattice(bounds: (f64, f64), resolution: usize) -> Vec<f64> {
    let (lo, hi) = bounds;
    let last = resolution - 1;
    (0..resolution)
        .map(|i| {
            if i == last {
                hi
            } else {
                lo + (hi - lo) * i as f64 / last as f64
            }
        })
        .collect()
}

/// Lattice points in scan order: `t_c` outer, `t_h` inner.
pub fn grid_points(space: &SearchSpace, resolution: usize) -> Vec<Thresholds> {
    let hs = lattice(space.t_h, resolution);
    lattice(space.t_c, resolution)
        .into_iter()
        .flat_map(|c| hs.iter().map(move |&h| Thresholds::new(c, h)))
        .collect()
}

/// Evaluates the lattice; points may run in parallel, results keep scan order.
pub fn grid_search<F>(space: &SearchSpace, resolution: usize, evaluator: &F) -> Result<Vec<TunerObservation>>
where
    F: Fn(Thresholds) -> Result<f64> + Sync,
{
    grid_points(space, resolution)
        .into_par_iter()
        .enumerate()
        .map(|(trial, th)| {
            Ok(TunerObservation {
                trial,
                thresholds: th,
                objective: finite(evaluator(th)?, th)?,
            })
        })
        .collect()
}

fn finite(v: f64, th: Thresholds) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!(
            "objective at ({}, {}) is not finite",
            th.t_c, th.t_h
        )))
    }
}

/// One-dimensional Parzen mixture on `[lo, hi]`.
struct Parzen {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigma: f64,
}

impl Parzen {
    fn fit(points: &[f64], lo: f64, hi: f64) -> Self {
        let range = hi - lo;
        let n = points.len() as f64;
        let mean = points.iter().sum::<f64>() / n;
        let var = points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        let scott = 1.06 * var.sqrt() * n.powf(-0.2);
        Self {
            lo,
            hi,
            mus: points.to_vec(),
            sigma: scott.clamp(range * 0.01, range),
        }
    }

    fn components(&self) -> f64 {
        self.mus.len() as f64 + 1.0
    }

    fn density(&self, x: f64) -> f64 {
        let w = 1.0 / self.components();
        let uniform = 1.0 / (self.hi - self.lo);
        let kernels: f64 = self
            .mus
            .iter()
            .map(|&mu| truncated_normal_pdf(x, mu, self.sigma, self.lo, self.hi))
            .sum();
        w * (uniform + kernels)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let pick = rng.random_range(0..self.mus.len() + 1);
        if pick == self.mus.len() {
            return rng.random_range(self.lo..=self.hi);
        }
        let mu = self.mus[pick];
        for _ in 0..64 {
            let z: f64 = StandardNormal.sample(rng);
            let x = mu + self.sigma * z;
            if (self.lo..=self.hi).contains(&x) {
                return x;
            }
        }
        mu.clamp(self.lo, self.hi)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

fn truncated_normal_pdf(x: f64, mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if !(lo..=hi).contains(&x) {
        return 0.0;
    }
    let z = (x - mu) / sigma;
    let pdf = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mass = normal_cdf((hi - mu) / sigma) - normal_cdf((lo - mu) / sigma);
    pdf / mass.max(1e-300)
}

/// Next point to evaluate; deterministic per (history, seed, trial).
pub fn tpe_suggest(history: &[TunerObservation], space: &SearchSpace, cfg: &TpeConfig, trial: usize) -> Thresholds {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);

    let mut ranked: Vec<&TunerObservation> = history.iter().collect();
    ranked.sort_by(|a, b| b.objective.total_cmp(&a.objective).then(a.trial.cmp(&b.trial)));
    let n_good = good_count(ranked.len(), cfg.gamma);
    if ranked.len() < 2 || n_good >= ranked.len() {
        return Thresholds::new(
            rng.random_range(space.t_c.0..=space.t_c.1),
            rng.random_range(space.t_h.0..=space.t_h.1),
        );
    }
    let (good, bad) = ranked.split_at(n_good);
    let fit = |set: &[&TunerObservation], pick: fn(&Thresholds) -> f64, (lo, hi): (f64, f64)| {
        Parzen::fit(&set.iter().map(|o| pick(&o.thresholds)).collect::<Vec<_>>(), lo, hi)
    };
    let dims = [
        (fit(good, |t| t.t_c, space.t_c), fit(bad, |t| t.t_c, space.t_c)),
        (fit(good, |t| t.t_h, space.t_h), fit(bad, |t| t.t_h, space.t_h)),
    ];

    let mut best = (f64::NEG_INFINITY, Thresholds::new(space.t_c.0, space.t_h.0));
    for _ in 0..cfg.n_candidates {
        let x = [dims[0].0.sample(&mut rng), dims[1].0.sample(&mut rng)];
        let score: f64 = dims
            .iter()
            .zip(x)
            .map(|((l, g), v)| l.density(v).ln() - g.density(v).ln())
            .sum();
        if score > best.0 {
            best = (score, Thresholds::new(x[0], x[1]));
        }
    }
    best.1
}

/// `max(1, ceil(gamma * n))`
pub fn good_count(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub t_c: Vec<f64>,
    pub t_h: Vec<f64>,
    /// `values[i][j]` is the objective at `(t_c[i], t_h[j])`.
    pub values: Vec<Vec<f64>>,
}

impl Contour {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Config(e.to_string());
        out.write_record(["t_c", "t_h", "objective"]).map_err(err)?;
        for (i, c) in self.t_c.iter().enumerate() {
            for (j, h) in self.t_h.iter().enumerate() {
                out.write_record([c.to_string(), h.to_string(), self.values[i][j].to_string()])
                    .map_err(err)?;
            }
        }
        out.flush().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best: TunerObservation,
    pub observations: Vec<TunerObservation>,
    pub contour: Contour,
}

/// Lattice then `cfg.n_trials` estimator trials. The best observation is the
/// first one attaining the maximum objective.
pub fn tune<F>(space: &SearchSpace, cfg: &TpeConfig, evaluator: &F) -> Result<TuningResult>
where
    F: Fn(Thresholds) -> Result<f64> + Sync,
{
    space.validate()?;
    cfg.validate()?;
    let mut observations = grid_search(space, cfg.resolution, evaluator)?;
    let contour = Contour {
        t_c: lattice(space.t_c, cfg.resolution),
        t_h: lattice(space.t_h, cfg.resolution),
        values: observations
            .chunks(cfg.resolution)
            .map(|row| row.iter().map(|o| o.objective).collect())
            .collect(),
    };
    for _ in 0..cfg.n_trials {
        let trial = observations.len();
        let th = tpe_suggest(&observations, space, cfg, trial);
        observations.push(TunerObservation {
            trial,
            thresholds: th,
            objective: finite(evaluator(th)?, th)?,
        });
    }
    let best = *observations
        .iter()
        .reduce(|best, o| if o.objective > best.objective { o } else { best })
        .expect("lattice is nonempty");
    Ok(TuningResult {
        best,
        observations,
        contour,
    })
}

/// Outcome of one pass over the dev stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevOutcome {
    pub accuracy: f64,
    pub calls: u64,
    pub served: u64,
}

impl DevOutcome {
    pub fn objective(&self, lambda: f64) -> Result<f64> {
        Ok(discounted(self.accuracy, self.calls, self.served, lambda)?.phi_hat)
    }
}

/// Runs the online loop over `dev` from a fresh copy of `seed`.
pub fn dev_outcome(
    th: Thresholds,
    dev: &Stream<EmbeddedInstance>,
    seed: &Cache,
    router: &RouterConfig,
    teacher: &dyn Teacher,
) -> Result<DevOutcome> {
    if dev.items.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let config = RouterConfig {
        thresholds: th,
        ..router.clone()
    };
    let mut r = Router::new(seed.clone(), config)?;
    let trace = r.run_stream(dev, teacher).map_err(|a| a.error)?;
    Ok(DevOutcome {
        accuracy: accuracy(&trace)?,
        calls: trace.calls(),
        served: trace.served(),
    })
}

/// Discounted accuracy on the dev stream at `th`.
pub fn evaluate_thresholds(
    th: Thresholds,
    dev: &Stream<EmbeddedInstance>,
    seed: &Cache,
    router: &RouterConfig,
    teacher: &dyn Teacher,
    lambda: f64,
) -> Result<f64> {
    dev_outcome(th, dev, seed, router, teacher)?.objective(lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub lambda: f64,
    pub space: SearchSpace,
    pub config: TpeConfig,
    pub best: TunerObservation,
    pub observations: Vec<TunerObservation>,
    pub contour: Contour,
}

impl TuningReport {
    pub fn new(lambda: f64, space: SearchSpace, config: TpeConfig, result: TuningResult) -> Self {
        Self {
            lambda,
            space,
            config,
            best: result.best,
            observations: result.observations,
            contour: result.contour,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic(th: Thresholds) -> Result<f64> {
        Ok(-(th.t_c - 1.0).powi(2) - (th.t_h - 2.0).powi(2))
    }

    #[test]
    fn lattice_includes_bounds() {
        let v = lattice((0.0, 2.0), 10);
        assert_eq!(v.len(), 10);
        assert_eq!((v[0], v[9]), (0.0, 2.0));
        assert!((v[1] - 2.0 / 9.0).abs() < 1e-15);
        let space = SearchSpace::for_labels(77);
        assert_eq!(grid_points(&space, 10).len(), 100);
        let corners = grid_points(&space, 2);
        assert_eq!(corners.len(), 4);
        assert_eq!(corners[1], Thresholds::new(0.0, 77f64.ln()));
    }

    #[test]
    fn constant_objective_picks_first_lattice_point() {
        let space = SearchSpace::for_labels(77);
        let cfg = TpeConfig {
            n_trials: 10,
            ..TpeConfig::default()
        };
        let r = tune(&space, &cfg, &|_| Ok(0.5)).unwrap();
        assert_eq!(r.best.trial, 0);
        assert_eq!(r.best.thresholds, Thresholds::new(0.0, 0.0));
        assert_eq!(r.observations.len(), 110);
    }

    #[test]
    fn zero_trials_is_grid_argmax() {
        let space = SearchSpace::for_labels(77);
        let cfg = TpeConfig {
            n_trials: 0,
            ..TpeConfig::default()
        };
        let r = tune(&space, &cfg, &quadratic).unwrap();
        let grid = grid_search(&space, 10, &quadratic).unwrap();
        let mut argmax = &grid[0];
        for o in &grid {
            if o.objective > argmax.objective {
                argmax = o;
            }
        }
        assert_eq!(r.best, *argmax);
        assert_eq!(r.contour.values.len(), 10);
        assert_eq!(r.contour.values[3][4], grid[34].objective);
    }

    #[test]
    fn quantile_split() {
        assert_eq!(good_count(4, 0.25), 1);
        assert_eq!(good_count(100, 0.25), 25);
        assert_eq!(good_count(1, 0.25), 1);
    }

    #[test]
    fn tuning_is_deterministic() {
        let space = SearchSpace::for_labels(10);
        let cfg = TpeConfig {
            n_trials: 20,
            seed: 4,
            ..TpeConfig::default()
        };
        assert_eq!(
            tune(&space, &cfg, &quadratic).unwrap(),
            tune(&space, &cfg, &quadratic).unwrap()
        );
    }

    #[test]
    fn truncated_pdf_integrates_to_one() {
        let (lo, hi, mu, sigma) = (0.0, 2.0, 1.7, 0.4);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let integral: f64 = (0..n)
            .map(|i| truncated_normal_pdf(lo + (i as f64 + 0.5) * h, mu, sigma, lo, hi) * h)
            .sum();
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    proptest! {
        #[test]
        fn suggestions_stay_in_bounds(
            seed in 0u64..1000,
            trial in 0usize..500,
            objs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -5.0f64..5.0), 0..30),
        ) {
            let space = SearchSpace { t_c: (0.0, 2.0), t_h: (0.0, 0.7) };
            let history: Vec<_> = objs.iter().enumerate().map(|(i, &(a, b, o))| TunerObservation {
                trial: i,
                thresholds: Thresholds::new(a * 2.0, b * 0.7),
                objective: o,
            }).collect();
            let cfg = TpeConfig { seed, ..TpeConfig::default() };
            let s = tpe_suggest(&history, &space, &cfg, trial);
            prop_assert!(space.contains(s));
            prop_assert_eq!(s, tpe_suggest(&history, &space, &cfg, trial));
        }
    }
}
