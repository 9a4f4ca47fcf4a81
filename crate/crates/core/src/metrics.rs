//! Run traces and the cost-discounted evaluation measure
//! `phi_hat = phi - lambda * M / N`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Student,
    Teacher,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Student => "student",
            Source::Teacher => "teacher",
        }
    }
}

/// One served instance. `calls` and `served` are cumulative (M and N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub id: String,
    pub decision: Source,
    /// Served label; `None` when the teacher reply was unusable.
    pub predicted: Option<String>,
    pub gold: Option<String>,
    pub distance: f64,
    pub entropy: f64,
    pub calls: u64,
    pub served: u64,
}

impl TraceStep {
    pub fn correct(&self) -> Option<bool> {
        self.gold.as_ref().map(|g| self.predicted.as_ref() == Some(g))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub steps: Vec<TraceStep>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// N
    pub fn served(&self) -> u64 {
        self.steps.len() as u64
    }

    /// M
    pub fn calls(&self) -> u64 {
        self.steps.iter().filter(|s| s.decision == Source::Teacher).count() as u64
    }

    pub fn rho(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyTrace);
        }
        Ok(self.calls() as f64 / self.served() as f64)
    }

    /// Checks the cumulative counters against the decisions.
    pub fn check_counters(&self) -> Result<()> {
        let mut calls = 0;
        for (i, step) in self.steps.iter().enumerate() {
            if step.decision == Source::Teacher {
                calls += 1;
            }
            if step.served != i as u64 + 1 || step.calls != calls || step.calls > step.served {
                return Err(Error::TraceShape(format!("counter mismatch at step {i}")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::TraceShape(e.to_string());
        out.write_record([
            "step",
            "id",
            "decision",
            "predicted",
            "gold",
            "correct",
            "distance",
            "entropy",
            "M",
            "N",
        ])
        .map_err(csv_err)?;
        for s in &self.steps {
            let correct = match s.correct() {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            out.write_record([
                s.step.to_string().as_str(),
                &s.id,
                s.decision.as_str(),
                s.predicted.as_deref().unwrap_or(""),
                s.gold.as_deref().unwrap_or(""),
                correct,
                &s.distance.to_string(),
                &s.entropy.to_string(),
                &s.calls.to_string(),
                &s.served.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::TraceShape(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            step: usize,
            id: String,
            decision: Source,
            predicted: String,
            gold: String,
            distance: f64,
            entropy: f64,
            #[serde(rename = "M")]
            calls: u64,
            #[serde(rename = "N")]
            served: u64,
        }
        let mut input = csv::Reader::from_reader(reader);
        let mut steps = Vec::new();
        for row in input.deserialize::<Row>() {
            let row = row.map_err(|e| Error::TraceShape(e.to_string()))?;
            let opt = |s: String| if s.is_empty() { None } else { Some(s) };
            steps.push(TraceStep {
                step: row.step,
                id: row.id,
                decision: row.decision,
                predicted: opt(row.predicted),
                gold: opt(row.gold),
                distance: row.distance,
                entropy: row.entropy,
                calls: row.calls,
                served: row.served,
            });
        }
        Ok(Self { steps })
    }
}

/// A performance measure computed from a trace.
pub trait Scorer {
    fn score(&self, trace: &RunTrace) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Accuracy;

impl Scorer for Accuracy {
    fn score(&self, trace: &RunTrace) -> Result<f64> {
        accuracy(trace)
    }
}

pub fn accuracy(trace: &RunTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut correct = 0usize;
    for step in &trace.steps {
        match step.correct() {
            Some(true) => correct += 1,
            Some(false) => {}
            None => return Err(Error::MissingGold(step.id.clone())),
        }
    }
    Ok(correct as f64 / trace.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountedScore {
    pub phi: f64,
    pub rho: f64,
    pub lambda: f64,
    pub phi_hat: f64,
}

pub fn discounted(phi: f64, calls: u64, served: u64, lambda: f64) -> Result<DiscountedScore> {
    if served == 0 {
        return Err(Error::EmptyTrace);
    }
    if calls > served {
        return Err(Error::TraceShape(format!("{calls} calls for {served} instances")));
    }
    let rho = calls as f64 / served as f64;
    Ok(DiscountedScore {
        phi,
        rho,
        lambda,
        phi_hat: phi - lambda * rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// 1-based number of instances served so far.
    pub step: usize,
    pub calls: u64,
    pub accuracy: f64,
    pub phi_hat: f64,
}

/// Running metrics every `window` steps, always including the last step.
pub fn trajectory(trace: &RunTrace, lambda: f64, window: usize) -> Result<Vec<TrajectoryPoint>> {
    let window = window.max(1);
    let mut points = Vec::with_capacity(trace.len() / window + 1);
    let mut correct = 0usize;
    let mut calls = 0u64;
    for (i, step) in trace.steps.iter().enumerate() {
        match step.correct() {
            Some(true) => correct += 1,
            Some(false) => {}
            None => return Err(Error::MissingGold(step.id.clone())),
        }
        if step.decision == Source::Teacher {
            calls += 1;
        }
        let n = i + 1;
        if n % window == 0 || n == trace.len() {
            let acc = correct as f64 / n as f64;
            points.push(TrajectoryPoint {
                step: n,
                calls,
                accuracy: acc,
                phi_hat: discounted(acc, calls, n as u64, lambda)?.phi_hat,
            });
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub calls: MeanStd,
    pub accuracy: MeanStd,
    pub phi_hat: MeanStd,
}

pub fn aggregate(traces: &[RunTrace], lambda: f64) -> Result<Aggregate> {
    let first = traces.first().ok_or(Error::EmptyTrace)?;
    if let Some(t) = traces.iter().find(|t| t.len() != first.len()) {
        return Err(Error::TraceShape(format!("lengths {} and {}", first.len(), t.len())));
    }
    let mut calls = Vec::with_capacity(traces.len());
    let mut accs = Vec::with_capacity(traces.len());
    let mut phis = Vec::with_capacity(traces.len());
    for t in traces {
        let acc = accuracy(t)?;
        calls.push(t.calls() as f64);
        accs.push(acc);
        phis.push(discounted(acc, t.calls(), t.served(), lambda)?.phi_hat);
    }
    Ok(Aggregate {
        calls: MeanStd::of(&calls),
        accuracy: MeanStd::of(&accs),
        phi_hat: MeanStd::of(&phis),
    })
}

/// Pointwise mean and standard deviation of equally long trajectories.
pub fn aggregate_trajectories(runs: &[Vec<TrajectoryPoint>]) -> Result<Vec<(usize, Aggregate)>> {
    let first = runs.first().ok_or(Error::EmptyTrace)?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::TraceShape("trajectories differ in length".into()));
    }
    Ok((0..first.len())
        .map(|i| {
            let col = |f: fn(&TrajectoryPoint) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r[i])).collect::<Vec<_>>());
            (
                first[i].step,
                Aggregate {
                    calls: col(|p| p.calls as f64),
                    accuracy: col(|p| p.accuracy),
                    phi_hat: col(|p| p.phi_hat),
                },
            )
        })
        .collect())
}

pub fn write_trajectory_csv<W: Write>(points: &[(usize, Aggregate)], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::TraceShape(e.to_string());
    out.write_record([
        "step",
        "calls_mean",
        "calls_std",
        "accuracy_mean",
        "accuracy_std",
        "phi_hat_mean",
        "phi_hat_std",
    ])
    .map_err(err)?;
    for (step, a) in points {
        out.write_record([
            step.to_string(),
            a.calls.mean.to_string(),
            a.calls.std.to_string(),
            a.accuracy.mean.to_string(),
            a.accuracy.std.to_string(),
            a.phi_hat.mean.to_string(),
            a.phi_hat.std.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::TraceShape(e.to_string()))
}
