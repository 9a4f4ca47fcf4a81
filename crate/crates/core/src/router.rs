//! The online loop: the student answers, the gate decides whether that answer
//! is trusted, and rejected instances go to the teacher, whose reply is cached
//! before the student gets a chance to retrain.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::Cache;
use crate::domain::EmbeddedInstance;
use crate::error::{Error, Result};
use crate::gate::{decide, decide_signals, GateDecision, Signals, Thresholds};
use crate::ingest::Stream;
use crate::metrics::{RunTrace, Source, TraceStep};
use crate::students::{EntropyDomain, MlpConfig, Student, StudentKind, StudentPrediction};
use crate::teachers::{Teacher, TeacherResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub student: StudentKind,
    pub k: usize,
    pub thresholds: Thresholds,
    pub entropy_domain: EntropyDomain,
    pub mlp: Option<MlpConfig>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            student: StudentKind::Knn,
            k: 5,
            thresholds: Thresholds::new(0.0, 0.0),
            entropy_domain: EntropyDomain::Present,
            mlp: None,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let Thresholds { t_c, t_h } = self.thresholds;
        if !(t_c.is_finite() && t_h.is_finite() && t_c >= 0.0 && t_h >= 0.0) {
            return Err(Error::Config(format!("thresholds out of range: ({t_c}, {t_h})")));
        }
        if let Some(mlp) = &self.mlp {
            mlp.validate()?;
        }
        Ok(())
    }
}

/// Student output and gate verdict for one instance, before any teacher call.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub prediction: Option<StudentPrediction>,
    pub decision: GateDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServeResult {
    /// `None` when the teacher reply could not be mapped to a label.
    pub label: Option<String>,
    pub source: Source,
    pub signals: Signals,
    pub latency: Duration,
    #[serde(skip)]
    pub teacher: Option<TeacherResponse>,
}

#[derive(Debug, Clone)]
pub struct Router {
    config: RouterConfig,
    cache: Cache,
    student: Student,
    served: u64,
    calls: u64,
}

impl Router {
    pub fn new(cache: Cache, config: RouterConfig) -> Result<Self> {
        config.validate()?;
        let student = Student::new(config.student, config.mlp.as_ref(), &cache)?;
        Ok(Self {
            config,
            cache,
            student,
            served: 0,
            calls: 0,
        })
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn into_cache(self) -> Cache {
        self.cache
    }

    pub fn student(&self) -> &Student {
        &self.student
    }

    /// N
    pub fn served(&self) -> u64 {
        self.served
    }

    /// M
    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Read-only half of [`Router::serve`]. An empty cache or an untrained
    /// student yields the cold decision.
    pub fn assess(&self, item: &EmbeddedInstance) -> Result<Assessment> {
        let label_count = self.cache.labels().len();
        match self
            .student
            .predict(&self.cache, &item.embedding, self.config.k, self.config.entropy_domain)
        {
            Ok(p) => Ok(Assessment {
                decision: decide(&p, self.config.thresholds),
                prediction: Some(p),
            }),
            Err(Error::EmptyCache | Error::EmptyTraining | Error::EmptyNeighborhood) => Ok(Assessment {
                prediction: None,
                decision: GateDecision::cold(label_count),
            }),
            Err(e) => Err(e),
        }
    }

    /// Records a student-served instance.
    pub fn record_student(&mut self) {
        self.served += 1;
    }

    /// Mutating half of [`Router::serve`] for a teacher-routed instance:
    /// caches the reply, then lets the student retrain. A protocol error is
    /// a paid call and is cached as invalid; any other error leaves the
    /// router untouched.
    pub fn absorb(&mut self, item: EmbeddedInstance, reply: Result<TeacherResponse>) -> Result<Option<String>> {
        let label = match reply {
            Ok(r) => {
                self.cache.insert(item, &r.label)?;
                Some(r.label)
            }
            Err(Error::TeacherProtocol { .. }) => {
                self.cache.insert_invalid(item)?;
                None
            }
            Err(e) => return Err(e),
        };
        self.calls += 1;
        self.served += 1;
        self.student.maybe_retrain(&self.cache)?;
        Ok(label)
    }

    pub fn serve(&mut self, item: &EmbeddedInstance, teacher: &dyn Teacher) -> Result<ServeResult> {
        let start = Instant::now();
        let wrap = |e: Error| Error::Instance {
            id: item.id().to_string(),
            source: Box::new(e),
        };
        let assessment = self.assess(item).map_err(wrap)?;
        let signals = assessment.decision.signals;
        if assessment.decision.use_student {
            let p = assessment.prediction.expect("trusted decisions carry a prediction");
            self.record_student();
            return Ok(ServeResult {
                label: Some(self.cache.labels().name(p.label).to_string()),
                source: Source::Student,
                signals,
                latency: start.elapsed(),
                teacher: None,
            });
        }
        let reply = teacher.ask(&item.instance);
        let response = reply.as_ref().ok().cloned();
        let label = self.absorb(item.clone(), reply).map_err(wrap)?;
        Ok(ServeResult {
            label,
            source: Source::Teacher,
            signals,
            latency: start.elapsed(),
            teacher: response,
        })
    }

    /// Serves every item in order. On an unrecoverable teacher error the
    /// trace of the instances served so far is returned with the error.
    pub fn run_stream(
        &mut self,
        stream: &Stream<EmbeddedInstance>,
        teacher: &dyn Teacher,
    ) -> std::result::Result<RunTrace, StreamAborted> {
        let mut trace = RunTrace {
            steps: Vec::with_capacity(stream.items.len()),
        };
        for (step, item) in stream.items.iter().enumerate() {
            match self.serve(item, teacher) {
                Ok(r) => trace.steps.push(TraceStep {
                    step,
                    id: item.id().to_string(),
                    decision: r.source,
                    predicted: r.label,
                    gold: item.instance.gold_label.clone(),
                    distance: r.signals.distance,
                    entropy: r.signals.entropy,
                    calls: self.calls,
                    served: self.served,
                }),
                Err(error) => return Err(StreamAborted { trace, error }),
            }
        }
        Ok(trace)
    }
}

/// A stream cut short by a teacher failure; `trace` is incomplete.
#[derive(Debug, thiserror::Error)]
#[error("stream aborted after {} instances: {error}", trace.len())]
pub struct StreamAborted {
    pub trace: RunTrace,
    #[source]
    pub error: Error,
}

/// Replays the gate on a trace's recorded signals; true when every decision
/// agrees.
pub fn decisions_match(trace: &RunTrace, thresholds: Thresholds, label_count: usize) -> bool {
    let cold = Signals::cold(label_count);
    trace.steps.iter().all(|s| {
        let signals = Signals {
            distance: s.distance,
            entropy: s.entropy,
        };
        let trusted = decide_signals(signals, thresholds).use_student;
        match s.decision {
            Source::Student => trusted,
            Source::Teacher => !trusted || signals == cold,
        }
    })
}
