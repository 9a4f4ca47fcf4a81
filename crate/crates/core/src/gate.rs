//! The trust criteria: the student's answer is served only when the query is
//! close to the centroid of its neighborhood AND the student's label
//! distribution is confident. Both comparisons are strict, so a signal sitting
//! exactly on its threshold sends the instance to the teacher.

use serde::{Deserialize, Serialize};

use crate::students::StudentPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Upper bound (exclusive) on the centroid cosine distance.
    pub t_c: f64,
    /// Upper bound (exclusive) on the entropy.
    pub t_h: f64,
}

impl Thresholds {
    pub fn new(t_c: f64, t_h: f64) -> Self {
        Self { t_c, t_h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signals {
    pub distance: f64,
    pub entropy: f64,
}

impl Signals {
    /// Maximal signals reported when the student has nothing to predict from.
    pub fn cold(label_count: usize) -> Self {
        Self {
            distance: 2.0,
            entropy: (label_count as f64).ln(),
        }
    }
}

impl From<&StudentPrediction> for Signals {
    fn from(p: &StudentPrediction) -> Self {
        Self {
            distance: p.centroid_distance,
            entropy: p.entropy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub use_student: bool,
    pub distance_ok: bool,
    pub entropy_ok: bool,
    pub signals: Signals,
}

impl GateDecision {
    /// Forced teacher call for an empty or untrained student.
    pub fn cold(label_count: usize) -> Self {
        Self {
            use_student: false,
            distance_ok: false,
            entropy_ok: false,
            signals: Signals::cold(label_count),
        }
    }
}

pub fn decide_signals(signals: Signals, th: Thresholds) -> GateDecision {
    let distance_ok = signals.distance < th.t_c;
    let entropy_ok = signals.entropy < th.t_h;
    GateDecision {
        use_student: distance_ok && entropy_ok,
        distance_ok,
        entropy_ok,
        signals,
    }
}

pub fn decide(pred: &StudentPrediction, th: Thresholds) -> GateDecision {
    decide_signals(Signals::from(pred), th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(distance: f64, entropy: f64) -> StudentPrediction {
        StudentPrediction {
            label: 0,
            probs: vec![1.0],
            entropy,
            centroid_distance: distance,
            neighbors_used: 1,
        }
    }

    #[test]
    fn tuned_thresholds_admit_close_confident_prediction() {
        let d = decide(&pred(0.2, 0.5), Thresholds::new(0.2269, 0.8359));
        assert!(d.use_student && d.distance_ok && d.entropy_ok);
    }

    #[test]
    fn zero_thresholds_never_trust() {
        let d = decide(&pred(0.0, 0.0), Thresholds::new(0.0, 0.0));
        assert!(!d.use_student);
    }

    #[test]
    fn bounds_are_exclusive() {
        let ln77 = 77f64.ln();
        assert!(decide(&pred(1.99, 4.0), Thresholds::new(2.0, ln77)).use_student);
        let d = decide(&pred(2.0, 4.0), Thresholds::new(2.0, ln77));
        assert!(!d.use_student && !d.distance_ok && d.entropy_ok);
        assert!(!decide(&pred(0.1, ln77), Thresholds::new(2.0, ln77)).use_student);
    }

    #[test]
    fn cold_gate_calls_teacher_even_at_upper_bounds() {
        let cold = GateDecision::cold(77);
        assert!(!cold.use_student);
        let replay = decide_signals(cold.signals, Thresholds::new(2.0, 77f64.ln()));
        assert!(!replay.use_student);
    }

    proptest! {
        #[test]
        fn enlarging_thresholds_is_monotone(
            d in 0.0f64..2.0, h in 0.0f64..5.0,
            tc in 0.0f64..2.0, th in 0.0f64..5.0,
            dc in 0.0f64..1.0, dh in 0.0f64..1.0,
        ) {
            let before = decide(&pred(d, h), Thresholds::new(tc, th));
            let after = decide(&pred(d, h), Thresholds::new(tc + dc, th + dh));
            prop_assert!(!before.use_student || after.use_student);
            prop_assert_eq!(before.use_student, before.distance_ok && before.entropy_ok);
        }
    }
}
