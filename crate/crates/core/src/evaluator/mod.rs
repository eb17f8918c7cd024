//! Candidate scoring: accuracy against the oracle gates a latency speedup.

mod cost_model;
mod subprocess;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::SourceProgram;

pub use cost_model::{cost_model_latency, CostModel};
pub use subprocess::{assemble_command, CommandTemplates, LatencyUnit, SubprocessBackend};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    CompileError,
    RuntimeError,
    MarkerViolation,
    EquivalenceRejected,
    MeasureParseError,
    Timeout,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub compiled: bool,
    pub ran: bool,
    pub accuracy_err: Option<f64>,
    pub latency: Option<f64>,
    pub speedup: Option<f64>,
    pub score: f64,
    pub failure: Option<FailureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_detail: Option<String>,
}

impl EvaluationResult {
    pub fn failed(kind: FailureKind, detail: impl Into<String>) -> Self {
        Self {
            compiled: false,
            ran: false,
            accuracy_err: None,
            latency: None,
            speedup: None,
            score: 0.0,
            failure: Some(kind),
            failure_detail: Some(detail.into()),
        }
    }
}

/// Backend output for a candidate that ran.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub accuracy_err: f64,
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFailure {
    pub kind: FailureKind,
    pub detail: String,
    pub compiled: bool,
    pub ran: bool,
}

impl MeasureFailure {
    pub fn new(kind: FailureKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            compiled: false,
            ran: false,
        }
    }
}

pub trait EvalBackend: Send + Sync {
    fn measure(&self, candidate: &SourceProgram) -> Result<Measurement, MeasureFailure>;
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("baseline evaluation failed: {0}")]
    BaselineFailed(String),
    #[error("tolerance must be a non-negative number, got {0}")]
    BadTolerance(f64),
}

/// Speedup when the accuracy error is within tolerance (inclusive), else 0.
pub fn combined_score(accuracy_err: f64, speedup: f64, tolerance: f64) -> f64 {
    if accuracy_err <= tolerance {
        speedup
    } else {
        0.0
    }
}

/// Scores candidates against a baseline measured once at construction.
pub struct Evaluator {
    backend: Box<dyn EvalBackend>,
    baseline: SourceProgram,
    baseline_latency: f64,
    tolerance: f64,
}

impl Evaluator {
    pub fn new(backend: Box<dyn EvalBackend>, baseline: SourceProgram, tolerance: f64) -> Result<Self, EvalError> {
        if !(tolerance >= 0.0) {
            return Err(EvalError::BadTolerance(tolerance));
        }
        let m = backend
            .measure(&baseline)
            .map_err(|f| EvalError::BaselineFailed(format!("{:?}: {}", f.kind, f.detail)))?;
        if !(m.latency > 0.0) {
            return Err(EvalError::BaselineFailed(format!("latency {} is not positive", m.latency)));
        }
        Ok(Self {
            backend,
            baseline,
            baseline_latency: m.latency,
            tolerance,
        })
    }

    pub fn baseline(&self) -> &SourceProgram {
        &self.baseline
    }

    pub fn baseline_latency(&self) -> f64 {
        self.baseline_latency
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Never fails: every problem becomes a zero-score result.
    pub fn evaluate(&self, candidate: &SourceProgram) -> EvaluationResult {
        match self.baseline.diff_outside_blocks(candidate.full_text()) {
            Ok(false) => {}
            Ok(true) => return EvaluationResult::failed(FailureKind::MarkerViolation, "text outside evolve blocks changed"),
            Err(e) => return EvaluationResult::failed(FailureKind::MarkerViolation, e.to_string()),
        }
        let m = match self.backend.measure(candidate) {
            Ok(m) => m,
            Err(f) => {
                return EvaluationResult {
                    compiled: f.compiled,
                    ran: f.ran,
                    ..EvaluationResult::failed(f.kind, f.detail)
                }
            }
        };
        if !(m.latency > 0.0) {
            return EvaluationResult {
                compiled: true,
                ran: true,
                ..EvaluationResult::failed(FailureKind::MeasureParseError, format!("latency {} is not positive", m.latency))
            };
        }
        let speedup = self.baseline_latency / m.latency;
        let score = combined_score(m.accuracy_err, speedup, self.tolerance);
        let (failure, failure_detail) = if score > 0.0 {
            (None, None)
        } else {
            (
                Some(FailureKind::EquivalenceRejected),
                Some(format!(
                    "accuracy error {:.6} exceeds tolerance {}",
                    m.accuracy_err, self.tolerance
                )),
            )
        };
        EvaluationResult {
            compiled: true,
            ran: true,
            accuracy_err: Some(m.accuracy_err),
            latency: Some(m.latency),
            speedup: Some(speedup),
            score,
            failure,
            failure_detail,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::extract_blocks;
    use proptest::prelude::*;

    #[test]
    fn score_gate() {
        assert_eq!(combined_score(0.0, 1.25, 1e-3), 1.25);
        assert_eq!(combined_score(2e-3, 9.99, 1e-3), 0.0);
        assert_eq!(combined_score(1e-3, 1.0, 1e-3), 1.0);
    }

    struct Fixed(Result<Measurement, MeasureFailure>);
    impl EvalBackend for Fixed {
        fn measure(&self, _: &SourceProgram) -> Result<Measurement, MeasureFailure> {
            self.0.clone()
        }
    }

    #[test]
    fn marker_violation_and_failures_score_zero() {
        let base = extract_blocks("a\n// EVOLVE-BLOCK-START\nb\n// EVOLVE-BLOCK-END\n").unwrap();
        let ev = Evaluator::new(
            Box::new(Fixed(Ok(Measurement {
                accuracy_err: 0.0,
                latency: 2.0,
            }))),
            base.clone(),
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        let same = ev.evaluate(&base);
        assert_eq!(same.score, 1.0);
        assert_eq!(same.failure, None);
        let changed = extract_blocks("x\n// EVOLVE-BLOCK-START\nb\n// EVOLVE-BLOCK-END\n").unwrap();
        let r = ev.evaluate(&changed);
        assert_eq!(r.failure, Some(FailureKind::MarkerViolation));
        assert_eq!(r.score, 0.0);

        let broken = Fixed(Err(MeasureFailure::new(FailureKind::CompileError, "boom")));
        assert!(matches!(
            Evaluator::new(Box::new(broken), base, DEFAULT_TOLERANCE),
            Err(EvalError::BaselineFailed(_))
        ));
    }

    proptest! {
        #[test]
        fn score_monotone(err in 0.0f64..0.01, s1 in 0.01f64..10.0, s2 in 0.01f64..10.0, tol in 0.0f64..0.01) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(combined_score(err, lo, tol) <= combined_score(err, hi, tol));
            prop_assert!(combined_score(err * 2.0 + 1e-9, hi, tol) <= combined_score(err, hi, tol));
            prop_assert!(combined_score(err, hi, tol) >= 0.0);
        }
    }
}
