//! Functional-equivalence gate and the cross-referencing matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{Backend, Exchange, LlmError};
use crate::program::SourceProgram;
use crate::templates::{TemplateError, TemplateSet};

pub const NO_REASON: &str = "checker gave no reason";

#[derive(Debug, Error)]
pub enum CheckerError {
    #[error("no EQUIVALENT / NOT EQUIVALENT verdict in response: {0:?}")]
    UnparseableVerdict(String),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("matrix csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub equivalent: bool,
    pub reasons: Vec<String>,
    pub checker_role: String,
}

pub fn build_check_prompt(
    original: &SourceProgram,
    candidate: &SourceProgram,
    templates: &TemplateSet,
) -> Result<String, CheckerError> {
    Ok(templates.check.render(&[
        ("original", original.full_text()),
        ("candidate", candidate.full_text()),
    ])?)
}

/// The first line whose leading word(s) are `EQUIVALENT` or `NOT EQUIVALENT`
/// decides; everything after the token and on later lines is reasoning.
pub fn parse_verdict(response: &str, checker: &str) -> Result<EquivalenceVerdict, CheckerError> {
    let lines: Vec<&str> = response.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let stripped = line.trim_start_matches(|c: char| !c.is_ascii_alphabetic());
        let upper = stripped.to_ascii_uppercase();
        let (equivalent, token_len) = if upper.starts_with("NOT EQUIVALENT") {
            (false, "NOT EQUIVALENT".len())
        } else if upper.starts_with("EQUIVALENT") {
            (true, "EQUIVALENT".len())
        } else {
            continue;
        };
        let mut reasons = Vec::new();
        let tail = stripped[token_len..]
            .trim_start_matches(|c: char| !c.is_alphanumeric() && c != '`')
            .trim();
        if !tail.is_empty() {
            reasons.push(tail.to_string());
        }
        reasons.extend(
            lines[i + 1..]
                .iter()
                .map(|l| l.trim().trim_start_matches(['-', '*', '•']).trim())
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        );
        if !equivalent && reasons.is_empty() {
            reasons.push(NO_REASON.into());
        }
        return Ok(EquivalenceVerdict {
            equivalent,
            reasons,
            checker_role: checker.to_string(),
        });
    }
    let mut snippet = response.trim().to_string();
    snippet.truncate(200);
    Err(CheckerError::UnparseableVerdict(snippet))
}

pub fn check(
    original: &SourceProgram,
    candidate: &SourceProgram,
    backend: &Backend,
    templates: &TemplateSet,
) -> Result<(EquivalenceVerdict, Exchange), CheckerError> {
    let prompt = build_check_prompt(original, candidate, templates)?;
    let exchange = backend.complete(&prompt)?;
    let verdict = parse_verdict(&exchange.response, &backend.config().label())?;
    Ok((verdict, exchange))
}

/// True when adding `check_cost` queries per iteration pays for itself:
/// `error_rate > check_cost / (calls_per_iteration + check_cost)`.
pub fn check_benefit(error_rate: f64, calls_per_iteration: u32, check_cost: u32) -> bool {
    let cost = check_cost as f64;
    error_rate > cost / (calls_per_iteration as f64 + cost)
}

/// Rows are checkers, columns generators; a cell is true when the checker
/// flagged that generator's unsafe candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossCheckMatrix {
    pub generators: Vec<String>,
    pub rows: Vec<(String, Vec<bool>)>,
    /// Per-cell failures (transport or unparseable verdicts), if any.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl CrossCheckMatrix {
    pub fn detected(&self, checker: &str, generator: &str) -> Option<bool> {
        let col = self.generators.iter().position(|g| g == generator)?;
        self.rows.iter().find(|(c, _)| c == checker).map(|(_, cells)| cells[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("checker");
        for g in &self.generators {
            out.push(',');
            out.push_str(g);
        }
        out.push('\n');
        for (checker, cells) in &self.rows {
            out.push_str(checker);
            for &c in cells {
                out.push_str(if c { ",Y" } else { ",N" });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CheckerError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| CheckerError::Csv(e.to_string()))?.clone();
        if headers.get(0) != Some("checker") {
            return Err(CheckerError::Csv("first column must be `checker`".into()));
        }
        let generators: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| CheckerError::Csv(e.to_string()))?;
            if record.len() != generators.len() + 1 {
                return Err(CheckerError::Csv("row width does not match header".into()));
            }
            let cells = record
                .iter()
                .skip(1)
                .map(|c| match c.trim() {
                    "Y" => Ok(true),
                    "N" => Ok(false),
                    other => Err(CheckerError::Csv(format!("cell `{other}` is not Y or N"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((record[0].to_string(), cells));
        }
        Ok(Self {
            generators,
            rows,
            notes: Vec::new(),
        })
    }
}

/// Runs every checker on every generator's fixture. Errors leave the cell
/// undetected and add a note.
pub fn build_matrix(
    checkers: &[Backend],
    fixtures: &[(String, SourceProgram)],
    original: &SourceProgram,
    templates: &TemplateSet,
) -> CrossCheckMatrix {
    let generators: Vec<String> = fixtures.iter().map(|(g, _)| g.clone()).collect();
    let mut notes = Vec::new();
    let rows = checkers
        .iter()
        .map(|backend| {
            let label = backend.config().label();
            let cells = fixtures
                .iter()
                .map(|(g, candidate)| match check(original, candidate, backend, templates) {
                    Ok((v, _)) => !v.equivalent,
                    Err(e) => {
                        notes.push(format!("{label} on {g}: {e}"));
                        false
                    }
                })
                .collect();
            (label, cells)
        })
        .collect();
    CrossCheckMatrix {
        generators,
        rows,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::TransformCatalog;
    use crate::llm::{BackendConfig, MockProfile, Role};
    use crate::program::extract_blocks;
    use proptest::prelude::*;
    use std::sync::Arc;

    const ORIGINAL: &str = "k\n// EVOLVE-BLOCK-START\nbody\n// EVOLVE-BLOCK-END\n";

    fn unsafe_from(g: &str) -> SourceProgram {
        extract_blocks(&format!(
            "k\n// EVOLVE-BLOCK-START\n// @generator {g}\n// @transform remove-inner-loop\nbody\n// EVOLVE-BLOCK-END\n"
        ))
        .unwrap()
    }

    fn checker(label: &str, accuracy: &[(&str, f64)]) -> Backend {
        let profile = MockProfile {
            checker_accuracy: accuracy.iter().map(|(g, p)| (g.to_string(), *p)).collect(),
            ..MockProfile::default()
        };
        Backend::new(
            BackendConfig::mock(Role::Checker, 1, profile).with_label(label),
            Arc::new(TransformCatalog::default()),
        )
        .unwrap()
    }

    #[test]
    fn verdict_parsing() {
        let v = parse_verdict("NOT EQUIVALENT\n- skips splats\n", "c").unwrap();
        assert!(!v.equivalent);
        assert_eq!(v.reasons, ["skips splats"]);
        let v = parse_verdict("**Equivalent**", "c").unwrap();
        assert!(v.equivalent);
        let v = parse_verdict("Analysis follows.\nNOT EQUIVALENT: drops the inner loop", "c").unwrap();
        assert_eq!(v.reasons, ["drops the inner loop"]);
        let v = parse_verdict("NOT EQUIVALENT", "c").unwrap();
        assert_eq!(v.reasons, [NO_REASON]);
        assert!(matches!(parse_verdict("maybe fine", "c"), Err(CheckerError::UnparseableVerdict(_))));
    }

    #[test]
    fn mock_checks() {
        let original = extract_blocks(ORIGINAL).unwrap();
        let t = TemplateSet::default();
        let perfect = checker("GPT-5", &[("*", 1.0)]);
        let (v, _) = check(&original, &unsafe_from("Gemini"), &perfect, &t).unwrap();
        assert!(!v.equivalent);
        assert_eq!(v.checker_role, "GPT-5");
        assert!(check(&original, &original, &perfect, &t).unwrap().0.equivalent);
        let blind = checker("Claude", &[("Gemini", 0.0)]);
        assert!(check(&original, &unsafe_from("Gemini"), &blind, &t).unwrap().0.equivalent);
    }

    #[test]
    fn benefit_rule() {
        assert!(check_benefit(0.4, 2, 1));
        assert!(check_benefit(0.34, 2, 1));
        assert!(!check_benefit(1.0 / 3.0, 2, 1));
        assert!(!check_benefit(0.0, 2, 1));
    }

    #[test]
    fn matrix_edge_cases() {
        let original = extract_blocks(ORIGINAL).unwrap();
        let t = TemplateSet::default();
        let empty = build_matrix(&[], &[("GPT-5".into(), unsafe_from("GPT-5"))], &original, &t);
        assert!(empty.rows.is_empty());
        let one = build_matrix(&[checker("GPT-5", &[("*", 1.0)])], &[("safe".into(), original.clone())], &original, &t);
        assert_eq!(one.rows, [("GPT-5".to_string(), vec![false])]);
        assert_eq!(one.to_csv(), "checker,safe\nGPT-5,N\n");
    }

    proptest! {
        #[test]
        fn benefit_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, calls in 1u32..5, cost in 0u32..4) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(!check_benefit(lo, calls, cost) || check_benefit(hi, calls, cost));
        }

        #[test]
        fn csv_round_trip(n_gen in 1usize..5, cells in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 0..5)) {
            let generators: Vec<String> = (0..n_gen).map(|i| format!("gen_{i}")).collect();
            let rows: Vec<(String, Vec<bool>)> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("chk_{i}"), c[..n_gen].to_vec()))
                .collect();
            let m = CrossCheckMatrix { generators, rows, notes: vec![] };
            prop_assert_eq!(CrossCheckMatrix::from_csv(&m.to_csv()).unwrap(), m);
        }
    }
}
