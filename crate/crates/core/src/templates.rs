//! Prompt templates with `{{placeholder}}` substitution.
//!
//! Built-in copies are compiled in; a directory of `*.tmpl` files can
//! override any of them between runs.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{template}` uses `{{{{{name}}}}}` but no value was supplied")]
    MissingValue { template: String, name: String },
    #[error("template `{0}` has an unterminated placeholder")]
    Unterminated(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const PROGRAM_OPEN: &str = "=== PROGRAM ===";
pub const PROGRAM_CLOSE: &str = "=== END PROGRAM ===";
pub const ADVICE_OPEN: &str = "=== ADVICE ===";
pub const ADVICE_CLOSE: &str = "=== END ADVICE ===";
pub const PROFILE_OPEN: &str = "=== PROFILE ===";
pub const PROFILE_CLOSE: &str = "=== END PROFILE ===";
pub const ORIGINAL_OPEN: &str = "=== ORIGINAL ===";
pub const ORIGINAL_CLOSE: &str = "=== END ORIGINAL ===";
pub const CANDIDATE_OPEN: &str = "=== CANDIDATE ===";
pub const CANDIDATE_CLOSE: &str = "=== END CANDIDATE ===";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Single pass: substituted values are never rescanned for placeholders.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after
                .find("}}")
                .ok_or_else(|| TemplateError::Unterminated(self.name.clone()))?;
            let key = after[..close].trim();
            let value = values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue {
                    template: self.name.clone(),
                    name: key.to_string(),
                })?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub plan: Template,
    pub prune: Template,
    pub generate: Template,
    pub check: Template,
    pub review: Template,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            plan: Template::new("plan", include_str!("../templates/plan.tmpl")),
            prune: Template::new("prune", include_str!("../templates/prune.tmpl")),
            generate: Template::new("generate", include_str!("../templates/generate.tmpl")),
            check: Template::new("check", include_str!("../templates/check.tmpl")),
            review: Template::new("review", include_str!("../templates/review.tmpl")),
        }
    }
}

impl TemplateSet {
    /// Loads `<name>.tmpl` files from `dir`; names without a file keep the
    /// built-in text.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        for slot in [
            &mut set.plan,
            &mut set.prune,
            &mut set.generate,
            &mut set.check,
            &mut set.review,
        ] {
            let path = dir.join(format!("{}.tmpl", slot.name));
            if path.exists() {
                slot.text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
            } else {
                log::info!("{} not found, using built-in template", path.display());
            }
        }
        Ok(set)
    }
}

/// Text between an `open` sentinel line and the following `close` sentinel
/// line, exclusive of the newline that precedes `close`.
pub fn section<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let body = text[start..].strip_prefix('\n').unwrap_or(&text[start..]);
    let end = body.find(&format!("\n{close}")).or_else(|| body.starts_with(close).then_some(0))?;
    Some(&body[..end])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution() {
        let t = Template::new("t", "a {{x}} b {{ y }} {{x}}");
        assert_eq!(t.render(&[("x", "1"), ("y", "{{x}}")]).unwrap(), "a 1 b {{x}} 1");
        assert!(matches!(t.render(&[("x", "1")]), Err(TemplateError::MissingValue { .. })));
        assert!(matches!(
            Template::new("u", "{{oops").render(&[]),
            Err(TemplateError::Unterminated(_))
        ));
    }

    #[test]
    fn sections_round_trip_program_text() {
        let set = TemplateSet::default();
        for program in ["x\ny\n", "x\ny", ""] {
            let prompt = set
                .generate
                .render(&[("advice_intro", ""), ("advice", ""), ("iteration", "1"), ("program", program)])
                .unwrap();
            assert_eq!(section(&prompt, PROGRAM_OPEN, PROGRAM_CLOSE), Some(program));
            assert_eq!(section(&prompt, ADVICE_OPEN, ADVICE_CLOSE), Some(""));
        }
        assert_eq!(section("nothing", PROGRAM_OPEN, PROGRAM_CLOSE), None);
    }

    #[test]
    fn builtin_templates_carry_marker_instruction() {
        let set = TemplateSet::default();
        assert!(set.plan.text().contains("keep EVOLVE-BLOCK markers"));
        assert!(set.generate.text().contains("keep EVOLVE-BLOCK markers"));
    }

    #[test]
    fn load_overrides_per_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("plan.tmpl"), "custom {{program}}").unwrap();
        let set = TemplateSet::load(dir.path()).unwrap();
        assert_eq!(set.plan.text(), "custom {{program}}");
        assert_eq!(set.check, TemplateSet::default().check);
    }
}
