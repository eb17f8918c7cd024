//! Catalog of code transformations known to the cost model and the mock
//! generator, plus the tag convention candidates use to declare them.
//!
//! A candidate declares an applied transform with a comment line inside an
//! evolve block: `// @transform fastmath`. The generator that produced it is
//! recorded the same way: `// @generator Deepseek_r1`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::WorkloadStats;
use crate::profile::RooflineKind;
use crate::program::SourceProgram;

pub const TRANSFORM_TAG: &str = "@transform";
pub const GENERATOR_TAG: &str = "@generator";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown transform tag `{0}`")]
    UnknownTag(String),
    #[error("invalid catalog entry `{tag}`: {detail}")]
    InvalidEntry { tag: String, detail: String },
    #[error("catalog json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Workload/profile predicate gating a transform's benefit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Condition {
    MinMeanPerTile(f64),
    MinComputedFraction(f64),
    MaxComputedFraction(f64),
    ComputeBound,
    MemoryBound,
}

impl Condition {
    pub fn holds(&self, wl: &WorkloadStats, roofline: RooflineKind) -> bool {
        match *self {
            Condition::MinMeanPerTile(v) => wl.mean_per_tile >= v,
            Condition::MinComputedFraction(v) => wl.mean_computed_fraction >= v,
            Condition::MaxComputedFraction(v) => wl.mean_computed_fraction < v,
            Condition::ComputeBound => roofline == RooflineKind::ComputeBound,
            Condition::MemoryBound => roofline == RooflineKind::MemoryBound,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Condition::MinMeanPerTile(v) => format!("needs at least {v} splats per tile"),
            Condition::MinComputedFraction(v) => format!("needs computed fraction >= {v}"),
            Condition::MaxComputedFraction(v) => format!("needs computed fraction < {v}"),
            Condition::ComputeBound => "needs a compute-bound kernel".into(),
            Condition::MemoryBound => "needs a memory-bound kernel".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformCatalogEntry {
    pub tag: String,
    /// Latency divisor when the transform applies.
    pub speedup_factor: f64,
    #[serde(default)]
    pub condition: Option<Condition>,
    /// Speedup factor used when the condition fails (1.0 = neutral).
    #[serde(default = "one")]
    pub penalty_factor: f64,
    #[serde(default)]
    pub unsafe_transform: bool,
    #[serde(default)]
    pub accuracy_penalty: f64,
    /// Lower-case phrases that identify this transform in planner advice.
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Only proposed by generators when the prompt asks for it.
    #[serde(default)]
    pub needs_prompt: bool,
    /// Plain-language suggestion a planner would give for this transform.
    #[serde(default)]
    pub advice: String,
}

fn one() -> f64 {
    1.0
}

impl TransformCatalogEntry {
    pub fn mentioned_in(&self, text_lower: &str) -> bool {
        self.keywords.iter().any(|k| text_lower.contains(k.as_str()))
    }

    /// Speedup contributed under the given workload.
    pub fn effective_factor(&self, wl: &WorkloadStats, roofline: RooflineKind) -> f64 {
        match self.condition {
            Some(c) if !c.holds(wl, roofline) => self.penalty_factor,
            _ => self.speedup_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformCatalog {
    pub entries: Vec<TransformCatalogEntry>,
}

const BUILTIN: &str = include_str!("../data/catalog.json");

impl Default for TransformCatalog {
    fn default() -> Self {
        Self::from_json(BUILTIN).expect("built-in catalog is valid")
    }
}

impl TransformCatalog {
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let catalog: TransformCatalog = serde_json::from_str(text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let bad = |detail: &str| {
                Err(CatalogError::InvalidEntry {
                    tag: e.tag.clone(),
                    detail: detail.to_string(),
                })
            };
            if e.tag.is_empty() || e.tag.contains(char::is_whitespace) {
                return bad("tag must be a non-empty word");
            }
            if !seen.insert(e.tag.as_str()) {
                return bad("duplicate tag");
            }
            if !(e.speedup_factor > 0.0) || !(e.penalty_factor > 0.0) {
                return bad("factors must be positive");
            }
            if !e.unsafe_transform && e.accuracy_penalty != 0.0 {
                return bad("safe entries carry no accuracy penalty");
            }
            if !(e.accuracy_penalty >= 0.0) {
                return bad("accuracy penalty must be non-negative");
            }
        }
        Ok(())
    }

    pub fn get(&self, tag: &str) -> Option<&TransformCatalogEntry> {
        self.entries.iter().find(|e| e.tag == tag)
    }

    pub fn entry(&self, tag: &str) -> Result<&TransformCatalogEntry, CatalogError> {
        self.get(tag).ok_or_else(|| CatalogError::UnknownTag(tag.to_string()))
    }

    /// Entries whose keywords occur in `text` (case-insensitive).
    pub fn mentioned<'a>(&'a self, text: &str) -> Vec<&'a TransformCatalogEntry> {
        let lower = text.to_lowercase();
        self.entries.iter().filter(|e| e.mentioned_in(&lower)).collect()
    }
}

fn tag_values<'a>(text: &'a str, marker: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    text.lines().filter_map(move |line| {
        let rest = &line[line.find(marker)? + marker.len()..];
        rest.split_whitespace().next()
    })
}

/// Transform tags declared inside the program's evolve blocks.
pub fn transform_tags(p: &SourceProgram) -> BTreeSet<String> {
    p.blocks()
        .iter()
        .flat_map(|b| tag_values(&b.body, TRANSFORM_TAG).map(str::to_string).collect::<Vec<_>>())
        .collect()
}

/// Generator label declared anywhere in `text`, if any.
pub fn generator_label(text: &str) -> Option<String> {
    tag_values(text, GENERATOR_TAG).next().map(str::to_string)
}

pub fn is_annotation(line: &str) -> bool {
    line.contains(TRANSFORM_TAG) || line.contains(GENERATOR_TAG)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::extract_blocks;

    #[test]
    fn builtin_catalog_factors() {
        let c = TransformCatalog::default();
        for (tag, factor) in [
            ("fastmath", 1.1035),
            ("drop-contributor", 1.0091),
            ("simplify-loop", 1.0566),
            ("coalesce-rgb", 1.03),
            ("shmem-layout", 1.113),
        ] {
            let e = c.entry(tag).unwrap();
            assert_eq!(e.speedup_factor, factor, "{tag}");
            assert!(!e.unsafe_transform);
        }
        assert!(c.entry("remove-inner-loop").unwrap().unsafe_transform);
        assert!(c.entry("shmem-layout").unwrap().needs_prompt);
        assert!(matches!(c.entry("nope"), Err(CatalogError::UnknownTag(_))));
    }

    #[test]
    fn rejects_bad_entries() {
        let text = r#"{"entries":[{"tag":"a","speedup_factor":1.1,"accuracy_penalty":0.5}]}"#;
        assert!(TransformCatalog::from_json(text).is_err());
        let text = r#"{"entries":[{"tag":"a","speedup_factor":0}]}"#;
        assert!(TransformCatalog::from_json(text).is_err());
        let text = r#"{"entries":[{"tag":"a","speedup_factor":1},{"tag":"a","speedup_factor":1}]}"#;
        assert!(TransformCatalog::from_json(text).is_err());
    }

    #[test]
    fn advice_keywords_identify_their_entry() {
        let c = TransformCatalog::default();
        for e in &c.entries {
            if e.advice.is_empty() {
                continue;
            }
            let hits: Vec<_> = c.mentioned(&e.advice).iter().map(|m| m.tag.clone()).collect();
            assert_eq!(hits, vec![e.tag.clone()], "advice for {}", e.tag);
        }
    }

    #[test]
    fn tags_are_read_from_blocks_only() {
        let text = "// @transform outside\n// EVOLVE-BLOCK-START\n  // @generator GPT-5\n  // @transform fastmath\n  // @transform coalesce-rgb\nx;\n// EVOLVE-BLOCK-END\n";
        let p = extract_blocks(text).unwrap();
        let tags: Vec<_> = transform_tags(&p).into_iter().collect();
        assert_eq!(tags, ["coalesce-rgb", "fastmath"]);
        assert_eq!(generator_label(text).as_deref(), Some("GPT-5"));
        assert_eq!(generator_label("none"), None);
    }
}
