//! Planner exchanges: source-only advice lists and their profile-driven
//! pruning.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::oracle::WorkloadStats;
use crate::profile::{classify_roofline, dominant_stall, OccupancyAnalysis, SystemProfile};
use crate::program::SourceProgram;
use crate::templates::{TemplateError, TemplateSet};

/// Above this mean computed fraction, early stop is considered rare.
pub const EARLY_STOP_RARE_FRACTION: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("program has no EVOLVE-BLOCK regions")]
    NoEvolveBlocks,
    #[error("no advice items recognized")]
    EmptyPlan,
    #[error("response references no advice ids from the plan")]
    NoIdsRecognized,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub type Result<T> = std::result::Result<T, PlannerError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizationAdvice {
    pub id: u32,
    pub title: String,
    pub rationale: String,
    #[serde(default)]
    pub preconditions: String,
}

impl OptimizationAdvice {
    /// One-line rendering used in prompts and as the canonical list form.
    pub fn line(&self) -> String {
        let mut s = format!("{}. {}.", self.id, self.title);
        for part in [&self.rationale, &self.preconditions] {
            if !part.is_empty() {
                s.push(' ');
                s.push_str(part);
            }
        }
        s
    }

    /// Title plus rationale, as fed to the generator.
    pub fn text(&self) -> String {
        let mut s = format!("{}.", self.title);
        if !self.rationale.is_empty() {
            s.push(' ');
            s.push_str(&self.rationale);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub advice: Vec<OptimizationAdvice>,
    pub source_digest: String,
}

impl Plan {
    pub fn render_list(&self) -> String {
        self.advice.iter().map(|a| a.line() + "\n").collect()
    }

    pub fn get(&self, id: u32) -> Option<&OptimizationAdvice> {
        self.advice.iter().find(|a| a.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedAdvice {
    pub id: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedPlan {
    pub kept: Vec<u32>,
    pub dropped: Vec<DroppedAdvice>,
    pub profile_digest: String,
}

impl PrunedPlan {
    pub fn kept_advice<'a>(&self, plan: &'a Plan) -> Vec<&'a OptimizationAdvice> {
        plan.advice.iter().filter(|a| self.kept.contains(&a.id)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pruned plan serializes")
    }
}

pub const UNMENTIONED: &str = "unmentioned";

pub fn build_plan_prompt(p: &SourceProgram, templates: &TemplateSet) -> Result<String> {
    if p.blocks().is_empty() {
        return Err(PlannerError::NoEvolveBlocks);
    }
    Ok(templates.plan.render(&[("program", p.full_text())])?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdviceParse {
    pub plan: Plan,
    /// Non-blank lines that were not list items.
    pub skipped_lines: usize,
}

fn list_item_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•+])\s+(\S.*)$").unwrap())
}

fn split_first_sentence(text: &str) -> (&str, &str) {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            return (text[..i].trim(), text[i + 1..].trim());
        }
    }
    (text.trim().trim_end_matches('.'), "")
}

fn is_precondition(sentence: &str) -> bool {
    let lower = sentence.to_lowercase();
    ["requires", "only when", "only if", "precondition"]
        .iter()
        .any(|p| lower.starts_with(p))
}

/// Numbered (`1.`, `2)`) and bulleted (`-`, `*`) lines become advice items in
/// order. The first sentence is the title; sentences starting with
/// "Requires"/"Only when" become preconditions.
pub fn parse_advice(response: &str, source_digest: impl Into<String>) -> Result<AdviceParse> {
    let mut advice = Vec::new();
    let mut skipped_lines = 0;
    for line in response.lines() {
        let Some(caps) = list_item_re().captures(line) else {
            if !line.trim().is_empty() {
                skipped_lines += 1;
            }
            continue;
        };
        let body = caps[1].replace("**", "");
        let (title, rest) = split_first_sentence(&body);
        if title.is_empty() {
            skipped_lines += 1;
            continue;
        }
        let mut rationale = Vec::new();
        let mut preconditions = Vec::new();
        let mut remaining = rest;
        while !remaining.is_empty() {
            let (sentence, tail) = split_first_sentence(remaining);
            let sentence = format!("{sentence}.");
            if is_precondition(&sentence) {
                preconditions.push(sentence);
            } else {
                rationale.push(sentence);
            }
            remaining = tail;
        }
        advice.push(OptimizationAdvice {
            id: advice.len() as u32 + 1,
            title: title.to_string(),
            rationale: rationale.join(" "),
            preconditions: preconditions.join(" "),
        });
    }
    if advice.is_empty() {
        return Err(PlannerError::EmptyPlan);
    }
    if skipped_lines > 0 {
        log::debug!("skipped {skipped_lines} non-list lines in planner response");
    }
    Ok(AdviceParse {
        plan: Plan {
            advice,
            source_digest: source_digest.into(),
        },
        skipped_lines,
    })
}

fn waves_phrase(waves: u64) -> String {
    if waves == 1 {
        "1 wave".into()
    } else {
        format!("{waves} waves")
    }
}

/// Machine-readable `key = value` profile lines embedded in the prune prompt.
pub fn profile_lines(sys: &SystemProfile, wl: &WorkloadStats, occ: &OccupancyAnalysis) -> String {
    let verdict = classify_roofline(sys);
    let stall = dominant_stall(sys)
        .map(|(n, v)| format!("{n} ({v})"))
        .unwrap_or_else(|_| "none".into());
    let rows: Vec<(&str, String)> = vec![
        ("roofline", verdict.kind.to_string()),
        ("roofline_margin", format!("{:.4}", verdict.margin)),
        ("ai_kernel", sys.ai_kernel.to_string()),
        ("ai_turning_point", sys.ai_turning_point.to_string()),
        ("perf_kernel", sys.perf_kernel.to_string()),
        ("perf_turning_point", sys.perf_turning_point.to_string()),
        ("warp_cycles_per_issued_instruction", sys.warp_cycles_per_issued_instruction.to_string()),
        ("theoretical_occupancy_pct", sys.theoretical_occupancy_pct.to_string()),
        ("achieved_occupancy_pct", sys.achieved_occupancy_pct.to_string()),
        ("dominant_stall", stall),
        ("top_unit", format!("{} ({}%)", sys.top_unit.0, sys.top_unit.1)),
        ("total_blocks", occ.total_blocks.to_string()),
        ("concurrent_blocks", occ.concurrent_blocks.to_string()),
        ("waves", occ.waves.to_string()),
        ("mean_per_tile", wl.mean_per_tile.to_string()),
        ("var_per_tile", wl.var_per_tile.to_string()),
        ("mean_computed_fraction", wl.mean_computed_fraction.to_string()),
        ("var_computed_fraction", wl.var_computed_fraction.to_string()),
    ];
    rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>().trim_end().to_string()
}

/// Parses `key = value` lines back out of a prune prompt's profile section.
pub fn parse_profile_lines(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once(" = ")?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn profile_summary(sys: &SystemProfile, wl: &WorkloadStats, occ: &OccupancyAnalysis) -> String {
    let verdict = classify_roofline(sys);
    let mut lines = vec![format!(
        "The kernel is {}: its arithmetic intensity of {} FLOP/byte is {:.2}x the roofline turning point of {} FLOP/byte.",
        verdict.kind, sys.ai_kernel, verdict.margin, sys.ai_turning_point
    )];
    if let Ok((name, value)) = dominant_stall(sys) {
        lines.push(format!(
            "The dominant stall reason is {name} ({value} cycles per issued instruction); achieved occupancy is {}% of a theoretical {}%.",
            sys.achieved_occupancy_pct, sys.theoretical_occupancy_pct
        ));
    }
    lines.push(format!(
        "The busiest unit is {} at {}% of active cycles.",
        sys.top_unit.0, sys.top_unit.1
    ));
    lines.push(format!(
        "The image needs {} thread blocks and {} fit on the GPU at once, so the launch runs {}.",
        occ.total_blocks,
        occ.concurrent_blocks,
        waves_phrase(occ.waves)
    ));
    let cv2 = if wl.mean_per_tile > 0.0 {
        wl.var_per_tile / (wl.mean_per_tile * wl.mean_per_tile)
    } else {
        0.0
    };
    lines.push(format!(
        "Splats per tile: mean {}, variance {} ({} inter-block imbalance).",
        wl.mean_per_tile,
        wl.var_per_tile,
        if cv2 > 0.25 { "high" } else { "low" }
    ));
    let pct = wl.mean_computed_fraction * 100.0;
    if wl.mean_computed_fraction >= EARLY_STOP_RARE_FRACTION {
        lines.push(format!(
            "Early stop rarely fires: on average {pct:.0}% of the assigned splats are evaluated per pixel (variance {})."
            , wl.var_computed_fraction
        ));
    } else {
        lines.push(format!(
            "Early stop fires often: on average only {pct:.0}% of the assigned splats are evaluated per pixel (variance {}).",
            wl.var_computed_fraction
        ));
    }
    lines.join("\n")
}

pub fn profile_digest(sys: &SystemProfile, wl: &WorkloadStats, occ: &OccupancyAnalysis) -> String {
    hex::encode(Sha256::digest(profile_lines(sys, wl, occ).as_bytes()))
}

pub fn build_prune_prompt(
    plan: &Plan,
    sys: &SystemProfile,
    wl: &WorkloadStats,
    occ: &OccupancyAnalysis,
    templates: &TemplateSet,
) -> Result<String> {
    if plan.advice.is_empty() {
        return Err(PlannerError::EmptyPlan);
    }
    let advice = plan.render_list();
    Ok(templates.prune.render(&[
        ("summary", &profile_summary(sys, wl, occ)),
        ("profile", &profile_lines(sys, wl, occ)),
        ("advice", advice.trim_end()),
    ])?)
}

fn directive_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(keep|kept|retain(?:ed)?|select(?:ed)?|drop(?:ped)?|discard(?:ed)?|reject(?:ed)?)\b\s*(?:ids?|items?|advice|suggestions?)?\s*[:\-]?\s*(#?\d+(?:\s*(?:,|and|&|/)\s*#?\d+)*)",
        )
        .unwrap()
    })
}

fn clean_reason(raw: &str) -> String {
    let end = raw.find([';', '\n']).unwrap_or(raw.len());
    raw[..end]
        .trim()
        .trim_start_matches([':', '-', '(', '—', ' '])
        .trim_end_matches([')', '.', ',', ' '])
        .trim()
        .to_string()
}

/// Partitions the plan's ids into kept and dropped according to `KEEP`/`DROP`
/// style directives. The first directive naming an id wins; ids never named
/// are dropped as "unmentioned".
pub fn parse_pruned(response: &str, plan: &Plan, profile_digest: impl Into<String>) -> Result<PrunedPlan> {
    let matches: Vec<_> = directive_re().captures_iter(response).collect();
    let mut decisions: BTreeMap<u32, (bool, String)> = BTreeMap::new();
    for (i, caps) in matches.iter().enumerate() {
        let whole = caps.get(0).unwrap();
        let verb = caps[1].to_lowercase();
        let keep = ["keep", "kept", "retain", "select"].iter().any(|v| verb.starts_with(v));
        let reason_end = matches.get(i + 1).map_or(response.len(), |n| n.get(0).unwrap().start());
        let reason = clean_reason(&response[whole.end()..reason_end]);
        for id in caps[2]
            .split(|c: char| !c.is_ascii_digit())
            .filter_map(|s| s.parse::<u32>().ok())
        {
            if plan.get(id).is_some() {
                decisions.entry(id).or_insert((keep, reason.clone()));
            }
        }
    }
    if decisions.is_empty() {
        return Err(PlannerError::NoIdsRecognized);
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for a in &plan.advice {
        match decisions.get(&a.id) {
            Some((true, _)) => kept.push(a.id),
            Some((false, reason)) => dropped.push(DroppedAdvice {
                id: a.id,
                reason: if reason.is_empty() {
                    "dropped by planner".into()
                } else {
                    reason.clone()
                },
            }),
            None => dropped.push(DroppedAdvice {
                id: a.id,
                reason: UNMENTIONED.into(),
            }),
        }
    }
    Ok(PrunedPlan {
        kept,
        dropped,
        profile_digest: profile_digest.into(),
    })
}

/// Generator prompt: the program plus the advice to try, if any.
pub fn build_generate_prompt(
    program: &SourceProgram,
    advice: &[&OptimizationAdvice],
    iteration: u64,
    templates: &TemplateSet,
) -> Result<String> {
    if program.blocks().is_empty() {
        return Err(PlannerError::NoEvolveBlocks);
    }
    let intro = if advice.is_empty() {
        String::new()
    } else {
        format!("Here are first {} to try.", advice.len())
    };
    let advice_text = advice.iter().map(|a| a.text()).collect::<Vec<_>>().join("\n");
    Ok(templates.generate.render(&[
        ("advice_intro", &intro),
        ("advice", &advice_text),
        ("iteration", &iteration.to_string()),
        ("program", program.full_text()),
    ])?)
}
