//! Deterministic stand-ins for each role. Every response is a pure function
//! of (seed, label, profile, prompt).

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{MockProfile, Role};
use crate::catalog::{generator_label, is_annotation, TransformCatalog, GENERATOR_TAG, TRANSFORM_TAG};
use crate::oracle::WorkloadStats;
use crate::planner::{parse_advice, parse_profile_lines};
use crate::profile::RooflineKind;
use crate::program::{extract_blocks, Modification, END_MARKER};
use crate::templates::{
    section, ADVICE_CLOSE, ADVICE_OPEN, CANDIDATE_CLOSE, CANDIDATE_OPEN, ORIGINAL_CLOSE, ORIGINAL_OPEN, PROFILE_CLOSE,
    PROFILE_OPEN, PROGRAM_CLOSE, PROGRAM_OPEN,
};

/// Weight added per advice keyword hit when the profile gives none.
pub const DEFAULT_KEYWORD_BIAS: f64 = 4.0;

const EXTRA_PLAN_ITEMS: [&str; 2] = [
    "Make CHANNELS a template parameter. The per-channel loops can then be fully unrolled.",
    "Order contributors to hit the transmittance cutoff earlier. Front-loading opaque splats ends the blend loop sooner.",
];

fn rng_for(seed: u64, label: &str, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub(super) fn respond(
    role: Role,
    seed: u64,
    label: &str,
    profile: &MockProfile,
    catalog: &TransformCatalog,
    prompt: &str,
) -> String {
    match role {
        Role::Planner if section(prompt, PROFILE_OPEN, PROFILE_CLOSE).is_some() => mock_prune(catalog, prompt),
        Role::Planner => mock_plan(catalog, seed, prompt),
        Role::Generator => mock_generate(profile, catalog, seed, label, prompt),
        Role::Checker => {
            let original = section(prompt, ORIGINAL_OPEN, ORIGINAL_CLOSE).unwrap_or_default();
            let candidate = section(prompt, CANDIDATE_OPEN, CANDIDATE_CLOSE).unwrap_or_default();
            mock_check(profile, catalog, seed, label, original, candidate)
        }
        Role::Reviewer => mock_review(prompt),
    }
}

/// Numbered advice list: the catalog's advice followed by items no transform
/// implements.
pub fn mock_plan(catalog: &TransformCatalog, seed: u64, prompt: &str) -> String {
    let mut items: Vec<&str> = catalog
        .entries
        .iter()
        .filter(|e| !e.advice.is_empty())
        .map(|e| e.advice.as_str())
        .collect();
    items.extend(EXTRA_PLAN_ITEMS);
    // Rotate so different seeds list items in a different order.
    let mut rng = rng_for(seed, "plan", &[prompt]);
    let shift = rng.gen_range(0..items.len());
    items.rotate_left(shift);
    let mut out = String::from("Here are optimizations likely to reduce latency for this kernel.\n\n");
    for (i, item) in items.iter().enumerate() {
        out.push_str(&format!("{}. {item}\n", i + 1));
    }
    out
}

fn workload_from(kv: &std::collections::BTreeMap<String, String>) -> (WorkloadStats, RooflineKind) {
    let num = |k: &str| kv.get(k).and_then(|v| v.parse::<f64>().ok()).unwrap_or(0.0);
    let wl = WorkloadStats {
        mean_per_tile: num("mean_per_tile"),
        var_per_tile: num("var_per_tile"),
        mean_computed_fraction: num("mean_computed_fraction"),
        var_computed_fraction: num("var_computed_fraction"),
    };
    let kind = match kv.get("roofline").map(String::as_str) {
        Some("compute-bound") => RooflineKind::ComputeBound,
        _ => RooflineKind::MemoryBound,
    };
    (wl, kind)
}

/// Keeps advice whose transform's condition holds on the embedded profile.
pub fn mock_prune(catalog: &TransformCatalog, prompt: &str) -> String {
    let advice = section(prompt, ADVICE_OPEN, ADVICE_CLOSE).unwrap_or_default();
    let kv = parse_profile_lines(section(prompt, PROFILE_OPEN, PROFILE_CLOSE).unwrap_or_default());
    let (wl, kind) = workload_from(&kv);
    let Ok(parsed) = parse_advice(advice, "") else {
        return "There is nothing to prune.".into();
    };
    let mut out = String::new();
    for a in &parsed.plan.advice {
        let text = format!("{} {}", a.title, a.rationale);
        let mapped = catalog.mentioned(&text);
        let line = match mapped.first() {
            None => format!("DROP {}: no measurable effect expected on this profile", a.id),
            Some(e) if e.unsafe_transform => format!("DROP {}: changes the rendered output", a.id),
            Some(e) => match e.condition {
                Some(c) if !c.holds(&wl, kind) => format!("DROP {}: {}", a.id, c.describe()),
                Some(c) => format!("KEEP {}: profile satisfies it ({})", a.id, c.describe()),
                None => format!("KEEP {}: applies regardless of the profile", a.id),
            },
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn indent_of(body: &str) -> &str {
    body.lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| &l[..l.len() - l.trim_start().len()])
        .unwrap_or("")
}

/// Adds one catalog transform (weighted toward those the advice mentions) to
/// the program's tags and returns the rewritten program in a fenced block.
pub fn mock_generate(profile: &MockProfile, catalog: &TransformCatalog, seed: u64, label: &str, prompt: &str) -> String {
    let Some(program_text) = section(prompt, PROGRAM_OPEN, PROGRAM_CLOSE) else {
        return "I could not find a program in the request.".into();
    };
    let program = match extract_blocks(program_text) {
        Ok(p) if !p.blocks().is_empty() => p,
        _ => return format!("```\n{program_text}\n```\n"),
    };
    let advice = section(prompt, ADVICE_OPEN, ADVICE_CLOSE).unwrap_or_default().to_lowercase();
    let mut rng = rng_for(seed, label, &[prompt]);
    let u_unsafe: f64 = rng.gen();
    let u_malformed: f64 = rng.gen();
    let u_mode: f64 = rng.gen();

    let mut tags: BTreeSet<String> = crate::catalog::transform_tags(&program);
    let options: Vec<(&str, f64)> = catalog
        .entries
        .iter()
        .filter(|e| !e.unsafe_transform && !tags.contains(&e.tag))
        .filter(|e| !e.needs_prompt || e.mentioned_in(&advice))
        .map(|e| {
            let bias: f64 = e
                .keywords
                .iter()
                .filter(|k| advice.contains(k.as_str()))
                .map(|k| profile.catalog_bias.get(k).copied().unwrap_or(DEFAULT_KEYWORD_BIAS))
                .sum();
            (e.tag.as_str(), 1.0 + bias)
        })
        .collect();
    if let Ok(dist) = WeightedIndex::new(options.iter().map(|o| o.1)) {
        tags.insert(options[dist.sample(&mut rng)].0.to_string());
    }
    if u_unsafe < profile.p_unsafe {
        for e in catalog.entries.iter().filter(|e| e.unsafe_transform) {
            tags.insert(e.tag.clone());
        }
    }

    let body = &program.blocks()[0].body;
    let indent = indent_of(body);
    let mut new_body = format!("{indent}// {GENERATOR_TAG} {label}\n");
    for t in &tags {
        new_body.push_str(&format!("{indent}// {TRANSFORM_TAG} {t}\n"));
    }
    for line in body.lines().filter(|l| !is_annotation(l)) {
        new_body.push_str(line);
        new_body.push('\n');
    }
    let mut text = program
        .apply(&Modification::new("mock", "").replace(0, new_body))
        .map(|p| p.full_text().to_string())
        .unwrap_or_else(|_| program_text.to_string());

    if u_malformed < profile.p_malformed {
        text = corrupt(&text, u_mode < 0.5);
    }
    format!("Here is the optimized kernel.\n```cuda\n{text}```\n")
}

/// Either deletes the first end marker or appends a stray line after the last
/// one. Both break the outside-of-block contract.
fn corrupt(text: &str, drop_marker: bool) -> String {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut out = String::with_capacity(text.len());
    if drop_marker {
        let mut dropped = false;
        for l in lines {
            if !dropped && l.contains(END_MARKER) {
                dropped = true;
                continue;
            }
            out.push_str(l);
        }
    } else {
        let last = lines.iter().rposition(|l| l.contains(END_MARKER));
        for (i, l) in lines.iter().enumerate() {
            out.push_str(l);
            if Some(i) == last {
                if !l.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str("}} // stray brace\n");
            }
        }
    }
    out
}

fn declared_tags(text: &str) -> BTreeSet<String> {
    text.lines()
        .filter_map(|l| {
            let rest = &l[l.find(TRANSFORM_TAG)? + TRANSFORM_TAG.len()..];
            rest.split_whitespace().next().map(str::to_string)
        })
        .collect()
}

/// Flags candidates carrying an unsafe tag with the configured detection
/// probability for the candidate's generator.
pub fn mock_check(
    profile: &MockProfile,
    catalog: &TransformCatalog,
    seed: u64,
    label: &str,
    original: &str,
    candidate: &str,
) -> String {
    let unsafe_tags: Vec<String> = declared_tags(candidate)
        .into_iter()
        .filter(|t| catalog.get(t).is_some_and(|e| e.unsafe_transform))
        .collect();
    if unsafe_tags.is_empty() {
        return "EQUIVALENT\nThe rewrite preserves the blending order and thresholds.".into();
    }
    let generator = generator_label(candidate);
    let p = profile.detection_probability(generator.as_deref());
    let mut rng = rng_for(seed, label, &[original, candidate]);
    let u: f64 = rng.gen();
    if u < p {
        let mut out = String::from("NOT EQUIVALENT\n");
        for t in unsafe_tags {
            out.push_str(&format!(
                "The `{t}` rewrite skips splats inside each batch, so pixels lose contributions the original accumulates.\n"
            ));
        }
        out
    } else {
        "EQUIVALENT\nThe candidate appears to compute the same image.".into()
    }
}

pub fn mock_review(prompt: &str) -> String {
    let candidate = section(prompt, CANDIDATE_OPEN, CANDIDATE_CLOSE).unwrap_or_default();
    let tags = declared_tags(candidate);
    let evaluation = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Evaluation: "))
        .unwrap_or("not available");
    let applied = if tags.is_empty() {
        "no declared transforms".to_string()
    } else {
        tags.into_iter().collect::<Vec<_>>().join(", ")
    };
    format!("The candidate applies {applied}. Evaluation: {evaluation}.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::transform_tags;
    use crate::planner::build_generate_prompt;
    use crate::program::{diff_outside_blocks, SourceProgram};
    use crate::templates::TemplateSet;

    const KERNEL: &str = "void k() {\n    // EVOLVE-BLOCK-START\n    float T = 1.0f;\n    // EVOLVE-BLOCK-END\n}\n";

    fn quiet() -> MockProfile {
        MockProfile::default()
    }

    fn prompt_with(advice: &str, iteration: u64) -> String {
        TemplateSet::default()
            .generate
            .render(&[
                ("advice_intro", ""),
                ("advice", advice),
                ("iteration", &iteration.to_string()),
                ("program", KERNEL),
            ])
            .unwrap()
    }

    fn generated(profile: &MockProfile, prompt: &str) -> SourceProgram {
        let out = mock_generate(profile, &TransformCatalog::default(), 7, "GPT-5", prompt);
        let code = out.split("```cuda\n").nth(1).unwrap().trim_end().trim_end_matches("```");
        extract_blocks(code).unwrap()
    }

    #[test]
    fn advice_steers_toward_mentioned_transform() {
        let profile = MockProfile {
            catalog_bias: [("fast-math".to_string(), 1000.0)].into(),
            ..quiet()
        };
        let p = generated(&profile, &prompt_with("Use fast-math intrinsics.", 1));
        assert!(transform_tags(&p).contains("fastmath"));
        let base = extract_blocks(KERNEL).unwrap();
        assert!(!diff_outside_blocks(&base, p.full_text()).unwrap());
        assert_eq!(generator_label(p.full_text()).as_deref(), Some("GPT-5"));
    }

    #[test]
    fn shared_memory_layout_needs_advice() {
        let catalog = TransformCatalog::default();
        for i in 0..40 {
            let p = generated(&quiet(), &prompt_with("", i));
            let tags = transform_tags(&p);
            assert_eq!(tags.len(), 1);
            assert!(!tags.contains("shmem-layout"));
            assert!(tags.iter().all(|t| !catalog.entry(t).unwrap().unsafe_transform));
        }
    }

    #[test]
    fn unsafe_probability_one() {
        let profile = MockProfile { p_unsafe: 1.0, ..quiet() };
        let p = generated(&profile, &prompt_with("", 3));
        assert!(transform_tags(&p).contains("remove-inner-loop"));
    }

    #[test]
    fn malformed_probability_one_breaks_markers() {
        let profile = MockProfile { p_malformed: 1.0, ..quiet() };
        let base = extract_blocks(KERNEL).unwrap();
        for i in 0..20 {
            let out = mock_generate(&profile, &TransformCatalog::default(), 7, "m", &prompt_with("", i));
            let code = out.split("```cuda\n").nth(1).unwrap().trim_end_matches("```\n");
            assert!(!matches!(diff_outside_blocks(&base, code), Ok(false)), "iteration {i}: {code}");
        }
    }

    #[test]
    fn checker_detection_follows_accuracy() {
        let catalog = TransformCatalog::default();
        let unsafe_src = "// @generator Gemini\n// @transform remove-inner-loop\n";
        let always = MockProfile {
            checker_accuracy: [("Gemini".to_string(), 1.0)].into(),
            ..quiet()
        };
        let never = MockProfile {
            checker_accuracy: [("Gemini".to_string(), 0.0), ("*".to_string(), 1.0)].into(),
            ..quiet()
        };
        assert!(mock_check(&always, &catalog, 1, "c", KERNEL, unsafe_src).starts_with("NOT EQUIVALENT"));
        assert!(mock_check(&never, &catalog, 1, "c", KERNEL, unsafe_src).starts_with("EQUIVALENT"));
        assert!(mock_check(&always, &catalog, 1, "c", KERNEL, KERNEL).starts_with("EQUIVALENT"));
    }

    #[test]
    fn plan_then_prune_on_compute_bound_profile() {
        let catalog = TransformCatalog::default();
        let plan = mock_plan(&catalog, 3, "x");
        let parsed = parse_advice(&plan, "d").unwrap().plan;
        assert_eq!(parsed.advice.len(), 9);
        let prompt = format!(
            "{PROFILE_OPEN}\nroofline = compute-bound\nmean_per_tile = 1189\nmean_computed_fraction = 0.95\n{PROFILE_CLOSE}\n{ADVICE_OPEN}\n{}{ADVICE_CLOSE}\n",
            parsed.render_list()
        );
        let pruned = crate::planner::parse_pruned(&mock_prune(&catalog, &prompt), &parsed, "").unwrap();
        let kept: BTreeSet<String> = pruned
            .kept_advice(&parsed)
            .iter()
            .flat_map(|a| catalog.mentioned(&a.text()).into_iter().map(|e| e.tag.clone()))
            .collect();
        let expected: BTreeSet<String> = [
            "fastmath",
            "drop-contributor",
            "simplify-loop",
            "coalesce-rgb",
            "shmem-layout",
            "remove-early-stop",
        ]
        .map(String::from)
        .into();
        assert_eq!(kept, expected);
        assert_eq!(pruned.kept.len(), 6);
    }

    #[test]
    fn review_is_deterministic() {
        let p = "Evaluation: score 1.1\n=== CANDIDATE ===\n// @transform fastmath\n=== END CANDIDATE ===";
        assert_eq!(mock_review(p), "The candidate applies fastmath. Evaluation: score 1.1.");
    }

    #[test]
    fn generate_prompt_round_trip() {
        let base = extract_blocks(KERNEL).unwrap();
        let prompt = build_generate_prompt(&base, &[], 0, &TemplateSet::default()).unwrap();
        let p = generated(&quiet(), &prompt);
        assert_eq!(p.blocks().len(), 1);
    }
}
