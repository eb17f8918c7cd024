//! Evolutionary search: generate from a selected parent, validate, optionally
//! check, evaluate, review, insert.

mod population;
mod run_dir;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{parse_verdict, CheckerError};
use crate::evaluator::{EvaluationResult, Evaluator, FailureKind};
use crate::llm::{Gateway, LlmError, Role};
use crate::oracle::WorkloadStats;
use crate::planner::{
    build_generate_prompt, build_plan_prompt, build_prune_prompt, parse_advice, parse_pruned, profile_digest,
    OptimizationAdvice, Plan, PlannerError, PrunedPlan,
};
use crate::profile::{OccupancyAnalysis, SystemProfile};
use crate::program::{extract_blocks, SourceProgram};
use crate::templates::{TemplateError, TemplateSet};

pub use population::{Member, Population};
pub use run_dir::{read_iterations, write_run_dir, RunMeta};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdviceMode {
    #[default]
    None,
    Plan,
    PrunedPlan,
}

fn d_iterations() -> u64 {
    40
}
fn d_population() -> usize {
    16
}
fn d_top_k() -> usize {
    8
}
fn d_tolerance() -> f64 {
    crate::evaluator::DEFAULT_TOLERANCE
}
fn d_record_every() -> u64 {
    10
}
fn d_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(default = "d_iterations")]
    pub max_iterations: u64,
    #[serde(default = "d_population")]
    pub population_size: usize,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub advice_mode: AdviceMode,
    #[serde(default)]
    pub check_enabled: bool,
    #[serde(default = "d_tolerance")]
    pub tolerance: f64,
    #[serde(default = "d_record_every")]
    pub record_every: u64,
    /// Candidates generated and evaluated per batch. 1 is strictly
    /// sequential; larger batches select parents from the population as it
    /// stood at the start of the batch.
    #[serde(default = "d_workers")]
    pub eval_workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.population_size == 0 {
            return bad("population_size must be at least 1");
        }
        if self.top_k == 0 || self.top_k > self.population_size {
            return bad("top_k must be between 1 and population_size");
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be non-negative");
        }
        if self.eval_workers == 0 {
            return bad("eval_workers must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("writing run directory: {0}")]
    Io(#[from] std::io::Error),
}

impl SearchError {
    pub fn is_backend(&self) -> bool {
        matches!(self, SearchError::Backend(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub candidate_id: String,
    pub parent_id: String,
    pub score: f64,
    pub failure: Option<FailureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_detail: Option<String>,
    pub speedup: Option<f64>,
    pub accuracy_err: Option<f64>,
    pub checked: bool,
    pub inserted: bool,
    pub llm_calls: u32,
    pub review: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCandidate {
    pub id: String,
    pub score: f64,
    pub program: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub iterations: u64,
    pub best_curve: Vec<(u64, f64)>,
    pub error_curve: Vec<(u64, f64)>,
    pub final_best: BestCandidate,
    pub total_llm_calls: u64,
    pub planner_calls: u32,
    pub errors: u64,
    pub final_population: Vec<String>,
}

impl SearchReport {
    pub fn error_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.errors as f64 / self.iterations as f64
        }
    }
}

/// Advice fed to every generation prompt, and how it was obtained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdviceBundle {
    pub plan: Option<Plan>,
    pub pruned: Option<PrunedPlan>,
    pub advice: Vec<OptimizationAdvice>,
    pub planner_calls: u32,
}

/// Profile inputs the prune step needs.
#[derive(Debug, Clone, Copy)]
pub struct PlanningContext<'a> {
    pub sys: &'a SystemProfile,
    pub wl: &'a WorkloadStats,
    pub occ: &'a OccupancyAnalysis,
}

pub fn request_plan(baseline: &SourceProgram, gateway: &Gateway, templates: &TemplateSet) -> Result<Plan, SearchError> {
    let prompt = build_plan_prompt(baseline, templates)?;
    let ex = gateway.call(Role::Planner, &prompt)?;
    Ok(parse_advice(&ex.response, baseline.digest())?.plan)
}

pub fn request_pruning(
    plan: &Plan,
    ctx: PlanningContext<'_>,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<PrunedPlan, SearchError> {
    let prompt = build_prune_prompt(plan, ctx.sys, ctx.wl, ctx.occ, templates)?;
    let ex = gateway.call(Role::Planner, &prompt)?;
    Ok(parse_pruned(&ex.response, plan, profile_digest(ctx.sys, ctx.wl, ctx.occ))?)
}

pub fn prepare_advice(
    mode: AdviceMode,
    baseline: &SourceProgram,
    ctx: Option<PlanningContext<'_>>,
    gateway: &Gateway,
    templates: &TemplateSet,
) -> Result<AdviceBundle, SearchError> {
    if mode == AdviceMode::None {
        return Ok(AdviceBundle::default());
    }
    let plan = request_plan(baseline, gateway, templates)?;
    if mode == AdviceMode::Plan {
        return Ok(AdviceBundle {
            advice: plan.advice.clone(),
            plan: Some(plan),
            pruned: None,
            planner_calls: 1,
        });
    }
    let ctx = ctx.ok_or_else(|| SearchError::Config("pruned_plan needs a metrics profile and workload stats".into()))?;
    let pruned = request_pruning(&plan, ctx, gateway, templates)?;
    let advice = pruned.kept_advice(&plan).into_iter().cloned().collect();
    Ok(AdviceBundle {
        plan: Some(plan),
        pruned: Some(pruned),
        advice,
        planner_calls: 2,
    })
}

/// Code inside the first fenced block, or the whole response.
pub fn extract_code(response: &str) -> &str {
    let Some(open) = response.find("```") else {
        return response;
    };
    let after = &response[open + 3..];
    let Some(nl) = after.find('\n') else {
        return response;
    };
    let body = &after[nl + 1..];
    match body.find("\n```") {
        Some(close) => &body[..close + 1],
        None if body.starts_with("```") => "",
        None => body,
    }
}

pub struct SearchOutcome {
    pub report: SearchReport,
    pub records: Vec<IterationRecord>,
    pub checkpoints: Vec<(u64, SourceProgram)>,
    pub population: Population,
}

struct Proposal {
    candidate: Option<SourceProgram>,
    candidate_id: String,
    parent_id: String,
    result: EvaluationResult,
    checked: bool,
    llm_calls: u32,
    review: String,
}

fn is_fatal(e: &LlmError) -> bool {
    e.is_auth() || matches!(e, LlmError::InvalidConfig(_) | LlmError::NoBackend(_))
}

/// Backend failure for a candidate: fatal ones abort the run, the rest are
/// recorded against the iteration.
fn soft<T>(r: Result<T, LlmError>) -> Result<Result<T, LlmError>, SearchError> {
    match r {
        Err(e) if is_fatal(&e) => Err(SearchError::Backend(e)),
        other => Ok(other),
    }
}

struct Ctx<'a> {
    cfg: &'a SearchConfig,
    baseline: &'a SourceProgram,
    advice: Vec<&'a OptimizationAdvice>,
    gateway: &'a Gateway,
    evaluator: &'a Evaluator,
    templates: &'a TemplateSet,
}

fn validate_candidate(baseline: &SourceProgram, code: &str) -> Result<SourceProgram, String> {
    match baseline.diff_outside_blocks(code) {
        Ok(false) => {}
        Ok(true) => return Err("text outside evolve blocks changed".into()),
        Err(e) => return Err(e.to_string()),
    }
    let p = extract_blocks(code).map_err(|e| e.to_string())?;
    if p.blocks().len() != baseline.blocks().len() {
        return Err("evolve block count changed".into());
    }
    Ok(p)
}

fn propose(ctx: &Ctx<'_>, parent: &Member, iteration: u64) -> Result<Proposal, SearchError> {
    let prompt = build_generate_prompt(&parent.program, &ctx.advice, iteration, ctx.templates)?;
    let mut llm_calls = 1;
    let mut checked = false;
    let mut candidate = None;
    let mut candidate_id = String::new();

    let result = match soft(ctx.gateway.call(Role::Generator, &prompt))? {
        Err(e) => EvaluationResult::failed(FailureKind::BackendError, e.to_string()),
        Ok(ex) => {
            let code = extract_code(&ex.response);
            candidate_id = crate::program::short_digest(code);
            match validate_candidate(ctx.baseline, code) {
                Err(detail) => EvaluationResult::failed(FailureKind::MarkerViolation, detail),
                Ok(p) => {
                    candidate_id = p.short_id();
                    let rejection = if ctx.cfg.check_enabled {
                        checked = true;
                        llm_calls += 1;
                        let check_prompt = crate::checker::build_check_prompt(ctx.baseline, &p, ctx.templates)
                            .map_err(|e| match e {
                                CheckerError::Template(t) => SearchError::Template(t),
                                other => SearchError::Config(other.to_string()),
                            })?;
                        match soft(ctx.gateway.call(Role::Checker, &check_prompt))? {
                            Err(e) => Some(format!("checker unavailable: {e}")),
                            Ok(ex) => match parse_verdict(&ex.response, &ex.label) {
                                Ok(v) if v.equivalent => None,
                                Ok(v) => Some(format!("checker: {}", v.reasons.join("; "))),
                                Err(e) => Some(e.to_string()),
                            },
                        }
                    } else {
                        None
                    };
                    let result = match rejection {
                        Some(detail) => EvaluationResult::failed(FailureKind::EquivalenceRejected, detail),
                        None => ctx.evaluator.evaluate(&p),
                    };
                    candidate = Some(p);
                    result
                }
            }
        }
    };

    let summary = match result.failure {
        Some(kind) => format!("score 0, failure {kind:?}"),
        None => format!("score {:.4}, speedup {:.4}", result.score, result.speedup.unwrap_or(0.0)),
    };
    let candidate_text = candidate.as_ref().map(|p| p.full_text()).unwrap_or("");
    let review_prompt = ctx
        .templates
        .review
        .render(&[("evaluation", &summary), ("candidate", candidate_text)])?;
    llm_calls += 1;
    let review = match soft(ctx.gateway.call(Role::Reviewer, &review_prompt))? {
        Ok(ex) => ex.response,
        Err(e) => format!("review unavailable: {e}"),
    };

    Ok(Proposal {
        candidate,
        candidate_id,
        parent_id: parent.id.clone(),
        result,
        checked,
        llm_calls,
        review,
    })
}

pub fn run_search(
    cfg: &SearchConfig,
    baseline: &SourceProgram,
    advice: &AdviceBundle,
    gateway: &Gateway,
    evaluator: &Evaluator,
    templates: &TemplateSet,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    if baseline.blocks().is_empty() {
        return Err(SearchError::Config("baseline has no EVOLVE-BLOCK regions".into()));
    }
    for role in [Role::Generator, Role::Reviewer] {
        gateway.backend(role)?;
    }
    if cfg.check_enabled {
        gateway.backend(Role::Checker)?;
    }
    let ctx = Ctx {
        cfg,
        baseline,
        advice: advice.advice.iter().collect(),
        gateway,
        evaluator,
        templates,
    };
    let mut population = Population::new(
        Member {
            id: baseline.short_id(),
            program: baseline.clone(),
            score: 1.0,
            latency: evaluator.baseline_latency(),
            inserted: 0,
        },
        cfg.population_size,
    );
    let mut records = Vec::new();
    let mut best_curve = Vec::new();
    let mut error_curve = Vec::new();
    let mut checkpoints = Vec::new();
    let mut errors = 0u64;
    let mut total_llm_calls = 0u64;

    let mut iteration = 1;
    while iteration <= cfg.max_iterations {
        let batch_end = (iteration + cfg.eval_workers as u64 - 1).min(cfg.max_iterations);
        let parents: Vec<(u64, Member)> = (iteration..=batch_end)
            .map(|i| (i, population.select_parent(cfg.seed, i, cfg.top_k).clone()))
            .collect();
        let proposals: Vec<Result<Proposal, SearchError>> = if parents.len() == 1 {
            parents.iter().map(|(i, p)| propose(&ctx, p, *i)).collect()
        } else {
            parents.par_iter().map(|(i, p)| propose(&ctx, p, *i)).collect()
        };
        for ((i, _), proposal) in parents.iter().zip(proposals) {
            let p = proposal?;
            let inserted = match (&p.candidate, p.result.failure) {
                (Some(program), None) => population.insert(
                    p.candidate_id.clone(),
                    program.clone(),
                    p.result.score,
                    p.result.latency.unwrap_or(f64::INFINITY),
                ),
                _ => false,
            };
            if p.result.failure.is_some() {
                errors += 1;
            }
            total_llm_calls += p.llm_calls as u64;
            records.push(IterationRecord {
                iteration: *i,
                candidate_id: p.candidate_id,
                parent_id: p.parent_id,
                score: p.result.score,
                failure: p.result.failure,
                failure_detail: p.result.failure_detail,
                speedup: p.result.speedup,
                accuracy_err: p.result.accuracy_err,
                checked: p.checked,
                inserted,
                llm_calls: p.llm_calls,
                review: p.review,
            });
            if i % cfg.record_every == 0 {
                let best = population.best();
                best_curve.push((*i, best.score));
                error_curve.push((*i, errors as f64 / *i as f64));
                checkpoints.push((*i, best.program.clone()));
            }
        }
        iteration = batch_end + 1;
    }

    let best = population.best();
    let report = SearchReport {
        iterations: cfg.max_iterations,
        best_curve,
        error_curve,
        final_best: BestCandidate {
            id: best.id.clone(),
            score: best.score,
            program: best.program.full_text().to_string(),
        },
        total_llm_calls,
        planner_calls: advice.planner_calls,
        errors,
        final_population: population.ranked().iter().map(|m| m.id.clone()).collect(),
    };
    Ok(SearchOutcome {
        report,
        records,
        checkpoints,
        population,
    })
}
