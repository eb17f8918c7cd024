use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gsopt::catalog::TransformCatalog;
use gsopt::checker::{build_matrix, check as run_check, CheckerError};
use gsopt::evaluator::{CostModel, EvalBackend, Evaluator, SubprocessBackend};
use gsopt::llm::{Backend, BackendConfig, BackendKind, Gateway, LlmError, Role};
use gsopt::oracle::{render as render_scene, workload_stats, write_pfm, OracleError, Scene, WorkloadStats};
use gsopt::planner::{Plan, PlannerError};
use gsopt::profile::{
    classify_roofline, compute_waves, dominant_stall, read_workload, workload_to_csv, GpuShape, OccupancyAnalysis,
    SystemProfile,
};
use gsopt::program::SourceProgram;
use gsopt::search::{
    prepare_advice, read_iterations, request_plan, request_pruning, run_search, write_run_dir, AdviceBundle, PlanningContext,
    RunMeta, SearchError, SearchOutcome, SearchReport,
};
use gsopt::templates::TemplateSet;

use crate::config::{EvaluatorConfig, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mock: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ProfileArgs {
    pub metrics: Option<PathBuf>,
    pub workload: Option<PathBuf>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub sm_count: Option<u32>,
    pub block_limit: Option<u32>,
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn llm_err(e: LlmError) -> CliError {
    match e {
        LlmError::InvalidConfig(_) | LlmError::NoBackend(_) => CliError::Input(e.to_string()),
        e => CliError::Backend(e.to_string()),
    }
}

fn search_err(e: SearchError) -> CliError {
    match e {
        SearchError::Backend(e) => llm_err(e),
        // The planner answered with something that is not a usable list.
        SearchError::Planner(e @ (PlannerError::EmptyPlan | PlannerError::NoIdsRecognized)) => {
            CliError::Backend(e.to_string())
        }
        e => CliError::Input(e.to_string()),
    }
}

fn config(opts: &Options) -> Result<RunConfig, CliError> {
    let path = opts
        .config
        .as_deref()
        .ok_or_else(|| CliError::Input("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(opts.seed, opts.mock);
    Ok(cfg)
}

fn out_dir(opts: &Options) -> Result<&Path, CliError> {
    let dir = opts
        .out
        .as_deref()
        .ok_or_else(|| CliError::Input("--out is required for this command".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))
}

/// Refuses to start when a remote backend's key variable is unset.
fn ensure_keys<'a>(backends: impl IntoIterator<Item = &'a BackendConfig>) -> Result<(), CliError> {
    for b in backends {
        if b.kind == BackendKind::Remote {
            let env = b.api_key_env.as_deref().unwrap_or_default();
            if std::env::var_os(env).is_none() {
                return Err(llm_err(LlmError::AuthMissing { env: env.to_string() }));
            }
        }
    }
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    program: SourceProgram,
    scene: Scene,
    sys: SystemProfile,
    wl: WorkloadStats,
    occ: OccupancyAnalysis,
    catalog: Arc<TransformCatalog>,
    templates: TemplateSet,
}

impl Loaded {
    fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let program = SourceProgram::read(&cfg.source_path).map_err(input)?;
        let scene = Scene::read(&cfg.scene_path).map_err(input)?;
        let sys = SystemProfile::read(&cfg.metrics_path).map_err(input)?;
        let wl = read_workload(&cfg.workload_path).map_err(input)?;
        let [w, h] = cfg.image_size.unwrap_or([scene.width, scene.height]);
        let occ = compute_waves(w, h, scene.tile, &cfg.gpu_shape);
        let catalog = match &cfg.catalog_path {
            Some(p) => TransformCatalog::read(p).map_err(input)?,
            None => TransformCatalog::default(),
        };
        let templates = match &cfg.templates_dir {
            Some(d) => TemplateSet::load(d).map_err(input)?,
            None => TemplateSet::default(),
        };
        Ok(Self {
            cfg,
            program,
            scene,
            sys,
            wl,
            occ,
            catalog: Arc::new(catalog),
            templates,
        })
    }

    fn gateway(&self) -> Result<Gateway, CliError> {
        Gateway::new(self.cfg.backends.clone(), self.catalog.clone()).map_err(llm_err)
    }

    fn planning(&self) -> PlanningContext<'_> {
        PlanningContext {
            sys: &self.sys,
            wl: &self.wl,
            occ: &self.occ,
        }
    }

    fn evaluator(&self) -> Result<Evaluator, CliError> {
        let backend: Box<dyn EvalBackend> = match &self.cfg.evaluator {
            EvaluatorConfig::CostModel => Box::new(CostModel::new(self.catalog.clone(), self.wl, &self.sys, &self.scene)),
            EvaluatorConfig::Subprocess(cmds) => Box::new(SubprocessBackend::new(
                cmds.clone(),
                self.cfg.scene_path.clone(),
                render_scene(&self.scene).image,
            )),
        };
        Evaluator::new(backend, self.program.clone(), self.cfg.search.tolerance).map_err(input)
    }
}

fn waves_text(n: u64) -> String {
    if n == 1 {
        "1 wave".into()
    } else {
        format!("{n} waves")
    }
}

pub fn profile_report(sys: &SystemProfile, occ: &OccupancyAnalysis, wl: Option<&WorkloadStats>) -> String {
    let verdict = classify_roofline(sys);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "roofline: {} (arithmetic intensity {} vs turning point {} FLOP/byte, margin {:.4}x)",
        verdict.kind, sys.ai_kernel, sys.ai_turning_point, verdict.margin
    );
    match dominant_stall(sys) {
        Ok((name, v)) => {
            let _ = writeln!(s, "dominant stall: {name} ({v} cycles per issued instruction)");
        }
        Err(_) => s.push_str("dominant stall: none reported\n"),
    }
    let _ = writeln!(
        s,
        "occupancy: {}% achieved of {}% theoretical, busiest unit {} at {}%",
        sys.achieved_occupancy_pct, sys.theoretical_occupancy_pct, sys.top_unit.0, sys.top_unit.1
    );
    let _ = writeln!(
        s,
        "launch: {}x{} = {} blocks, {} concurrent, {}",
        occ.blocks_x,
        occ.blocks_y,
        occ.total_blocks,
        occ.concurrent_blocks,
        waves_text(occ.waves)
    );
    if let Some(wl) = wl {
        let _ = writeln!(
            s,
            "workload: {} splats per tile on average (variance {}), {}% of assigned splats computed per pixel (variance {})",
            wl.mean_per_tile,
            wl.var_per_tile,
            wl.mean_computed_fraction * 100.0,
            wl.var_computed_fraction
        );
    }
    s
}

pub fn profile(opts: &Options, args: ProfileArgs) -> Result<String, CliError> {
    let cfg = match &opts.config {
        Some(_) => Some(config(opts)?),
        None => None,
    };
    let metrics = args
        .metrics
        .or_else(|| cfg.as_ref().map(|c| c.metrics_path.clone()))
        .ok_or_else(|| CliError::Input("--metrics or --config is required".into()))?;
    let sys = SystemProfile::read(&metrics).map_err(|e| CliError::Input(format!("{}: {e}", metrics.display())))?;
    let workload = args.workload.or_else(|| cfg.as_ref().map(|c| c.workload_path.clone()));
    let wl = match workload {
        Some(p) => Some(read_workload(&p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let (scene_dims, tile) = match &cfg {
        Some(c) => {
            let scene = Scene::read(&c.scene_path).map_err(input)?;
            (Some(c.image_size.unwrap_or([scene.width, scene.height])), scene.tile)
        }
        None => (None, [16, 16]),
    };
    let (w, h) = match (args.width, args.height, scene_dims) {
        (Some(w), Some(h), _) => (w, h),
        (None, None, Some([w, h])) => (w, h),
        _ => return Err(CliError::Input("image size needs both --width and --height".into())),
    };
    let mut shape = cfg.as_ref().map_or(GpuShape::RTX_4060, |c| c.gpu_shape);
    if let Some(n) = args.sm_count {
        shape.sm_count = n;
    }
    if let Some(n) = args.block_limit {
        shape.block_limit = n;
    }
    shape.validate().map_err(CliError::Input)?;
    let occ = compute_waves(w, h, tile, &shape);
    let text = profile_report(&sys, &occ, wl.as_ref());
    if let Some(dir) = &opts.out {
        std::fs::create_dir_all(dir).map_err(input)?;
        write(&dir.join("profile.txt"), &text)?;
    }
    Ok(text)
}

pub fn plan(opts: &Options) -> Result<String, CliError> {
    let l = Loaded::new(config(opts)?)?;
    ensure_keys([l.cfg.backend(Role::Planner)])?;
    let plan = request_plan(&l.program, &l.gateway()?, &l.templates).map_err(search_err)?;
    if opts.out.is_some() {
        write(&out_dir(opts)?.join("plan.json"), &(plan.to_json() + "\n"))?;
    }
    Ok(plan.render_list())
}

pub fn prune(opts: &Options, plan_path: Option<&Path>) -> Result<String, CliError> {
    let l = Loaded::new(config(opts)?)?;
    ensure_keys([l.cfg.backend(Role::Planner)])?;
    let gateway = l.gateway()?;
    let plan: Plan = match plan_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
        None => request_plan(&l.program, &gateway, &l.templates).map_err(search_err)?,
    };
    let pruned = request_pruning(&plan, l.planning(), &gateway, &l.templates).map_err(search_err)?;
    if opts.out.is_some() {
        let dir = out_dir(opts)?;
        write(&dir.join("plan.json"), &(plan.to_json() + "\n"))?;
        write(&dir.join("pruned.json"), &(pruned.to_json() + "\n"))?;
    }
    let mut s = String::new();
    for a in pruned.kept_advice(&plan) {
        let _ = writeln!(s, "KEEP {}. {}", a.id, a.title);
    }
    for d in &pruned.dropped {
        let title = plan.get(d.id).map_or("", |a| a.title.as_str());
        let _ = writeln!(s, "DROP {}. {} ({})", d.id, title, d.reason);
    }
    Ok(s)
}

pub fn search(opts: &Options) -> Result<String, CliError> {
    let cfg = config(opts)?;
    let dir = out_dir(opts)?.to_path_buf();
    let snapshot = serde_json::to_value(&cfg).map_err(input)?;
    let (advice, outcome) = execute_search(cfg)?;
    write_run_dir(&dir, &snapshot, &RunMeta::now(), &advice, &outcome).map_err(input)?;
    Ok(summarize(&outcome.report))
}

/// Plans (if the advice mode asks for it) and runs the search without
/// touching the filesystem.
pub fn execute_search(cfg: RunConfig) -> Result<(AdviceBundle, SearchOutcome), CliError> {
    ensure_keys(&cfg.backends)?;
    let l = Loaded::new(cfg)?;
    let gateway = l.gateway()?;
    let advice = prepare_advice(l.cfg.search.advice_mode, &l.program, Some(l.planning()), &gateway, &l.templates)
        .map_err(search_err)?;
    let evaluator = l.evaluator()?;
    let outcome = run_search(&l.cfg.search, &l.program, &advice, &gateway, &evaluator, &l.templates).map_err(search_err)?;
    Ok((advice, outcome))
}

fn summarize(r: &SearchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "iterations: {}, failures: {} ({:.1}%), llm calls: {} (+{} planner)",
        r.iterations,
        r.errors,
        r.error_rate() * 100.0,
        r.total_llm_calls,
        r.planner_calls
    );
    s.push_str("iteration  best  error rate\n");
    for ((i, best), (_, err)) in r.best_curve.iter().zip(&r.error_curve) {
        let _ = writeln!(s, "{i:>9}  {best:.4}  {err:.3}");
    }
    let _ = writeln!(s, "final best: {} score {:.4}", r.final_best.id, r.final_best.score);
    s
}

pub fn check(opts: &Options, candidate: &Path) -> Result<String, CliError> {
    let l = Loaded::new(config(opts)?)?;
    let checker_cfg = l.cfg.backend(Role::Checker).clone();
    ensure_keys([&checker_cfg])?;
    let text = std::fs::read_to_string(candidate)
        .map_err(|e| CliError::Input(format!("{}: {e}", candidate.display())))?;
    if l.program.diff_outside_blocks(&text).map_err(input)? {
        return Err(CliError::Input("candidate changes text outside the evolve blocks".into()));
    }
    let cand = gsopt::program::extract_blocks(&text).map_err(input)?;
    let backend = Backend::new(checker_cfg, l.catalog.clone()).map_err(llm_err)?;
    let (verdict, _) = run_check(&l.program, &cand, &backend, &l.templates).map_err(|e| match e {
        CheckerError::Backend(e) => llm_err(e),
        CheckerError::Template(e) => input(e),
        e => CliError::Backend(e.to_string()),
    })?;
    let mut s = String::from(if verdict.equivalent { "EQUIVALENT\n" } else { "NOT EQUIVALENT\n" });
    for r in &verdict.reasons {
        let _ = writeln!(s, "- {r}");
    }
    Ok(s)
}

pub fn render(opts: &Options, scene_arg: Option<&Path>) -> Result<String, CliError> {
    let scene_path = match scene_arg {
        Some(p) => p.to_path_buf(),
        None => config(opts)?.scene_path,
    };
    let scene = Scene::read(&scene_path).map_err(|e| CliError::Input(format!("{}: {e}", scene_path.display())))?;
    let dir = out_dir(opts)?;
    let out = render_scene(&scene);
    write_pfm(dir.join("image.pfm"), &out.to_pfm().map_err(input)?).map_err(input)?;
    let mut s = format!("rendered {}x{} ({} splats) to {}\n", scene.width, scene.height, scene.splats.len(), dir.join("image.pfm").display());
    match workload_stats(&out, scene.tile) {
        Ok(wl) => {
            write(&dir.join("stats.csv"), &workload_to_csv(&wl))?;
            s.push_str(&workload_to_csv(&wl));
        }
        Err(OracleError::DegenerateWorkload) => {
            log::warn!("no splat overlaps any tile; stats.csv not written");
            s.push_str("no splat overlaps any tile; image is background only\n");
        }
        Err(e) => return Err(input(e)),
    }
    Ok(s)
}

pub fn crosscheck(opts: &Options) -> Result<String, CliError> {
    let l = Loaded::new(config(opts)?)?;
    let cc = l
        .cfg
        .crosscheck
        .clone()
        .ok_or_else(|| CliError::Input("config has no crosscheck section".into()))?;
    if cc.fixtures.is_empty() {
        return Err(CliError::Input("crosscheck has no fixtures".into()));
    }
    ensure_keys(&cc.checkers)?;
    let original = match &cc.original_path {
        Some(p) => SourceProgram::read(p).map_err(input)?,
        None => l.program.clone(),
    };
    let fixtures = cc
        .fixtures
        .iter()
        .map(|f| Ok((f.generator.clone(), SourceProgram::read(&f.path).map_err(input)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let checkers = cc
        .checkers
        .into_iter()
        .map(|c| Backend::new(c, l.catalog.clone()).map_err(llm_err))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = build_matrix(&checkers, &fixtures, &original, &l.templates);
    for note in &matrix.notes {
        log::warn!("{note}");
    }
    let csv = matrix.to_csv();
    if opts.out.is_some() {
        write(&out_dir(opts)?.join("crosscheck.csv"), &csv)?;
    }
    Ok(csv)
}

pub fn report(run_dir: &Path) -> Result<String, CliError> {
    let path = run_dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let r: SearchReport = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let records = read_iterations(&run_dir.join("iterations.jsonl")).map_err(input)?;
    let mut s = summarize(&r);
    let inserted = records.iter().filter(|x| x.inserted).count();
    let checked = records.iter().filter(|x| x.checked).count();
    let _ = writeln!(s, "records: {}, inserted: {inserted}, checked: {checked}", records.len());
    Ok(s)
}
