//! Run configuration: one JSON file, paths relative to the file itself.

use std::path::{Path, PathBuf};

use gsopt::evaluator::CommandTemplates;
use gsopt::llm::{BackendConfig, BackendKind, MockProfile, Role};
use gsopt::profile::GpuShape;
use gsopt::search::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorConfig {
    #[default]
    CostModel,
    Subprocess(CommandTemplates),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub generator: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheckConfig {
    /// Defaults to the run's `source_path`.
    #[serde(default)]
    pub original_path: Option<PathBuf>,
    pub checkers: Vec<BackendConfig>,
    /// Column order of the matrix.
    pub fixtures: Vec<FixtureEntry>,
}

fn default_shape() -> GpuShape {
    GpuShape::RTX_4060
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub source_path: PathBuf,
    pub scene_path: PathBuf,
    pub metrics_path: PathBuf,
    pub workload_path: PathBuf,
    /// Image size of the profiled launch; defaults to the scene size.
    #[serde(default)]
    pub image_size: Option<[u32; 2]>,
    #[serde(default = "default_shape")]
    pub gpu_shape: GpuShape,
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub crosscheck: Option<CrossCheckConfig>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(p: &Path, what: &str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} {} does not exist", p.display())))
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Input(format!("config json: {e}")))?;
        for p in [
            &mut cfg.source_path,
            &mut cfg.scene_path,
            &mut cfg.metrics_path,
            &mut cfg.workload_path,
        ] {
            resolve(base, p);
        }
        for p in [cfg.catalog_path.as_mut(), cfg.templates_dir.as_mut()].into_iter().flatten() {
            resolve(base, p);
        }
        if let Some(cc) = cfg.crosscheck.as_mut() {
            if let Some(p) = cc.original_path.as_mut() {
                resolve(base, p);
            }
            for f in &mut cc.fixtures {
                resolve(base, &mut f.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        must_exist(&self.source_path, "source_path")?;
        must_exist(&self.scene_path, "scene_path")?;
        must_exist(&self.metrics_path, "metrics_path")?;
        must_exist(&self.workload_path, "workload_path")?;
        if let Some(p) = &self.catalog_path {
            must_exist(p, "catalog_path")?;
        }
        if let Some(p) = &self.templates_dir {
            must_exist(p, "templates_dir")?;
        }
        self.gpu_shape.validate().map_err(CliError::Input)?;
        for role in Role::ALL {
            match self.backends.iter().filter(|b| b.role == role).count() {
                1 => {}
                0 => return Err(CliError::Input(format!("no backend configured for role {role}"))),
                _ => return Err(CliError::Input(format!("role {role} configured more than once"))),
            }
        }
        for b in &self.backends {
            b.validate().map_err(|e| CliError::Input(e.to_string()))?;
        }
        self.search.validate().map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(cc) = &self.crosscheck {
            if let Some(p) = &cc.original_path {
                must_exist(p, "crosscheck original_path")?;
            }
            for f in &cc.fixtures {
                must_exist(&f.path, &format!("crosscheck fixture for {}", f.generator))?;
            }
            for c in &cc.checkers {
                if c.role != Role::Checker {
                    return Err(CliError::Input("crosscheck checkers must have role checker".into()));
                }
                c.validate().map_err(|e| CliError::Input(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// `--seed` replaces the search seed and every mock seed; `--mock` turns
    /// remote backends into mocks with a neutral profile.
    pub fn apply_overrides(&mut self, seed: Option<u64>, force_mock: bool) {
        if let Some(s) = seed {
            self.search.seed = s;
        }
        let mock_seed = self.search.seed;
        let all = self
            .backends
            .iter_mut()
            .chain(self.crosscheck.iter_mut().flat_map(|c| c.checkers.iter_mut()));
        for b in all {
            if force_mock && b.kind == BackendKind::Remote {
                let label = b.label();
                *b = BackendConfig::mock(b.role, mock_seed, MockProfile::default()).with_label(label);
            }
            if b.kind == BackendKind::Mock && seed.is_some() {
                b.mock_seed = Some(mock_seed);
            }
        }
    }

    pub fn backend(&self, role: Role) -> &BackendConfig {
        self.backends
            .iter()
            .find(|b| b.role == role)
            .expect("validated: every role has a backend")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixtures() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
    }

    fn load() -> RunConfig {
        RunConfig::load(&fixtures().join("mock_config.json")).unwrap()
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let cfg = load();
        assert!(cfg.source_path.is_absolute() || cfg.source_path.starts_with(fixtures()));
        assert!(cfg.source_path.exists());
        assert_eq!(cfg.crosscheck.unwrap().fixtures.len(), 4);
    }

    #[test]
    fn seed_override_reaches_mocks() {
        let mut cfg = load();
        cfg.apply_overrides(Some(99), false);
        assert_eq!(cfg.search.seed, 99);
        assert!(cfg.backends.iter().all(|b| b.mock_seed == Some(99)));
        assert!(cfg.crosscheck.unwrap().checkers.iter().all(|b| b.mock_seed == Some(99)));
    }

    #[test]
    fn no_override_keeps_mock_seeds() {
        let mut cfg = load();
        cfg.apply_overrides(None, true);
        assert!(cfg.backends.iter().all(|b| b.mock_seed == Some(7)));
    }

    #[test]
    fn force_mock_keeps_label() {
        let mut cfg = load();
        cfg.backends[1] = BackendConfig::remote(Role::Generator, "http://127.0.0.1:9", "gen-model", "KEY");
        cfg.apply_overrides(None, true);
        let g = cfg.backend(Role::Generator);
        assert_eq!(g.kind, BackendKind::Mock);
        assert_eq!(g.label(), "gen-model");
        assert!(g.validate().is_ok());
    }

    #[test]
    fn missing_role_is_rejected() {
        let text = std::fs::read_to_string(fixtures().join("mock_config.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["backends"].as_array_mut().unwrap().pop();
        let err = RunConfig::from_json(&v.to_string(), &fixtures()).unwrap_err();
        assert!(err.to_string().contains("reviewer"));
    }

    #[test]
    fn subprocess_evaluator_parses() {
        let text = std::fs::read_to_string(fixtures().join("mock_config.json")).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["evaluator"] = serde_json::json!({
            "kind": "subprocess",
            "compile_cmd": "nvcc -o {bin} {src}",
            "run_cmd": "{bin} {scene} {out}",
            "measure_cmd": "{bin} --time {scene}"
        });
        let cfg = RunConfig::from_json(&v.to_string(), &fixtures()).unwrap();
        assert!(matches!(cfg.evaluator, EvaluatorConfig::Subprocess(_)));
    }
}
