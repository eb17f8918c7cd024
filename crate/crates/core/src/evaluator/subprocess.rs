//! Compile / run / measure through configured shell commands. Each
//! evaluation gets its own temporary directory.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{EvalBackend, FailureKind, MeasureFailure, Measurement};
use crate::oracle::{mean_abs_error, read_pfm};
use crate::program::SourceProgram;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyUnit {
    #[default]
    Seconds,
    Ms,
}

fn default_timeout() -> f64 {
    300.0
}

fn default_source_name() -> String {
    "candidate.cu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandTemplates {
    pub compile_cmd: String,
    pub run_cmd: String,
    pub measure_cmd: String,
    #[serde(default)]
    pub latency_unit: LatencyUnit,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_source_name")]
    pub source_name: String,
}

/// Substitutes `{src}`, `{bin}`, `{scene}` and `{out}`.
pub fn assemble_command(template: &str, src: &Path, bin: &Path, scene: &Path, out: &Path) -> String {
    template
        .replace("{src}", &src.display().to_string())
        .replace("{bin}", &bin.display().to_string())
        .replace("{scene}", &scene.display().to_string())
        .replace("{out}", &out.display().to_string())
}

#[derive(Debug, Clone)]
pub struct SubprocessBackend {
    cmds: CommandTemplates,
    scene_path: PathBuf,
    reference: Vec<f64>,
}

enum StepError {
    Exit(i32, String),
    Timeout,
    Spawn(String),
}

impl SubprocessBackend {
    /// `reference` is the oracle image the candidate's output is compared to.
    pub fn new(cmds: CommandTemplates, scene_path: impl Into<PathBuf>, reference: Vec<f64>) -> Self {
        Self {
            cmds,
            scene_path: scene_path.into(),
            reference,
        }
    }

    fn step(&self, cmd: &str, dir: &Path, name: &str) -> Result<String, StepError> {
        let stdout_path = dir.join(format!("{name}.stdout"));
        let stderr_path = dir.join(format!("{name}.stderr"));
        let io = |e: std::io::Error| StepError::Spawn(e.to_string());
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(File::create(&stdout_path).map_err(io)?)
            .stderr(File::create(&stderr_path).map_err(io)?)
            .spawn()
            .map_err(io)?;
        let status = match child
            .wait_timeout(Duration::from_secs_f64(self.cmds.timeout_secs))
            .map_err(io)?
        {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(StepError::Timeout);
            }
        };
        let stdout = std::fs::read_to_string(&stdout_path).unwrap_or_default();
        if !status.success() {
            let mut stderr = std::fs::read_to_string(&stderr_path).unwrap_or_default();
            stderr.truncate(2000);
            return Err(StepError::Exit(status.code().unwrap_or(-1), stderr));
        }
        Ok(stdout)
    }

    fn parse_latency(&self, stdout: &str) -> Option<f64> {
        let seconds: f64 = stdout.lines().rev().find(|l| !l.trim().is_empty())?.trim().parse().ok()?;
        if !seconds.is_finite() {
            return None;
        }
        Some(match self.cmds.latency_unit {
            LatencyUnit::Seconds => seconds,
            LatencyUnit::Ms => seconds * 1000.0,
        })
    }
}

impl EvalBackend for SubprocessBackend {
    fn measure(&self, candidate: &SourceProgram) -> Result<Measurement, MeasureFailure> {
        let dir = tempfile::tempdir()
            .map_err(|e| MeasureFailure::new(FailureKind::RuntimeError, format!("work dir: {e}")))?;
        let src = dir.path().join(&self.cmds.source_name);
        let bin = dir.path().join("candidate.bin");
        let out = dir.path().join("out.pfm");
        candidate
            .write(&src)
            .map_err(|e| MeasureFailure::new(FailureKind::RuntimeError, format!("writing source: {e}")))?;
        let cmd = |t: &str| assemble_command(t, &src, &bin, &self.scene_path, &out);
        let stage = |kind: FailureKind, compiled: bool, ran: bool, e: StepError| {
            let (kind, detail) = match e {
                StepError::Exit(code, stderr) => (kind, format!("exit {code}: {}", stderr.trim())),
                StepError::Timeout => (FailureKind::Timeout, "command timed out".into()),
                StepError::Spawn(m) => (kind, m),
            };
            MeasureFailure {
                kind,
                detail,
                compiled,
                ran,
            }
        };

        self.step(&cmd(&self.cmds.compile_cmd), dir.path(), "compile")
            .map_err(|e| stage(FailureKind::CompileError, false, false, e))?;
        self.step(&cmd(&self.cmds.run_cmd), dir.path(), "run")
            .map_err(|e| stage(FailureKind::RuntimeError, true, false, e))?;
        let stdout = self
            .step(&cmd(&self.cmds.measure_cmd), dir.path(), "measure")
            .map_err(|e| stage(FailureKind::RuntimeError, true, true, e))?;
        let latency = self.parse_latency(&stdout).ok_or_else(|| MeasureFailure {
            kind: FailureKind::MeasureParseError,
            detail: format!("last stdout line is not a number: {:?}", stdout.lines().last().unwrap_or("")),
            compiled: true,
            ran: true,
        })?;
        let image = read_pfm(&out).map_err(|e| MeasureFailure {
            kind: FailureKind::RuntimeError,
            detail: format!("reading output image: {e}"),
            compiled: true,
            ran: true,
        })?;
        Ok(Measurement {
            accuracy_err: mean_abs_error(&image.to_f64(), &self.reference),
            latency,
        })
    }
}
