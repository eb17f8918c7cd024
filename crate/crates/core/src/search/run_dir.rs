use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdviceBundle, IterationRecord, SearchOutcome};

/// Non-reproducible facts about a run. Only `run.json` carries them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub started_unix: u64,
    pub version: String,
}

impl RunMeta {
    pub fn now() -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            started_unix,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Layout: `run.json`, `iterations.jsonl`, `best/<iteration>.src`,
/// `report.json`, plus `plan.json` / `pruned.json` when advice was used.
pub fn write_run_dir(
    dir: &Path,
    config: &serde_json::Value,
    meta: &RunMeta,
    advice: &AdviceBundle,
    outcome: &SearchOutcome,
) -> std::io::Result<()> {
    fs::create_dir_all(dir.join("best"))?;
    let run = serde_json::json!({ "config": config, "meta": meta });
    fs::write(dir.join("run.json"), to_pretty(&run))?;

    let mut lines = String::new();
    for r in &outcome.records {
        lines.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        lines.push('\n');
    }
    fs::write(dir.join("iterations.jsonl"), lines)?;

    for (iteration, program) in &outcome.checkpoints {
        fs::write(dir.join("best").join(format!("{iteration}.src")), program.to_text())?;
    }
    fs::write(dir.join("report.json"), to_pretty(&outcome.report))?;
    if let Some(plan) = &advice.plan {
        fs::write(dir.join("plan.json"), plan.to_json() + "\n")?;
    }
    if let Some(pruned) = &advice.pruned {
        fs::write(dir.join("pruned.json"), pruned.to_json() + "\n")?;
    }
    Ok(())
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn read_iterations(path: &Path) -> std::io::Result<Vec<IterationRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
