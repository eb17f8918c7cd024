//! Profiler metric exports and the characterizations derived from them:
//! roofline regime, wave count, dominant stall.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::WorkloadStats;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("missing metric `{0}`")]
    MissingMetric(String),
    #[error("malformed row at line {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("invalid value for `{name}`: {value}")]
    InvalidValue { name: String, value: f64 },
    #[error("no stall rows besides the `selected` baseline")]
    EmptyStalls,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProfileError>;

/// Issue-slot row reported next to the stall reasons; never itself a stall.
pub const SELECTED_BASELINE: &str = "selected";

const NUMERIC_METRICS: [&str; 9] = [
    "ai_turning_point",
    "perf_turning_point",
    "ai_kernel",
    "perf_kernel",
    "warp_cycles_per_issued_instruction",
    "theoretical_occupancy_pct",
    "achieved_occupancy_pct",
    "block_limit_warps",
    "top_unit_util_pct",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemProfile {
    pub ai_turning_point: f64,
    pub perf_turning_point: f64,
    pub ai_kernel: f64,
    pub perf_kernel: f64,
    pub warp_cycles_per_issued_instruction: f64,
    pub theoretical_occupancy_pct: f64,
    pub achieved_occupancy_pct: f64,
    pub block_limit_warps: f64,
    /// Stall reason (without the `stall_` prefix) to cycles per issued instruction.
    pub stalls: BTreeMap<String, f64>,
    pub top_unit: (String, f64),
    /// Rows not covered above, kept so serialization is lossless.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

fn read_pairs(text: &str, header: [&str; 2]) -> Result<Vec<(usize, String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let found = reader.headers().map_err(|e| ProfileError::MalformedRow {
        line: 1,
        detail: e.to_string(),
    })?;
    if found.len() != 2 || found[0] != *header[0] || found[1] != *header[1] {
        return Err(ProfileError::MalformedRow {
            line: 1,
            detail: format!("expected header `{},{}`", header[0], header[1]),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ProfileError::MalformedRow {
            line: e.position().map_or(0, |p| p.line() as usize),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 || record[0].is_empty() {
            return Err(ProfileError::MalformedRow {
                line,
                detail: "expected two fields".into(),
            });
        }
        rows.push((line, record[0].to_string(), record[1].to_string()));
    }
    Ok(rows)
}

fn parse_number(line: usize, name: &str, value: &str) -> Result<f64> {
    value.parse::<f64>().map_err(|_| ProfileError::MalformedRow {
        line,
        detail: format!("`{name}` value `{value}` is not a number"),
    })
}

impl SystemProfile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut numeric = BTreeMap::new();
        let mut stalls = BTreeMap::new();
        let mut extra = BTreeMap::new();
        let mut top_unit_name = None;
        for (line, name, value) in read_pairs(text, ["metric", "value"])? {
            if let Some(stall) = name.strip_prefix("stall_") {
                stalls.insert(stall.to_string(), parse_number(line, &name, &value)?);
            } else if name == "top_unit_name" {
                top_unit_name = Some(value);
            } else if NUMERIC_METRICS.contains(&name.as_str()) {
                numeric.insert(name.clone(), parse_number(line, &name, &value)?);
            } else {
                extra.insert(name, value);
            }
        }
        let mut take = |name: &str| {
            numeric
                .remove(name)
                .ok_or_else(|| ProfileError::MissingMetric(name.to_string()))
        };
        let profile = SystemProfile {
            ai_turning_point: take("ai_turning_point")?,
            perf_turning_point: take("perf_turning_point")?,
            ai_kernel: take("ai_kernel")?,
            perf_kernel: take("perf_kernel")?,
            warp_cycles_per_issued_instruction: take("warp_cycles_per_issued_instruction")?,
            theoretical_occupancy_pct: take("theoretical_occupancy_pct")?,
            achieved_occupancy_pct: take("achieved_occupancy_pct")?,
            block_limit_warps: take("block_limit_warps")?,
            top_unit: (
                top_unit_name.ok_or_else(|| ProfileError::MissingMetric("top_unit_name".into()))?,
                take("top_unit_util_pct")?,
            ),
            stalls,
            extra,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn numeric_fields(&self) -> [(&'static str, f64); 9] {
        [
            ("ai_turning_point", self.ai_turning_point),
            ("perf_turning_point", self.perf_turning_point),
            ("ai_kernel", self.ai_kernel),
            ("perf_kernel", self.perf_kernel),
            ("warp_cycles_per_issued_instruction", self.warp_cycles_per_issued_instruction),
            ("theoretical_occupancy_pct", self.theoretical_occupancy_pct),
            ("achieved_occupancy_pct", self.achieved_occupancy_pct),
            ("block_limit_warps", self.block_limit_warps),
            ("top_unit_util_pct", self.top_unit.1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let stalls = self.stalls.iter().map(|(k, v)| (k.as_str(), *v));
        for (name, value) in self.numeric_fields().into_iter().chain(stalls) {
            if !value.is_finite() || value < 0.0 {
                return Err(ProfileError::InvalidValue {
                    name: name.to_string(),
                    value,
                });
            }
        }
        for (name, value) in [
            ("theoretical_occupancy_pct", self.theoretical_occupancy_pct),
            ("achieved_occupancy_pct", self.achieved_occupancy_pct),
        ] {
            if value > 100.0 {
                return Err(ProfileError::InvalidValue {
                    name: name.to_string(),
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, value) in self.numeric_fields() {
            out.push_str(&format!("{name},{value}\n"));
        }
        out.push_str(&format!("top_unit_name,{}\n", self.top_unit.0));
        for (name, value) in &self.stalls {
            out.push_str(&format!("stall_{name},{value}\n"));
        }
        for (name, value) in &self.extra {
            out.push_str(&format!("{name},{value}\n"));
        }
        out
    }
}

pub fn parse_metrics(file: impl AsRef<Path>) -> Result<SystemProfile> {
    SystemProfile::read(file)
}

const WORKLOAD_KEYS: [&str; 4] = [
    "mean_per_tile",
    "var_per_tile",
    "mean_computed_fraction",
    "var_computed_fraction",
];

pub fn parse_workload(text: &str) -> Result<WorkloadStats> {
    let mut values = BTreeMap::new();
    for (line, name, value) in read_pairs(text, ["stat", "value"])? {
        let v = parse_number(line, &name, &value)?;
        values.insert(name, v);
    }
    let get = |k: &str| {
        values
            .get(k)
            .copied()
            .ok_or_else(|| ProfileError::MissingMetric(k.to_string()))
    };
    let stats = WorkloadStats {
        mean_per_tile: get(WORKLOAD_KEYS[0])?,
        var_per_tile: get(WORKLOAD_KEYS[1])?,
        mean_computed_fraction: get(WORKLOAD_KEYS[2])?,
        var_computed_fraction: get(WORKLOAD_KEYS[3])?,
    };
    for (name, value) in WORKLOAD_KEYS.iter().zip([
        stats.mean_per_tile,
        stats.var_per_tile,
        stats.mean_computed_fraction,
        stats.var_computed_fraction,
    ]) {
        if !value.is_finite() || value < 0.0 {
            return Err(ProfileError::InvalidValue {
                name: name.to_string(),
                value,
            });
        }
    }
    if stats.mean_computed_fraction > 1.0 {
        return Err(ProfileError::InvalidValue {
            name: WORKLOAD_KEYS[2].into(),
            value: stats.mean_computed_fraction,
        });
    }
    Ok(stats)
}

pub fn read_workload(path: impl AsRef<Path>) -> Result<WorkloadStats> {
    parse_workload(&std::fs::read_to_string(path)?)
}

pub fn workload_to_csv(stats: &WorkloadStats) -> String {
    format!(
        "stat,value\nmean_per_tile,{}\nvar_per_tile,{}\nmean_computed_fraction,{}\nvar_computed_fraction,{}\n",
        stats.mean_per_tile, stats.var_per_tile, stats.mean_computed_fraction, stats.var_computed_fraction
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RooflineKind {
    ComputeBound,
    MemoryBound,
}

impl fmt::Display for RooflineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RooflineKind::ComputeBound => "compute-bound",
            RooflineKind::MemoryBound => "memory-bound",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RooflineVerdict {
    pub kind: RooflineKind,
    /// `ai_kernel / ai_turning_point`.
    pub margin: f64,
}

/// Compute-bound iff the kernel's arithmetic intensity is at or right of the
/// roofline knee.
pub fn classify_roofline(p: &SystemProfile) -> RooflineVerdict {
    let kind = if p.ai_kernel >= p.ai_turning_point {
        RooflineKind::ComputeBound
    } else {
        RooflineKind::MemoryBound
    };
    RooflineVerdict {
        kind,
        margin: p.ai_kernel / p.ai_turning_point,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuShape {
    pub sm_count: u32,
    pub max_threads_per_sm: u32,
    /// Resident thread blocks per SM.
    pub block_limit: u32,
}

impl GpuShape {
    /// RTX 4060 as profiled: 24 SMs, block limit 6 for 16x16 blocks.
    pub const RTX_4060: GpuShape = GpuShape {
        sm_count: 24,
        max_threads_per_sm: 2048,
        block_limit: 6,
    };

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sm_count == 0 || self.max_threads_per_sm == 0 || self.block_limit == 0 {
            return Err("gpu shape fields must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyAnalysis {
    pub blocks_x: u64,
    pub blocks_y: u64,
    pub total_blocks: u64,
    pub concurrent_blocks: u64,
    pub waves: u64,
}

pub fn compute_waves(width: u32, height: u32, tile: [u32; 2], shape: &GpuShape) -> OccupancyAnalysis {
    let blocks_x = (width as u64).div_ceil(tile[0].max(1) as u64);
    let blocks_y = (height as u64).div_ceil(tile[1].max(1) as u64);
    let total_blocks = blocks_x * blocks_y;
    let concurrent_blocks = shape.sm_count.max(1) as u64 * shape.block_limit.max(1) as u64;
    OccupancyAnalysis {
        blocks_x,
        blocks_y,
        total_blocks,
        concurrent_blocks,
        waves: total_blocks.div_ceil(concurrent_blocks),
    }
}

/// Largest stall, ignoring the `selected` baseline; ties go to the
/// lexicographically smaller name.
pub fn dominant_stall(p: &SystemProfile) -> Result<(String, f64)> {
    let mut best: Option<(&String, f64)> = None;
    for (name, &value) in &p.stalls {
        if name == SELECTED_BASELINE {
            continue;
        }
        if best.is_none_or(|(_, v)| value > v) {
            best = Some((name, value));
        }
    }
    best.map(|(n, v)| (n.clone(), v)).ok_or(ProfileError::EmptyStalls)
}
