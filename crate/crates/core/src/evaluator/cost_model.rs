use std::collections::BTreeSet;
use std::sync::Arc;

use super::{EvalBackend, FailureKind, MeasureFailure, Measurement};
use crate::catalog::{transform_tags, CatalogError, TransformCatalog};
use crate::oracle::{mean_abs_error, render, render_variant, BlendVariant, Scene, WorkloadStats};
use crate::profile::{classify_roofline, RooflineKind, SystemProfile};
use crate::program::SourceProgram;

/// Oracle variant modelling each unsafe transform's effect on the image.
const SKIP_INNER_LOOP_TAG: &str = "remove-inner-loop";

/// Latency multiplier relative to a baseline of 1.0. Tags are visited in
/// sorted order so equal sets give bit-identical products.
pub fn cost_model_latency<'a>(
    tags: impl IntoIterator<Item = &'a str>,
    wl: &WorkloadStats,
    sys: &SystemProfile,
    catalog: &TransformCatalog,
) -> Result<f64, CatalogError> {
    latency_for(tags, wl, classify_roofline(sys).kind, catalog)
}

fn latency_for<'a>(
    tags: impl IntoIterator<Item = &'a str>,
    wl: &WorkloadStats,
    roofline: RooflineKind,
    catalog: &TransformCatalog,
) -> Result<f64, CatalogError> {
    let sorted: BTreeSet<&str> = tags.into_iter().collect();
    let mut latency = 1.0;
    for tag in sorted {
        latency /= catalog.entry(tag)?.effective_factor(wl, roofline);
    }
    Ok(latency)
}

/// Deterministic backend: latency from declared transform tags, accuracy
/// from the oracle rendering of the fixture scene.
#[derive(Debug, Clone)]
pub struct CostModel {
    catalog: Arc<TransformCatalog>,
    workload: WorkloadStats,
    roofline: RooflineKind,
    skip_inner_err: f64,
}

impl CostModel {
    pub fn new(catalog: Arc<TransformCatalog>, workload: WorkloadStats, sys: &SystemProfile, scene: &Scene) -> Self {
        let reference = render(scene);
        let skipped = render_variant(scene, BlendVariant::SkipInnerLoop);
        Self {
            catalog,
            workload,
            roofline: classify_roofline(sys).kind,
            skip_inner_err: mean_abs_error(&reference.image, &skipped.image),
        }
    }

    pub fn latency(&self, tags: &BTreeSet<String>) -> Result<f64, CatalogError> {
        latency_for(tags.iter().map(String::as_str), &self.workload, self.roofline, &self.catalog)
    }

    /// Mean absolute error of the image a tagged candidate would produce.
    pub fn accuracy_err(&self, tags: &BTreeSet<String>) -> Result<f64, CatalogError> {
        let mut err = 0.0;
        for tag in tags {
            let e = self.catalog.entry(tag)?;
            if e.unsafe_transform {
                err += e.accuracy_penalty;
                if tag == SKIP_INNER_LOOP_TAG {
                    err += self.skip_inner_err;
                }
            }
        }
        Ok(err)
    }
}

impl EvalBackend for CostModel {
    fn measure(&self, candidate: &SourceProgram) -> Result<Measurement, MeasureFailure> {
        let tags = transform_tags(candidate);
        let fail = |e: CatalogError| MeasureFailure::new(FailureKind::CompileError, e.to_string());
        Ok(Measurement {
            latency: self.latency(&tags).map_err(fail)?,
            accuracy_err: self.accuracy_err(&tags).map_err(fail)?,
        })
    }
}
