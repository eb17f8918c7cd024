//! CPU reference for the tile-based alpha-blending rasterizer.
//!
//! Splats are already projected to image space. Each tile receives the
//! splats whose 3-sigma bounding box overlaps it, sorted front to back, and
//! every pixel blends its tile's list with the same thresholds the CUDA
//! kernel uses (`0.99` alpha cap, `1/255` skip, `1e-4` early stop). All math
//! is f64.

mod pfm;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pfm::{read_pfm, write_pfm, PfmImage};

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_EPSILON: f64 = 1e-4;
pub const DEFAULT_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("every tile is empty; workload statistics are undefined")]
    DegenerateWorkload,
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pfm: {0}")]
    Pfm(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub id: u32,
    pub xy: [f64; 2],
    /// Inverse 2D covariance `(a, b, c)` of the symmetric matrix `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: Vec<f64>,
    pub depth: f64,
}

impl Splat {
    /// 3-sigma screen radius from the largest covariance eigenvalue, which is
    /// the reciprocal of the smallest conic eigenvalue. Infinite for a
    /// singular conic.
    pub fn radius(&self) -> f64 {
        let [a, b, c] = self.conic;
        let mid = 0.5 * (a + c);
        let half_gap = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let lambda_min = mid - half_gap;
        if lambda_min <= 0.0 {
            f64::INFINITY
        } else {
            3.0 * (1.0 / lambda_min).sqrt()
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let [a, b, c] = self.conic;
        let bad = |what: &str| Err(OracleError::InvalidScene(format!("splat {}: {what}", self.id)));
        if !(a.is_finite() && b.is_finite() && c.is_finite()) || a < 0.0 || c < 0.0 || a * c - b * b < -1e-12 {
            return bad("conic is not positive semidefinite");
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            // The CUDA kernel clamps alpha, not opacity; values above 1 are
            // accepted so alpha saturation can be exercised.
            if !(self.opacity.is_finite() && self.opacity >= 0.0) {
                return bad("opacity must be finite and non-negative");
            }
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return bad("depth must be positive");
        }
        if self.color.len() != channels {
            return bad("color channel count mismatch");
        }
        if !self.xy.iter().chain(&self.color).all(|v| v.is_finite()) {
            return bad("non-finite position or color");
        }
        Ok(())
    }
}

fn default_channels() -> usize {
    DEFAULT_CHANNELS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub tile: [u32; 2],
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub background: Vec<f64>,
    pub splats: Vec<Splat>,
}

impl Scene {
    pub fn empty(width: u32, height: u32, tile: [u32; 2]) -> Self {
        Self {
            width,
            height,
            tile,
            channels: DEFAULT_CHANNELS,
            background: vec![0.0; DEFAULT_CHANNELS],
            splats: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(OracleError::InvalidScene("width and height must be >= 1".into()));
        }
        if self.tile[0] == 0 || self.tile[1] == 0 {
            return Err(OracleError::InvalidScene("tile dimensions must be >= 1".into()));
        }
        if self.channels == 0 || self.background.len() != self.channels {
            return Err(OracleError::InvalidScene("background must have `channels` entries".into()));
        }
        self.splats.iter().try_for_each(|s| s.validate(self.channels))
    }

    pub fn tiles_x(&self) -> u32 {
        self.width.div_ceil(self.tile[0])
    }

    pub fn tiles_y(&self) -> u32 {
        self.height.div_ceil(self.tile[1])
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x() as usize * self.tiles_y() as usize
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Per-tile splat index lists (indices into `scene.splats`), row-major over
/// tiles, each sorted by ascending depth with ties broken by id.
pub fn assign_splats(scene: &Scene) -> Vec<Vec<usize>> {
    let (tx, ty) = (scene.tiles_x() as usize, scene.tiles_y() as usize);
    let [bx, by] = [scene.tile[0] as f64, scene.tile[1] as f64];
    let (w, h) = (scene.width as f64, scene.height as f64);
    let mut tiles = vec![Vec::new(); tx * ty];

    for (idx, s) in scene.splats.iter().enumerate() {
        let r = s.radius();
        let [x, y] = s.xy;
        // Pixel centers sit at integer coordinates; tile (i, j) covers
        // pixels [i*bx, min((i+1)*bx, w) - 1].
        let x_lo = x - r;
        let x_hi = x + r;
        let y_lo = y - r;
        let y_hi = y + r;
        if x_hi < 0.0 || y_hi < 0.0 || x_lo > w - 1.0 || y_lo > h - 1.0 {
            continue;
        }
        let first_x = (x_lo.max(0.0) / bx).floor() as usize;
        let last_x = ((x_hi.min(w - 1.0)) / bx).floor() as usize;
        let first_y = (y_lo.max(0.0) / by).floor() as usize;
        let last_y = ((y_hi.min(h - 1.0)) / by).floor() as usize;
        for j in first_y..=last_y.min(ty - 1) {
            for i in first_x..=last_x.min(tx - 1) {
                tiles[j * tx + i].push(idx);
            }
        }
    }

    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&scene.splats[a], &scene.splats[b]);
            sa.depth.total_cmp(&sb.depth).then(sa.id.cmp(&sb.id))
        });
    }
    tiles
}

/// How the blend loop is executed. `Reference` is the kernel's semantics;
/// `SkipInnerLoop` models the unsafe rewrite that drops the per-batch inner
/// loop and blends only the first splat of every shared-memory batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendVariant {
    #[default]
    Reference,
    SkipInnerLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub tiles_x: u32,
    pub tiles_y: u32,
    /// Row-major pixels, channels interleaved.
    pub image: Vec<f64>,
    pub final_t: Vec<f64>,
    pub n_contrib: Vec<u32>,
    pub per_tile_assigned: Vec<u32>,
    pub per_pixel_computed: Vec<u32>,
}

impl RenderOutput {
    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let i = (y as usize * self.width as usize + x as usize) * self.channels;
        &self.image[i..i + self.channels]
    }

    pub fn pixel_index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn tile_of(&self, x: u32, y: u32, tile: [u32; 2]) -> usize {
        (y / tile[1]) as usize * self.tiles_x as usize + (x / tile[0]) as usize
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_error(&self, other: &[f64]) -> f64 {
        mean_abs_error(&self.image, other)
    }

    pub fn to_pfm(&self) -> Result<PfmImage> {
        PfmImage::from_f64(self.width, self.height, self.channels, &self.image)
    }

    pub fn image_json(&self) -> String {
        serde_json::to_string(&self.image).expect("image serializes")
    }
}

pub fn mean_abs_error(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

struct PixelResult {
    color: Vec<f64>,
    t: f64,
    contrib: u32,
    computed: u32,
}

fn blend_pixel(scene: &Scene, list: &[usize], px: f64, py: f64, variant: BlendVariant) -> PixelResult {
    let channels = scene.channels;
    let batch = (scene.tile[0] as usize * scene.tile[1] as usize).max(1);
    let mut color = vec![0.0; channels];
    let mut t = 1.0;
    let mut contrib = 0;
    let mut computed = 0;

    for (k, &idx) in list.iter().enumerate() {
        if variant == BlendVariant::SkipInnerLoop && k % batch != 0 {
            continue;
        }
        let s = &scene.splats[idx];
        computed += 1;
        let dx = s.xy[0] - px;
        let dy = s.xy[1] - py;
        let [a, b, c] = s.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        if power > 0.0 {
            continue;
        }
        let alpha = ALPHA_MAX.min(s.opacity * power.exp());
        if alpha < ALPHA_MIN {
            continue;
        }
        let test_t = t * (1.0 - alpha);
        if test_t < T_EPSILON {
            break;
        }
        for (acc, col) in color.iter_mut().zip(&s.color) {
            *acc += col * alpha * t;
        }
        t = test_t;
        contrib += 1;
    }
    for (acc, bg) in color.iter_mut().zip(&scene.background) {
        *acc += t * bg;
    }
    PixelResult { color, t, contrib, computed }
}

pub fn render(scene: &Scene) -> RenderOutput {
    render_variant(scene, BlendVariant::Reference)
}

pub fn render_variant(scene: &Scene, variant: BlendVariant) -> RenderOutput {
    let tiles = assign_splats(scene);
    let (w, h, ch) = (scene.width as usize, scene.height as usize, scene.channels);
    let tx = scene.tiles_x() as usize;
    let [bx, by] = [scene.tile[0] as usize, scene.tile[1] as usize];

    let per_tile: Vec<Vec<(usize, PixelResult)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (ti, tj) = (tile % tx, tile / tx);
            let mut out = Vec::with_capacity(bx * by);
            for y in tj * by..((tj + 1) * by).min(h) {
                for x in ti * bx..((ti + 1) * bx).min(w) {
                    out.push((y * w + x, blend_pixel(scene, list, x as f64, y as f64, variant)));
                }
            }
            out
        })
        .collect();

    let mut output = RenderOutput {
        width: scene.width,
        height: scene.height,
        channels: ch,
        tiles_x: scene.tiles_x(),
        tiles_y: scene.tiles_y(),
        image: vec![0.0; w * h * ch],
        final_t: vec![1.0; w * h],
        n_contrib: vec![0; w * h],
        per_tile_assigned: tiles.iter().map(|l| l.len() as u32).collect(),
        per_pixel_computed: vec![0; w * h],
    };
    for (pix, r) in per_tile.into_iter().flatten() {
        output.image[pix * ch..(pix + 1) * ch].copy_from_slice(&r.color);
        output.final_t[pix] = r.t;
        output.n_contrib[pix] = r.contrib;
        output.per_pixel_computed[pix] = r.computed;
    }
    output
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub mean_per_tile: f64,
    pub var_per_tile: f64,
    pub mean_computed_fraction: f64,
    pub var_computed_fraction: f64,
}

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Population mean/variance of splats per tile, and of the per-pixel fraction
/// of assigned splats actually evaluated (pixels in empty tiles excluded).
pub fn workload_stats(out: &RenderOutput, tile: [u32; 2]) -> Result<WorkloadStats> {
    if out.per_tile_assigned.iter().all(|&n| n == 0) {
        return Err(OracleError::DegenerateWorkload);
    }
    let (mean_per_tile, var_per_tile) = mean_var(out.per_tile_assigned.iter().map(|&n| n as f64));
    let mut fractions = Vec::new();
    for y in 0..out.height {
        for x in 0..out.width {
            let assigned = out.per_tile_assigned[out.tile_of(x, y, tile)];
            if assigned > 0 {
                let computed = out.per_pixel_computed[out.pixel_index(x, y)];
                fractions.push(computed as f64 / assigned as f64);
            }
        }
    }
    let (mean_computed_fraction, var_computed_fraction) = mean_var(fractions.iter().copied());
    Ok(WorkloadStats {
        mean_per_tile,
        var_per_tile,
        mean_computed_fraction,
        var_computed_fraction,
    })
}

/// Parameters for [`generate_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub n: usize,
    pub width: u32,
    pub height: u32,
    pub tile: [u32; 2],
    pub opacity_range: (f64, f64),
    /// 3-sigma radius range in pixels for each principal axis.
    pub radius_range: (f64, f64),
}

impl SceneParams {
    pub fn new(n: usize, width: u32, height: u32) -> Self {
        Self {
            n,
            width,
            height,
            tile: [16, 16],
            opacity_range: (0.05, 1.0),
            radius_range: (1.5, 12.0),
        }
    }
}

/// Deterministic random scene. Identical seed and parameters give an
/// identical scene.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    let (o_lo, o_hi) = params.opacity_range;
    let (r_lo, r_hi) = params.radius_range;
    if !(o_lo <= o_hi) || o_lo < 0.0 || o_hi > 1.0 {
        return Err(OracleError::InvalidRange(format!("opacity range {o_lo}..{o_hi}")));
    }
    if !(r_lo <= r_hi) || r_lo <= 0.0 || !r_hi.is_finite() {
        return Err(OracleError::InvalidRange(format!("radius range {r_lo}..{r_hi}")));
    }
    if params.width == 0 || params.height == 0 || params.tile.contains(&0) {
        return Err(OracleError::InvalidRange("image and tile dims must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = Vec::with_capacity(params.n);
    for id in 0..params.n {
        let xy = [
            rng.gen_range(0.0..params.width as f64),
            rng.gen_range(0.0..params.height as f64),
        ];
        let sx = rng.gen_range(r_lo..=r_hi) / 3.0;
        let sy = rng.gen_range(r_lo..=r_hi) / 3.0;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = theta.sin_cos();
        // covariance = R diag(sx², sy²) Rᵀ; conic is its inverse.
        let (vx, vy) = (sx * sx, sy * sy);
        let cxx = cos * cos * vx + sin * sin * vy;
        let cyy = sin * sin * vx + cos * cos * vy;
        let cxy = sin * cos * (vx - vy);
        let det = cxx * cyy - cxy * cxy;
        let conic = [cyy / det, -cxy / det, cxx / det];
        let opacity = rng.gen_range(o_lo..=o_hi);
        let color = (0..DEFAULT_CHANNELS).map(|_| rng.gen_range(0.0..1.0)).collect();
        let depth = rng.gen_range(0.1..100.0);
        splats.push(Splat {
            id: id as u32,
            xy,
            conic,
            opacity,
            color,
            depth,
        });
    }
    Ok(Scene {
        width: params.width,
        height: params.height,
        tile: params.tile,
        channels: DEFAULT_CHANNELS,
        background: vec![0.0; DEFAULT_CHANNELS],
        splats,
    })
}
