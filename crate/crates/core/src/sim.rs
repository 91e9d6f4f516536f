//! Synthetic planting blocks with known ground truth.
//!
//! Mound centers come from dart throwing with a minimum separation (checked
//! through a spatial hash) and optional rejection sampling against a linear
//! density field. Each mound is independently hidden with the block's
//! invisible fraction: hidden mounds count towards `gt_count` but never
//! appear in the visible annotations.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationSet, BoundingBox};
use crate::error::{ensure, Error, Result};
use crate::raster::{build_grid, EdgePolicy, OrthomosaicMeta, PatchGrid, PatchRef};

pub const FT_SAMPLE_PATCHES: usize = 11;
pub const DEFAULT_GSD_CM_PER_PX: f64 = 3.0;
pub const SMALL_BLOCK_AREAS_HA: [f64; 2] = [2.37, 3.09];

const MIN_MOUND_SIZE_PX: f64 = 4.0;
const MAX_DARTS_PER_MOUND: usize = 2_000;

const STREAM_LAYOUT: u64 = 0;
const STREAM_SIZE: u64 = 1;
const STREAM_VISIBILITY: u64 = 2;
const STREAM_FT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBlockSpec {
    pub block_id: String,
    pub area_ha: f64,
    pub density_per_ha: f64,
    /// Relative slope `(gx, gy)` of the density across the block: the local
    /// density is `density * (1 + gx (u - 1/2) + gy (v - 1/2))` for normalized
    /// position `(u, v)`.
    pub density_gradient: Option<(f64, f64)>,
    /// Mean and standard deviation of the mound box side, pixels.
    pub mound_size_px: (f64, f64),
    pub invisible_fraction: f64,
    /// Mounds whose center lies within this many pixels of the mosaic edge
    /// are hidden with twice the invisible fraction (capped at 1).
    pub border_margin_px: u32,
    pub gsd_cm_per_px: f64,
    /// Width over height of the mosaic.
    pub aspect: f64,
    pub seed: u64,
}

impl Default for SyntheticBlockSpec {
    fn default() -> Self {
        Self {
            block_id: "S01".into(),
            area_ha: 5.0,
            density_per_ha: 900.0,
            density_gradient: None,
            mound_size_px: (33.0, 5.0),
            invisible_fraction: 0.0,
            border_margin_px: 0,
            gsd_cm_per_px: DEFAULT_GSD_CM_PER_PX,
            aspect: 1.3,
            seed: 0,
        }
    }
}

impl SyntheticBlockSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.area_ha.is_finite() && self.area_ha > 0.0, || {
            format!("block area must be positive, got {}", self.area_ha)
        })?;
        ensure(self.density_per_ha.is_finite() && self.density_per_ha > 0.0, || {
            format!("density must be positive, got {}", self.density_per_ha)
        })?;
        ensure((0.0..1.0).contains(&self.invisible_fraction), || {
            format!("invisible fraction {} not in [0, 1)", self.invisible_fraction)
        })?;
        let (mean, std) = self.mound_size_px;
        ensure(mean.is_finite() && mean > 0.0 && std.is_finite() && std >= 0.0, || {
            format!("invalid mound size ({mean}, {std})")
        })?;
        ensure(self.gsd_cm_per_px.is_finite() && self.gsd_cm_per_px > 0.0, || {
            "ground sampling distance must be positive".into()
        })?;
        ensure(self.aspect.is_finite() && self.aspect > 0.0, || "aspect must be positive".into())?;
        if let Some((gx, gy)) = self.density_gradient {
            ensure(gx.is_finite() && gy.is_finite() && gx.abs() + gy.abs() < 2.0, || {
                format!("density gradient ({gx}, {gy}) would make the density negative")
            })?;
        }
        Ok(())
    }

    /// Mosaic size in pixels covering `area_ha` at the block's ground sampling distance.
    pub fn image_size(&self) -> Result<(u32, u32)> {
        let m_per_px = self.gsd_cm_per_px / 100.0;
        let pixels = self.area_ha * 10_000.0 / (m_per_px * m_per_px);
        let h = (pixels / self.aspect).sqrt();
        let w = h * self.aspect;
        ensure(w >= 1.0 && h >= 1.0 && w < u32::MAX as f64 && h < u32::MAX as f64, || {
            format!("block of {} ha does not map to a usable image size", self.area_ha)
        })?;
        Ok((w.round() as u32, h.round() as u32))
    }

    pub fn expected_count(&self) -> f64 {
        self.area_ha * self.density_per_ha
    }

    /// Minimum center-to-center distance between mounds.
    pub fn min_separation_px(&self) -> f64 {
        self.mound_size_px.0 + 2.0 * self.mound_size_px.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mound {
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub visible: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticBlock {
    pub spec: SyntheticBlockSpec,
    pub meta: OrthomosaicMeta,
    pub grid: PatchGrid,
    /// Every mound, visible or not, in mosaic coordinates.
    pub mounds: Vec<Mound>,
    /// Visible mounds as patch-local boxes, every grid patch registered.
    pub visible: AnnotationSet,
    pub gt_count: u64,
    /// Patches an operator would annotate for fine-tuning.
    pub ft_sample: AnnotationSet,
}

impl SyntheticBlock {
    pub fn visible_count(&self) -> usize {
        self.visible.total_count()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform-grid hash over mound centers with cell size equal to the minimum
/// separation, so conflicts can only sit in the 3x3 neighbourhood.
struct SpatialHash {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<(f64, f64)>>,
}

impl SpatialHash {
    fn new(cell: f64) -> Self {
        Self {
            cell,
            cells: HashMap::new(),
        }
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    fn is_free(&self, x: f64, y: f64, min_dist: f64) -> bool {
        let (kx, ky) = self.key(x, y);
        let d2 = min_dist * min_dist;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(pts) = self.cells.get(&(kx + dx, ky + dy)) {
                    if pts.iter().any(|&(px, py)| (px - x).powi(2) + (py - y).powi(2) < d2) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, x: f64, y: f64) {
        let k = self.key(x, y);
        self.cells.entry(k).or_default().push((x, y));
    }
}

fn layout(spec: &SyntheticBlockSpec, width: f64, height: f64) -> Result<Vec<(f64, f64)>> {
    let mut rng = stream_rng(spec.seed, STREAM_LAYOUT);
    let poisson = Poisson::new(spec.expected_count()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let target = poisson.sample(&mut rng) as usize;
    let sep = spec.min_separation_px();
    let (gx, gy) = spec.density_gradient.unwrap_or((0.0, 0.0));
    let peak = 1.0 + 0.5 * (gx.abs() + gy.abs());
    let mut hash = SpatialHash::new(sep.max(1.0));
    let mut centers = Vec::with_capacity(target);
    let budget = target.saturating_mul(MAX_DARTS_PER_MOUND).max(MAX_DARTS_PER_MOUND);
    let mut darts = 0usize;
    while centers.len() < target {
        darts += 1;
        if darts > budget {
            return Err(Error::Data(format!(
                "block {}: placed only {} of {} mounds at separation {sep:.1} px",
                spec.block_id,
                centers.len(),
                target
            )));
        }
        let x = rng.random_range(0.0..width);
        let y = rng.random_range(0.0..height);
        let accept = rng.random_range(0.0..peak);
        let local = 1.0 + gx * (x / width - 0.5) + gy * (y / height - 0.5);
        if accept >= local || !hash.is_free(x, y, sep) {
            continue;
        }
        hash.insert(x, y);
        centers.push((x, y));
    }
    Ok(centers)
}

/// Generates one block tiled with `patch_size_px` patches. Under
/// [`EdgePolicy::Drop`], visible mounds in the discarded border still count
/// towards `gt_count` but have no patch to be annotated in.
pub fn generate_block(spec: &SyntheticBlockSpec, patch_size_px: u32, edge_policy: EdgePolicy) -> Result<SyntheticBlock> {
    spec.validate()?;
    let (w, h) = spec.image_size()?;
    let mut meta = OrthomosaicMeta::new(spec.block_id.clone(), w, h, spec.area_ha)?;
    meta.gsd_cm_per_px = Some(spec.gsd_cm_per_px);
    let grid = build_grid(&meta, patch_size_px, edge_policy)?;

    let centers = layout(spec, w as f64, h as f64)?;
    let mut size_rng = stream_rng(spec.seed, STREAM_SIZE);
    let mut vis_rng = stream_rng(spec.seed, STREAM_VISIBILITY);
    let size_dist = Normal::new(spec.mound_size_px.0, spec.mound_size_px.1)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let margin = spec.border_margin_px as f64;
    let near_border = |x: f64, y: f64| x < margin || y < margin || x >= w as f64 - margin || y >= h as f64 - margin;

    let mut visible = AnnotationSet::new(spec.block_id.clone());
    for p in grid.patches() {
        visible.add_patch(p);
    }
    let mut mounds = Vec::with_capacity(centers.len());
    for (x, y) in centers {
        let size = size_dist.sample(&mut size_rng).max(MIN_MOUND_SIZE_PX);
        let p_hide = if near_border(x, y) {
            (2.0 * spec.invisible_fraction).min(1.0)
        } else {
            spec.invisible_fraction
        };
        let is_visible = !vis_rng.random_bool(p_hide);
        if is_visible {
            if let Ok((patch, lx, ly)) = grid.locate(x, y) {
                visible.push(patch, BoundingBox::new(lx, ly, size, size)?);
            }
        }
        mounds.push(Mound {
            x,
            y,
            size,
            visible: is_visible,
        });
    }

    let ft_sample = sample_ft_patches(&visible, &grid, spec.seed);
    Ok(SyntheticBlock {
        spec: spec.clone(),
        meta,
        gt_count: mounds.len() as u64,
        mounds,
        visible,
        grid,
        ft_sample,
    })
}

/// Picks up to [`FT_SAMPLE_PATCHES`] non-empty patches, preferring full-size
/// ones so clipped edge patches do not bias the density.
fn sample_ft_patches(visible: &AnnotationSet, grid: &PatchGrid, seed: u64) -> AnnotationSet {
    let ps = grid.patch_size_px();
    let non_empty: Vec<PatchRef> = visible.patches().filter(|(_, b)| !b.is_empty()).map(|(p, _)| *p).collect();
    let full: Vec<PatchRef> = non_empty.iter().copied().filter(|p| p.w == ps && p.h == ps).collect();
    let pool = if full.len() >= FT_SAMPLE_PATCHES { full } else { non_empty };
    let mut rng = stream_rng(seed, STREAM_FT);
    let k = pool.len().min(FT_SAMPLE_PATCHES);
    let mut chosen: Vec<PatchRef> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    chosen.sort();
    visible.select(&chosen)
}

/// Ranges the fleet parameters are drawn from, uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetDistribution {
    pub area_ha: (f64, f64),
    pub density_per_ha: (f64, f64),
    pub invisible_fraction: (f64, f64),
    /// Largest absolute gradient component.
    pub max_gradient: f64,
    pub mound_size_px: (f64, f64),
    pub gsd_cm_per_px: f64,
    /// Forces the first blocks to the small areas in [`SMALL_BLOCK_AREAS_HA`].
    pub include_small_blocks: bool,
}

impl Default for FleetDistribution {
    fn default() -> Self {
        Self {
            area_ha: (2.0, 16.0),
            density_per_ha: (600.0, 1100.0),
            invisible_fraction: (0.1, 0.3),
            max_gradient: 0.5,
            mound_size_px: (33.0, 5.0),
            gsd_cm_per_px: DEFAULT_GSD_CM_PER_PX,
            include_small_blocks: true,
        }
    }
}

impl FleetDistribution {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        ensure(
            ordered(self.area_ha) && ordered(self.density_per_ha) && ordered(self.invisible_fraction),
            || "fleet ranges must be finite with lo <= hi".into(),
        )?;
        ensure((0.0..1.0).contains(&self.max_gradient), || {
            format!("max gradient {} not in [0, 1)", self.max_gradient)
        })
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Specs for `n` blocks named `S01`, `S02`, ...
pub fn fleet_specs(n: usize, dist: &FleetDistribution, seed: u64) -> Result<Vec<SyntheticBlockSpec>> {
    ensure(n >= 2, || format!("a fleet needs at least 2 blocks, got {n}"))?;
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(2);
    (0..n)
        .map(|i| {
            let mut area_ha = draw(&mut rng, dist.area_ha);
            if dist.include_small_blocks && i < SMALL_BLOCK_AREAS_HA.len() {
                area_ha = SMALL_BLOCK_AREAS_HA[i];
            }
            let density_per_ha = draw(&mut rng, dist.density_per_ha);
            let invisible_fraction = draw(&mut rng, dist.invisible_fraction);
            let g = dist.max_gradient;
            let gradient = (draw(&mut rng, (-g, g)), draw(&mut rng, (-g, g)));
            let aspect = draw(&mut rng, (0.7, 1.5));
            let spec = SyntheticBlockSpec {
                block_id: format!("S{:0width$}", i + 1),
                area_ha,
                density_per_ha,
                density_gradient: (g > 0.0).then_some(gradient),
                mound_size_px: dist.mound_size_px,
                invisible_fraction,
                border_margin_px: 0,
                gsd_cm_per_px: dist.gsd_cm_per_px,
                aspect,
                seed: rng.random(),
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Generates the whole fleet in parallel; the result does not depend on
/// thread scheduling.
pub fn generate_fleet(
    n: usize,
    dist: &FleetDistribution,
    seed: u64,
    patch_size_px: u32,
    edge_policy: EdgePolicy,
) -> Result<Vec<SyntheticBlock>> {
    fleet_specs(n, dist, seed)?
        .par_iter()
        .map(|s| generate_block(s, patch_size_px, edge_policy))
        .collect()
}
