//! Bounding-box augmentation by random size change and random translation.
//!
//! Each source box receives one transform drawn uniformly from
//! {size, translation}. A size change multiplies width and height by the same
//! factor `Z`; a translation moves the center by `L` pixels in direction
//! `alpha`. Results are clipped to the patch, and a clipped box keeping less
//! than [`MIN_KEPT_AREA_FRACTION`] of its area is discarded.
//!
//! Randomness comes from a ChaCha8 generator seeded with `seed ^ patch.index`,
//! so patches can be processed in any order or in parallel.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::BoundingBox;
use crate::error::{ensure, Error, Result};
use crate::raster::PatchRef;

pub const MIN_KEPT_AREA_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Scale factor range for size changes.
    pub z_range: (f64, f64),
    /// Translation distance range, pixels.
    pub l_range: (f64, f64),
    /// Translation direction range, radians.
    pub alpha_range: (f64, f64),
    pub seed: u64,
    pub boxes_per_source: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            z_range: (0.8, 1.2),
            l_range: (1.0, 10.0),
            alpha_range: (0.0, 2.0 * PI),
            seed: 0,
            boxes_per_source: 1,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (z0, z1) = self.z_range;
        let (l0, l1) = self.l_range;
        let (a0, a1) = self.alpha_range;
        ensure(z0.is_finite() && z1.is_finite() && z0 > 0.0 && z0 <= z1, || {
            format!("z range [{z0}, {z1}] must be a non-empty interval of positive numbers")
        })?;
        ensure(l0.is_finite() && l1.is_finite() && l0 >= 0.0 && l0 <= l1, || {
            format!("l range [{l0}, {l1}] must be a non-empty interval in [0, inf)")
        })?;
        ensure(a0 >= 0.0 && a1 <= 2.0 * PI && a0 <= a1, || {
            format!("alpha range [{a0}, {a1}] must be a non-empty interval inside [0, 2pi]")
        })?;
        ensure(self.boxes_per_source >= 1, || "boxes_per_source must be at least 1".into())
    }
}

/// The transform applied to one augmented box, with its sampled parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Size { z: f64 },
    Translation { l: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedBox {
    pub source_index: usize,
    pub transform: Transform,
    /// Transformed box before clipping to the patch.
    pub unclipped: BoundingBox,
    pub bbox: BoundingBox,
}

pub fn resize_box(b: &BoundingBox, z: f64) -> Result<BoundingBox> {
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::InvalidParameter(format!("scale factor must be positive, got {z}")));
    }
    Ok(BoundingBox {
        w: b.w * z,
        h: b.h * z,
        ..*b
    })
}

pub fn translate_box(b: &BoundingBox, l: f64, alpha: f64) -> BoundingBox {
    BoundingBox {
        cx: b.cx + l * alpha.cos(),
        cy: b.cy + l * alpha.sin(),
        ..*b
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(RangeInclusive::new(lo, hi))
}

pub fn patch_rng(seed: u64, patch: &PatchRef) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ patch.index as u64)
}

/// Augments the boxes of one patch. Only generated boxes are returned;
/// callers wanting the additive training set keep the originals as well.
pub fn augment_patch(boxes: &[BoundingBox], cfg: &AugmentationConfig, patch: &PatchRef) -> Result<Vec<AugmentedBox>> {
    cfg.validate()?;
    let mut rng = patch_rng(cfg.seed, patch);
    let (pw, ph) = (patch.w as f64, patch.h as f64);
    let mut out = Vec::with_capacity(boxes.len() * cfg.boxes_per_source);
    for (source_index, b) in boxes.iter().enumerate() {
        for _ in 0..cfg.boxes_per_source {
            let transform = if rng.random_bool(0.5) {
                Transform::Size {
                    z: sample(&mut rng, cfg.z_range),
                }
            } else {
                let l = sample(&mut rng, cfg.l_range);
                let alpha = sample(&mut rng, cfg.alpha_range);
                Transform::Translation { l, alpha }
            };
            let unclipped = match transform {
                Transform::Size { z } => resize_box(b, z)?,
                Transform::Translation { l, alpha } => translate_box(b, l, alpha),
            };
            match unclipped.clip(0.0, 0.0, pw, ph) {
                Some(clipped) if clipped.area() >= MIN_KEPT_AREA_FRACTION * unclipped.area() => {
                    out.push(AugmentedBox {
                        source_index,
                        transform,
                        unclipped,
                        bbox: clipped,
                    });
                }
                _ => log::debug!(
                    "patch ({}, {}): discarding augmented box from source {source_index} after clipping",
                    patch.row,
                    patch.col
                ),
            }
        }
    }
    Ok(out)
}
