//! Orthomosaic metadata and the regular patch grid laid over it.
//!
//! An orthomosaic is never decoded here: the grid only needs the pixel
//! dimensions. Patches are indexed row-major, `index = row * cols + col`,
//! and patch `(row, col)` starts at `(col * patch_size, row * patch_size)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Block-level metadata stored in the JSON sidecar next to each orthomosaic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthomosaicMeta {
    pub id: String,
    pub width_px: u32,
    pub height_px: u32,
    /// Planting block area in hectares.
    pub area_ha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gsd_cm_per_px: Option<f64>,
}

impl OrthomosaicMeta {
    pub fn new(id: impl Into<String>, width_px: u32, height_px: u32, area_ha: f64) -> Result<Self> {
        let meta = Self {
            id: id.into(),
            width_px,
            height_px,
            area_ha,
            gsd_cm_per_px: None,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.id.is_empty(), || "block id must not be empty".into())?;
        ensure(self.width_px >= 1 && self.height_px >= 1, || {
            format!("block {}: image must be at least 1x1 px", self.id)
        })?;
        ensure(self.area_ha.is_finite() && self.area_ha > 0.0, || {
            format!("block {}: area_ha must be positive, got {}", self.id, self.area_ha)
        })?;
        if let Some(gsd) = self.gsd_cm_per_px {
            ensure(gsd.is_finite() && gsd > 0.0, || {
                format!("block {}: gsd_cm_per_px must be positive", self.id)
            })?;
        }
        Ok(())
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: Self = serde_json::from_str(&text)?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// How borders that do not divide evenly by the patch size are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgePolicy {
    /// Edge patches keep the full patch size; the part beyond the image is padding.
    Pad,
    /// Edge patches are truncated to the image.
    #[default]
    Partial,
    /// Incomplete edge patches are discarded.
    Drop,
}

impl std::str::FromStr for EdgePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad" => Ok(EdgePolicy::Pad),
            "partial" => Ok(EdgePolicy::Partial),
            "drop" => Ok(EdgePolicy::Drop),
            other => Err(Error::InvalidParameter(format!(
                "unknown edge policy {other:?} (expected pad, partial or drop)"
            ))),
        }
    }
}

impl std::fmt::Display for EdgePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgePolicy::Pad => "pad",
            EdgePolicy::Partial => "partial",
            EdgePolicy::Drop => "drop",
        })
    }
}

/// Non-overlapping regular tiling of an orthomosaic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    width_px: u32,
    height_px: u32,
    patch_size_px: u32,
    cols: u32,
    rows: u32,
    edge_policy: EdgePolicy,
}

/// One cell of a [`PatchGrid`], with its pixel rectangle in mosaic coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub row: u32,
    pub col: u32,
    /// Row-major linear index inside the grid.
    pub index: usize,
    pub origin_x: u32,
    pub origin_y: u32,
    pub w: u32,
    pub h: u32,
}

pub fn build_grid(meta: &OrthomosaicMeta, patch_size_px: u32, edge_policy: EdgePolicy) -> Result<PatchGrid> {
    meta.validate()?;
    PatchGrid::new(meta.width_px, meta.height_px, patch_size_px, edge_policy)
}

impl PatchGrid {
    pub fn new(width_px: u32, height_px: u32, patch_size_px: u32, edge_policy: EdgePolicy) -> Result<Self> {
        ensure(patch_size_px >= 1, || "patch size must be at least 1 px".into())?;
        ensure(width_px >= 1 && height_px >= 1, || "image must be at least 1x1 px".into())?;
        let (cols, rows) = match edge_policy {
            EdgePolicy::Pad | EdgePolicy::Partial => {
                (width_px.div_ceil(patch_size_px), height_px.div_ceil(patch_size_px))
            }
            EdgePolicy::Drop => (width_px / patch_size_px, height_px / patch_size_px),
        };
        if cols == 0 || rows == 0 {
            return Err(Error::InvalidParameter(format!(
                "patch size {patch_size_px} yields no complete patch on a {width_px}x{height_px} image under drop"
            )));
        }
        Ok(Self {
            width_px,
            height_px,
            patch_size_px,
            cols,
            rows,
            edge_policy,
        })
    }

    pub fn patch_size_px(&self) -> u32 {
        self.patch_size_px
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn edge_policy(&self) -> EdgePolicy {
        self.edge_policy
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width_px, self.height_px)
    }

    pub fn len(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width and height of the mosaic region covered by the patches.
    pub fn extent(&self) -> (u32, u32) {
        match self.edge_policy {
            EdgePolicy::Partial => (self.width_px, self.height_px),
            EdgePolicy::Pad | EdgePolicy::Drop => {
                (self.cols * self.patch_size_px, self.rows * self.patch_size_px)
            }
        }
    }

    pub fn patch(&self, row: u32, col: u32) -> Result<PatchRef> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::InvalidParameter(format!(
                "patch ({row}, {col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        let origin_x = col * self.patch_size_px;
        let origin_y = row * self.patch_size_px;
        let (w, h) = match self.edge_policy {
            EdgePolicy::Partial => (
                self.patch_size_px.min(self.width_px - origin_x),
                self.patch_size_px.min(self.height_px - origin_y),
            ),
            EdgePolicy::Pad | EdgePolicy::Drop => (self.patch_size_px, self.patch_size_px),
        };
        Ok(PatchRef {
            row,
            col,
            index: row as usize * self.cols as usize + col as usize,
            origin_x,
            origin_y,
            w,
            h,
        })
    }

    pub fn patch_at_index(&self, index: usize) -> Result<PatchRef> {
        let cols = self.cols as usize;
        if index >= self.len() {
            return Err(Error::InvalidParameter(format!(
                "patch index {index} outside grid of {} patches",
                self.len()
            )));
        }
        self.patch((index / cols) as u32, (index % cols) as u32)
    }

    /// All patches in row-major order.
    pub fn patches(&self) -> impl Iterator<Item = PatchRef> + '_ {
        (0..self.rows).flat_map(move |r| {
            (0..self.cols).map(move |c| self.patch(r, c).expect("in-range patch"))
        })
    }

    /// Maps an integer mosaic pixel to its patch and patch-local coordinates.
    pub fn mosaic_to_patch(&self, x: u32, y: u32) -> Result<(PatchRef, u32, u32)> {
        let (ex, ey) = self.extent();
        if x >= ex || y >= ey {
            return Err(Error::OutOfBounds {
                x: x as f64,
                y: y as f64,
                context: format!("grid extent {ex}x{ey}"),
            });
        }
        let patch = self.patch(y / self.patch_size_px, x / self.patch_size_px)?;
        Ok((patch, x - patch.origin_x, y - patch.origin_y))
    }

    /// Real-valued variant of [`mosaic_to_patch`](Self::mosaic_to_patch).
    pub fn locate(&self, x: f64, y: f64) -> Result<(PatchRef, f64, f64)> {
        let (ex, ey) = self.extent();
        if !(x >= 0.0 && y >= 0.0 && x < ex as f64 && y < ey as f64) {
            return Err(Error::OutOfBounds {
                x,
                y,
                context: format!("grid extent {ex}x{ey}"),
            });
        }
        let ps = self.patch_size_px as f64;
        let col = ((x / ps).floor() as u32).min(self.cols - 1);
        let row = ((y / ps).floor() as u32).min(self.rows - 1);
        let patch = self.patch(row, col)?;
        Ok((patch, x - patch.origin_x as f64, y - patch.origin_y as f64))
    }
}

impl PatchRef {
    pub fn contains_local(&self, x: u32, y: u32) -> bool {
        x < self.w && y < self.h
    }

    pub fn patch_to_mosaic(&self, x: u32, y: u32) -> Result<(u32, u32)> {
        if !self.contains_local(x, y) {
            return Err(Error::OutOfBounds {
                x: x as f64,
                y: y as f64,
                context: format!("patch ({}, {}) of size {}x{}", self.row, self.col, self.w, self.h),
            });
        }
        Ok((self.origin_x + x, self.origin_y + y))
    }

    /// Patch-local real coordinates shifted into the mosaic frame; no bounds check.
    pub fn offset(&self, x: f64, y: f64) -> (f64, f64) {
        (x + self.origin_x as f64, y + self.origin_y as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(w: u32, h: u32) -> OrthomosaicMeta {
        OrthomosaicMeta::new("T", w, h, 1.0).unwrap()
    }

    #[test]
    fn exact_division() {
        let g = build_grid(&meta(832, 832), 416, EdgePolicy::Pad).unwrap();
        assert_eq!((g.cols(), g.rows()), (2, 2));
        assert!(g.patches().all(|p| p.w == 416 && p.h == 416));
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn partial_edges() {
        let g = build_grid(&meta(1000, 1000), 416, EdgePolicy::Partial).unwrap();
        assert_eq!((g.cols(), g.rows()), (3, 3));
        let corner = g.patch(2, 2).unwrap();
        assert_eq!((corner.w, corner.h), (168, 168));
        assert_eq!(g.patch(0, 2).unwrap().w, 168);
        assert_eq!(g.patch(0, 2).unwrap().h, 416);
    }

    #[test]
    fn full_resolution_orthomosaic() {
        let g = build_grid(&meta(23610, 18151), 416, EdgePolicy::Pad).unwrap();
        assert_eq!((g.cols(), g.rows()), (57, 44));
    }

    #[test]
    fn drop_policy_floors() {
        let g = build_grid(&meta(1000, 900), 416, EdgePolicy::Drop).unwrap();
        assert_eq!((g.cols(), g.rows()), (2, 2));
        assert!(build_grid(&meta(300, 900), 416, EdgePolicy::Drop).is_err());
    }

    #[test]
    fn rejects_zero_patch_size() {
        assert!(build_grid(&meta(10, 10), 0, EdgePolicy::Partial).is_err());
    }

    #[test]
    fn rejects_bad_meta() {
        assert!(OrthomosaicMeta::new("T", 0, 10, 1.0).is_err());
        assert!(OrthomosaicMeta::new("T", 10, 10, 0.0).is_err());
        assert!(OrthomosaicMeta::new("T", 10, 10, f64::NAN).is_err());
    }

    #[test]
    fn coordinate_mapping() {
        let g = build_grid(&meta(2000, 2000), 416, EdgePolicy::Partial).unwrap();
        let p00 = g.patch(0, 0).unwrap();
        assert_eq!(p00.patch_to_mosaic(5, 7).unwrap(), (5, 7));
        let p12 = g.patch(1, 2).unwrap();
        assert_eq!(p12.patch_to_mosaic(0, 0).unwrap(), (832, 416));
        let (p, lx, ly) = g.mosaic_to_patch(833, 417).unwrap();
        assert_eq!((p.row, p.col, lx, ly), (1, 2, 1, 1));
    }

    #[test]
    fn out_of_bounds_rejected() {
        let g = build_grid(&meta(1000, 1000), 416, EdgePolicy::Partial).unwrap();
        assert!(g.mosaic_to_patch(1000, 0).is_err());
        let corner = g.patch(2, 2).unwrap();
        assert!(corner.patch_to_mosaic(168, 0).is_err());
        assert!(g.patch(3, 0).is_err());
    }

    #[test]
    fn pad_extent_covers_padding() {
        let g = build_grid(&meta(1000, 1000), 416, EdgePolicy::Pad).unwrap();
        assert_eq!(g.extent(), (1248, 1248));
        let (p, lx, _) = g.mosaic_to_patch(1200, 0).unwrap();
        assert_eq!((p.col, lx), (2, 368));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("T7.json");
        let mut m = OrthomosaicMeta::new("T7", 23610, 18151, 10.34).unwrap();
        m.gsd_cm_per_px = Some(2.8);
        m.write_sidecar(&path).unwrap();
        assert_eq!(OrthomosaicMeta::read_sidecar(&path).unwrap(), m);
    }

    #[test]
    fn sidecar_field_names() {
        let m: OrthomosaicMeta =
            serde_json::from_str(r#"{"id":"T1","width_px":6756,"height_px":5220,"area_ha":4.2}"#).unwrap();
        assert_eq!(m.width_px, 6756);
        assert_eq!(m.gsd_cm_per_px, None);
    }

    #[test]
    fn edge_policy_parse() {
        assert_eq!("pad".parse::<EdgePolicy>().unwrap(), EdgePolicy::Pad);
        assert!("wrap".parse::<EdgePolicy>().is_err());
        assert_eq!(EdgePolicy::default(), EdgePolicy::Partial);
    }
}
