//! Boxes, detections and the per-patch label file format.
//!
//! Label files hold one record per line, `class cx cy w h` for ground truth
//! and `class cx cy w h conf` for detections. Coordinates are normalized to
//! the patch (`cx / patch_w`, `w / patch_w`, ...) unless the caller asks for
//! pixel units. Files are named `{block}_{row}_{col}.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{PatchGrid, PatchRef};

/// Axis-aligned box given by its center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite box ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "box size must be positive, got {w}x{h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    fn intersection_area(&self, other: &Self) -> f64 {
        let iw = self.x_max().min(other.x_max()) - self.x_min().max(other.x_min());
        let ih = self.y_max().min(other.y_max()) - self.y_min().max(other.y_min());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Intersection with the rectangle `[x0, x1] x [y0, y1]`; `None` when empty.
    pub fn clip(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<Self> {
        let nx0 = self.x_min().max(x0);
        let ny0 = self.y_min().max(y0);
        let nx1 = self.x_max().min(x1);
        let ny1 = self.y_max().min(y1);
        if nx1 <= nx0 || ny1 <= ny0 {
            return None;
        }
        Self::from_corners(nx0, ny0, nx1, ny1).ok()
    }
}

/// One line of a label file after conversion to patch pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRecord {
    pub class_id: u32,
    pub bbox: BoundingBox,
    pub confidence: Option<f64>,
}

/// A detector output attached to the patch it was produced on.
///
/// `bbox` is in patch-local pixels and is stored as produced, even when it
/// extends past the patch border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: u32,
    pub patch: PatchRef,
}

impl DetectionRecord {
    pub fn new(bbox: BoundingBox, confidence: f64, patch: PatchRef) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidParameter(format!(
                "confidence must lie in [0, 1], got {confidence}"
            )));
        }
        Ok(Self {
            bbox,
            confidence,
            class_id: 0,
            patch,
        })
    }

    pub fn mosaic_box(&self) -> BoundingBox {
        let (cx, cy) = self.patch.offset(self.bbox.cx, self.bbox.cy);
        BoundingBox { cx, cy, ..self.bbox }
    }

    /// Mosaic-frame box clipped to its patch, the form used for IoU.
    pub fn iou_box(&self) -> Option<BoundingBox> {
        let p = &self.patch;
        self.mosaic_box().clip(
            p.origin_x as f64,
            p.origin_y as f64,
            (p.origin_x + p.w) as f64,
            (p.origin_y + p.h) as f64,
        )
    }
}

/// A box with a detection score, in whatever frame the caller works in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Shifts detections into mosaic coordinates; sizes are untouched.
pub fn detections_to_mosaic<'a>(dets: impl IntoIterator<Item = &'a DetectionRecord>) -> Vec<ScoredBox> {
    dets.into_iter()
        .map(|d| ScoredBox {
            bbox: d.mosaic_box(),
            confidence: d.confidence,
        })
        .collect()
}

/// Ground-truth boxes of one block, grouped by patch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub block_id: String,
    patches: BTreeMap<PatchRef, Vec<BoundingBox>>,
}

impl AnnotationSet {
    pub fn new(block_id: impl Into<String>) -> Self {
        Self {
            block_id: block_id.into(),
            patches: BTreeMap::new(),
        }
    }

    /// Registers a patch as annotated, even if it ends up with no boxes.
    pub fn add_patch(&mut self, patch: PatchRef) -> &mut Vec<BoundingBox> {
        self.patches.entry(patch).or_default()
    }

    pub fn push(&mut self, patch: PatchRef, bbox: BoundingBox) {
        self.add_patch(patch).push(bbox);
    }

    pub fn total_count(&self) -> usize {
        self.patches.values().map(Vec::len).sum()
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn patches(&self) -> impl Iterator<Item = (&PatchRef, &[BoundingBox])> {
        self.patches.iter().map(|(p, b)| (p, b.as_slice()))
    }

    pub fn boxes_in(&self, patch: &PatchRef) -> &[BoundingBox] {
        self.patches.get(patch).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Subset restricted to the given patches.
    pub fn select(&self, patches: &[PatchRef]) -> Self {
        let mut out = Self::new(self.block_id.clone());
        for p in patches {
            out.add_patch(*p).extend_from_slice(self.boxes_in(p));
        }
        out
    }

    /// Copy without the patches that hold no boxes.
    pub fn non_empty(&self) -> Self {
        Self {
            block_id: self.block_id.clone(),
            patches: self
                .patches
                .iter()
                .filter(|(_, b)| !b.is_empty())
                .map(|(p, b)| (*p, b.clone()))
                .collect(),
        }
    }

    /// Flattens every box into mosaic coordinates, in patch order.
    pub fn to_mosaic_frame(&self) -> Vec<BoundingBox> {
        self.patches
            .iter()
            .flat_map(|(p, boxes)| {
                boxes.iter().map(move |b| {
                    let (cx, cy) = p.offset(b.cx, b.cy);
                    BoundingBox { cx, cy, ..*b }
                })
            })
            .collect()
    }

    /// Reads every `{block}_{row}_{col}.txt` file of this block from `dir`.
    pub fn read_dir(dir: &Path, grid: &PatchGrid, block_id: &str) -> Result<Self> {
        let mut set = Self::new(block_id);
        for (patch, path) in block_label_files(dir, grid, block_id)? {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let records = parse_labels(&text, &patch, true, &path.display().to_string())?;
            set.add_patch(patch).extend(records.into_iter().map(|r| r.bbox));
        }
        Ok(set)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (patch, boxes) in &self.patches {
            let records: Vec<_> = boxes
                .iter()
                .map(|b| LabelRecord {
                    class_id: 0,
                    bbox: *b,
                    confidence: None,
                })
                .collect();
            let path = dir.join(label_file_name(&self.block_id, patch.row, patch.col));
            fs::write(&path, format_labels(&records, patch, true)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn label_file_name(block_id: &str, row: u32, col: u32) -> String {
    format!("{block_id}_{row}_{col}.txt")
}

/// Splits `{block}_{row}_{col}.txt`; block ids may themselves contain `_`.
pub fn parse_label_file_name(name: &str) -> Option<(&str, u32, u32)> {
    let stem = name.strip_suffix(".txt")?;
    let mut parts = stem.rsplitn(3, '_');
    let col = parts.next()?.parse().ok()?;
    let row = parts.next()?.parse().ok()?;
    let block = parts.next()?;
    if block.is_empty() {
        return None;
    }
    Some((block, row, col))
}

/// Label files of `block_id` in `dir`, sorted by patch.
pub(crate) fn block_label_files(
    dir: &Path,
    grid: &PatchGrid,
    block_id: &str,
) -> Result<Vec<(PatchRef, std::path::PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some((block, row, col)) = parse_label_file_name(name) else {
            continue;
        };
        if block != block_id {
            continue;
        }
        let patch = grid.patch(row, col).map_err(|_| {
            Error::Data(format!("{name}: patch ({row}, {col}) is outside the block grid"))
        })?;
        out.push((patch, entry.path()));
    }
    out.sort_by_key(|(p, _)| *p);
    Ok(out)
}

/// Parses a label file for `patch`. With `normalized`, coordinates are
/// fractions of the patch size and centers must lie in `[0, 1]`. Sizes only
/// need to be positive: truncated edge patches can be narrower than a box.
pub fn parse_label_file(text: &str, patch: &PatchRef, normalized: bool) -> Result<Vec<BoundingBox>> {
    Ok(parse_labels(text, patch, normalized, "<labels>")?
        .into_iter()
        .map(|r| r.bbox)
        .collect())
}

pub fn parse_labels(text: &str, patch: &PatchRef, normalized: bool, source: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(parse_err(format!("expected 5 or 6 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad class id {:?}", fields[0])))?;
        let mut values = [0.0f64; 5];
        for (slot, field) in values.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| parse_err(format!("bad number {field:?}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite number {field:?}")));
            }
        }
        let [cx, cy, w, h, conf] = values;
        let range_err = |message: String| Error::OutOfRange {
            path: source.to_string(),
            line: line_no,
            message,
        };
        if normalized {
            for (name, v) in [("cx", cx), ("cy", cy)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(range_err(format!("{name} = {v} not in [0, 1]")));
                }
            }
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(range_err(format!("box size {w}x{h} must be positive")));
        }
        let confidence = if fields.len() == 6 {
            if !(0.0..=1.0).contains(&conf) {
                return Err(range_err(format!("confidence {conf} not in [0, 1]")));
            }
            Some(conf)
        } else {
            None
        };
        let (sx, sy) = if normalized {
            (patch.w as f64, patch.h as f64)
        } else {
            (1.0, 1.0)
        };
        out.push(LabelRecord {
            class_id,
            bbox: BoundingBox {
                cx: cx * sx,
                cy: cy * sy,
                w: w * sx,
                h: h * sy,
            },
            confidence,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_labels`]. Floats use the shortest round-trip form.
pub fn format_labels(records: &[LabelRecord], patch: &PatchRef, normalized: bool) -> String {
    let (sx, sy) = if normalized {
        (patch.w as f64, patch.h as f64)
    } else {
        (1.0, 1.0)
    };
    let mut out = String::new();
    for r in records {
        let b = &r.bbox;
        let _ = write!(out, "{} {} {} {} {}", r.class_id, b.cx / sx, b.cy / sy, b.w / sx, b.h / sy);
        if let Some(c) = r.confidence {
            let _ = write!(out, " {c}");
        }
        out.push('\n');
    }
    out
}
