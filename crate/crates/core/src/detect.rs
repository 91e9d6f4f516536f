//! Detector backends and counting-by-detection.
//!
//! The visual detector is an external component. Backends here either ingest
//! its per-patch output files ([`FileBackend`]) or simulate a detector from
//! known ground truth ([`OracleBackend`]).

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{label_file_name, parse_labels, AnnotationSet, BoundingBox, DetectionRecord};
use crate::error::{ensure, Error, Result};
use crate::raster::{PatchGrid, PatchRef};

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub name: &'static str,
    pub deterministic: bool,
}

pub trait DetectorBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn detect_patch(&self, block_id: &str, patch: &PatchRef) -> Result<Vec<DetectionRecord>>;
}

/// Detections of one block, one list per grid patch in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDetections {
    pub block_id: String,
    pub per_patch: Vec<Vec<DetectionRecord>>,
}

impl BlockDetections {
    pub fn iter(&self) -> impl Iterator<Item = &DetectionRecord> {
        self.per_patch.iter().flatten()
    }

    pub fn count(&self) -> DetectionCount {
        count_by_detection(&self.per_patch)
    }

    pub fn filtered(&self, confidence_threshold: f64) -> Self {
        Self {
            block_id: self.block_id.clone(),
            per_patch: self
                .per_patch
                .iter()
                .map(|v| v.iter().filter(|d| d.confidence >= confidence_threshold).copied().collect())
                .collect(),
        }
    }

    /// Writes one detection file per patch that has detections.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        use crate::annotations::{format_labels, LabelRecord};
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for dets in &self.per_patch {
            let Some(first) = dets.first() else { continue };
            let patch = first.patch;
            let records: Vec<_> = dets
                .iter()
                .map(|d| LabelRecord {
                    class_id: d.class_id,
                    bbox: d.bbox,
                    confidence: Some(d.confidence),
                })
                .collect();
            let path = dir.join(label_file_name(&self.block_id, patch.row, patch.col));
            fs::write(&path, format_labels(&records, &patch, true)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionCount {
    pub total: usize,
    pub per_patch_counts: Vec<usize>,
}

pub fn count_by_detection(per_patch: &[Vec<DetectionRecord>]) -> DetectionCount {
    let per_patch_counts: Vec<usize> = per_patch.iter().map(Vec::len).collect();
    DetectionCount {
        total: per_patch_counts.iter().sum(),
        per_patch_counts,
    }
}

/// Runs `backend` over every patch of `grid`. Patches are processed in
/// parallel; output order is the grid's row-major order.
pub fn detect_block(backend: &dyn DetectorBackend, grid: &PatchGrid, block_id: &str) -> Result<BlockDetections> {
    let patches: Vec<PatchRef> = grid.patches().collect();
    let per_patch = patches
        .par_iter()
        .map(|p| backend.detect_patch(block_id, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockDetections {
        block_id: block_id.to_string(),
        per_patch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileBackendConfig {
    pub detections_dir: PathBuf,
    pub confidence_threshold: f64,
    /// Error out on a missing patch file instead of treating it as empty.
    #[serde(default)]
    pub strict: bool,
}

impl FileBackendConfig {
    pub fn new(detections_dir: impl Into<PathBuf>) -> Self {
        Self {
            detections_dir: detections_dir.into(),
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            strict: false,
        }
    }
}

/// Reads `{block}_{row}_{col}.txt` detection files written by an external detector.
#[derive(Debug, Clone)]
pub struct FileBackend {
    config: FileBackendConfig,
}

impl FileBackend {
    pub fn new(config: FileBackendConfig) -> Result<Self> {
        let t = config.confidence_threshold;
        ensure((0.0..=1.0).contains(&t), || format!("confidence threshold {t} not in [0, 1]"))?;
        Ok(Self { config })
    }
}

impl DetectorBackend for FileBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "file",
            deterministic: true,
        }
    }

    fn detect_patch(&self, block_id: &str, patch: &PatchRef) -> Result<Vec<DetectionRecord>> {
        let path = self
            .config
            .detections_dir
            .join(label_file_name(block_id, patch.row, patch.col));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if self.config.strict {
                    return Err(Error::MissingFile(path));
                }
                log::trace!("{}: no detection file, counting zero", path.display());
                return Ok(Vec::new());
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let source = path.display().to_string();
        let mut out = Vec::new();
        for (i, rec) in parse_labels(&text, patch, true, &source)?.into_iter().enumerate() {
            let conf = rec.confidence.ok_or_else(|| Error::Parse {
                path: source.clone(),
                line: i + 1,
                message: "detection record lacks a confidence".into(),
            })?;
            if conf >= self.config.confidence_threshold {
                out.push(DetectionRecord {
                    bbox: rec.bbox,
                    confidence: conf,
                    class_id: rec.class_id,
                    patch: *patch,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceModel {
    /// True positives score 0.9, false positives 0.5.
    #[default]
    Constant,
    /// True positives score U(0.5, 1), false positives U(0.25, 0.75).
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBackendConfig {
    pub miss_rate: f64,
    /// Mean number of false positives per patch (Poisson).
    pub false_positive_rate_per_patch: f64,
    /// Standard deviation of the Gaussian center jitter, pixels.
    pub center_jitter_px: f64,
    pub confidence_model: ConfidenceModel,
    pub seed: u64,
}

impl Default for OracleBackendConfig {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            false_positive_rate_per_patch: 0.0,
            center_jitter_px: 0.0,
            confidence_model: ConfidenceModel::Constant,
            seed: 0,
        }
    }
}

impl OracleBackendConfig {
    pub fn validate(&self) -> Result<()> {
        ensure((0.0..=1.0).contains(&self.miss_rate), || {
            format!("miss rate {} not in [0, 1]", self.miss_rate)
        })?;
        ensure(
            self.false_positive_rate_per_patch.is_finite() && self.false_positive_rate_per_patch >= 0.0,
            || "false positive rate must be non-negative".into(),
        )?;
        ensure(self.center_jitter_px.is_finite() && self.center_jitter_px >= 0.0, || {
            "center jitter must be non-negative".into()
        })
    }
}

/// Synthetic detector that degrades known ground truth: each true box is
/// missed with probability `miss_rate`, kept boxes get Gaussian center
/// jitter, and Poisson-many false positives are scattered over each patch.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    config: OracleBackendConfig,
    truth: HashMap<String, AnnotationSet>,
}

impl OracleBackend {
    pub fn new(config: OracleBackendConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            truth: HashMap::new(),
        })
    }

    pub fn with_block(mut self, truth: AnnotationSet) -> Self {
        self.insert(truth);
        self
    }

    pub fn insert(&mut self, truth: AnnotationSet) {
        self.truth.insert(truth.block_id.clone(), truth);
    }

    fn patch_rng(&self, patch: &PatchRef) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(patch.index as u64);
        rng
    }

    fn confidence(&self, rng: &mut ChaCha8Rng, true_positive: bool) -> f64 {
        match (self.config.confidence_model, true_positive) {
            (ConfidenceModel::Constant, true) => 0.9,
            (ConfidenceModel::Constant, false) => 0.5,
            (ConfidenceModel::Noisy, true) => rng.random_range(0.5..=1.0),
            (ConfidenceModel::Noisy, false) => rng.random_range(0.25..=0.75),
        }
    }
}

impl DetectorBackend for OracleBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "oracle",
            deterministic: true,
        }
    }

    fn detect_patch(&self, block_id: &str, patch: &PatchRef) -> Result<Vec<DetectionRecord>> {
        let truth = self
            .truth
            .get(block_id)
            .ok_or_else(|| Error::Data(format!("oracle has no ground truth for block {block_id}")))?;
        let mut rng = self.patch_rng(patch);
        let jitter = Normal::new(0.0, self.config.center_jitter_px)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let boxes = truth.boxes_in(patch);
        let mut out = Vec::with_capacity(boxes.len());
        for b in boxes {
            // draw every variate even for missed boxes so outcomes do not shift
            let missed = rng.random_bool(self.config.miss_rate);
            let (dx, dy) = (jitter.sample(&mut rng), jitter.sample(&mut rng));
            let conf = self.confidence(&mut rng, true);
            if !missed {
                let mut moved = b.shifted(dx, dy);
                moved.cx = moved.cx.clamp(0.0, patch.w as f64);
                moved.cy = moved.cy.clamp(0.0, patch.h as f64);
                out.push(DetectionRecord::new(moved, conf, *patch)?);
            }
        }
        if self.config.false_positive_rate_per_patch > 0.0 {
            let poisson = Poisson::new(self.config.false_positive_rate_per_patch)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let n_fp = poisson.sample(&mut rng) as usize;
            let size = if boxes.is_empty() {
                30.0
            } else {
                boxes.iter().map(|b| b.w).sum::<f64>() / boxes.len() as f64
            };
            for _ in 0..n_fp {
                let cx = rng.random_range(0.0..patch.w as f64);
                let cy = rng.random_range(0.0..patch.h as f64);
                let conf = self.confidence(&mut rng, false);
                out.push(DetectionRecord::new(BoundingBox::new(cx, cy, size, size)?, conf, *patch)?);
            }
        }
        Ok(out)
    }
}
