//! Run configuration, dataset manifests and the per-block processing chain
//! (detect, aggregate, extract features).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::{detections_to_mosaic, AnnotationSet, BoundingBox};
use crate::augment::AugmentationConfig;
use crate::detect::{detect_block, BlockDetections, FileBackend, FileBackendConfig, OracleBackendConfig, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::error::{ensure, Error, Result};
use crate::estimator::{extract_features, BlockFeatureVector, FeatureRow, RidgeOptions};
use crate::metrics::{average_precision, match_detections, precision_recall_f1, DEFAULT_IOU_THRESHOLD};
use crate::raster::{build_grid, EdgePolicy, OrthomosaicMeta, PatchGrid};

pub const DEFAULT_PATCH_SIZE: u32 = 416;
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub patch_size_px: u32,
    pub edge_policy: EdgePolicy,
    pub confidence_threshold: f64,
    pub iou_threshold: f64,
    pub ridge: RidgeOptions,
    pub augmentation: AugmentationConfig,
    pub oracle: OracleBackendConfig,
    pub seed: u64,
    pub strict_missing_files: bool,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size_px: DEFAULT_PATCH_SIZE,
            edge_policy: EdgePolicy::Partial,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            ridge: RidgeOptions::default(),
            augmentation: AugmentationConfig::default(),
            oracle: OracleBackendConfig::default(),
            seed: 0,
            strict_missing_files: false,
            manifest: None,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.patch_size_px > 0, || "patch size must be positive".into())?;
        let t = self.confidence_threshold;
        ensure((0.0..=1.0).contains(&t), || format!("confidence threshold {t} not in [0, 1]"))?;
        let iou = self.iou_threshold;
        ensure(iou > 0.0 && iou <= 1.0, || format!("IoU threshold {iou} not in (0, 1]"))?;
        let lambda = self.ridge.lambda;
        ensure(lambda.is_finite() && lambda >= 0.0, || format!("lambda must be >= 0, got {lambda}"))?;
        self.augmentation.validate()?;
        self.oracle.validate()
    }

    /// Writes the configuration as pretty JSON into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// One manifest row. Paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub block_id: String,
    pub sidecar: PathBuf,
    pub label_dir: Option<PathBuf>,
    pub detection_dir: Option<PathBuf>,
    pub ft_dir: Option<PathBuf>,
    pub gt_count: Option<u64>,
}

pub const MANIFEST_HEADER: [&str; 6] = ["block_id", "sidecar", "label_dir", "detection_dir", "ft_dir", "gt_count"];

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn resolve(base: &Path, s: &str) -> Option<PathBuf> {
    let s = s.trim();
    if s.is_empty() {
        None
    } else {
        Some(base.join(s))
    }
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(text.as_bytes(), base, &path.display().to_string())
    }

    pub fn parse(reader: impl std::io::Read, base: &Path, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "{source}: expected header {}, found {}",
                MANIFEST_HEADER.join(","),
                header.join(",")
            )));
        }
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let block_id = rec[0].trim().to_string();
            if block_id.is_empty() {
                return Err(Error::Data(format!("{source}:{line}: empty block_id")));
            }
            if !seen.insert(block_id.clone()) {
                return Err(Error::Data(format!("{source}:{line}: block {block_id} listed twice")));
            }
            let sidecar = resolve(base, &rec[1])
                .ok_or_else(|| Error::Data(format!("{source}:{line}: block {block_id} has no sidecar")))?;
            let gt_count = match rec[5].trim() {
                "" => None,
                s => Some(s.parse().map_err(|_| {
                    Error::Data(format!("{source}:{line}: block {block_id} has a bad gt_count {s:?}"))
                })?),
            };
            entries.push(ManifestEntry {
                block_id,
                sidecar,
                label_dir: resolve(base, &rec[2]),
                detection_dir: resolve(base, &rec[3]),
                ft_dir: resolve(base, &rec[4]),
                gt_count,
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("{source}: manifest lists no blocks")));
        }
        Ok(Self { entries })
    }

    /// Writes the manifest with paths relative to `base` where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Option<PathBuf>| -> String {
            p.as_ref()
                .map(|p| p.strip_prefix(base).unwrap_or(p).display().to_string())
                .unwrap_or_default()
        };
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            wtr.write_record([
                e.block_id.clone(),
                rel(&Some(e.sidecar.clone())),
                rel(&e.label_dir),
                rel(&e.detection_dir),
                rel(&e.ft_dir),
                e.gt_count.map(|g| g.to_string()).unwrap_or_default(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

/// Sidecar, grid and files of one manifest block, loaded and cross-checked.
#[derive(Debug, Clone)]
pub struct LoadedBlock {
    pub entry: ManifestEntry,
    pub meta: OrthomosaicMeta,
    pub grid: PatchGrid,
}

impl LoadedBlock {
    pub fn load(entry: &ManifestEntry, cfg: &PipelineConfig) -> Result<Self> {
        let meta = OrthomosaicMeta::read_sidecar(&entry.sidecar)?;
        if meta.id != entry.block_id {
            return Err(Error::Data(format!(
                "block {}: sidecar {} describes block {}",
                entry.block_id,
                entry.sidecar.display(),
                meta.id
            )));
        }
        let grid = build_grid(&meta, cfg.patch_size_px, cfg.edge_policy)?;
        Ok(Self {
            entry: entry.clone(),
            meta,
            grid,
        })
    }

    pub fn detections(&self, cfg: &PipelineConfig) -> Result<BlockDetections> {
        let dir = self.entry.detection_dir.as_ref().ok_or_else(|| {
            Error::Data(format!("block {}: manifest gives no detection_dir", self.entry.block_id))
        })?;
        let backend = FileBackend::new(FileBackendConfig {
            detections_dir: dir.clone(),
            confidence_threshold: cfg.confidence_threshold,
            strict: cfg.strict_missing_files,
        })?;
        detect_block(&backend, &self.grid, &self.entry.block_id)
    }

    pub fn labels(&self) -> Result<Option<AnnotationSet>> {
        self.read_set(self.entry.label_dir.as_deref())
    }

    pub fn ft_annotations(&self) -> Result<Option<AnnotationSet>> {
        self.read_set(self.entry.ft_dir.as_deref())
    }

    fn read_set(&self, dir: Option<&Path>) -> Result<Option<AnnotationSet>> {
        dir.map(|d| AnnotationSet::read_dir(d, &self.grid, &self.entry.block_id))
            .transpose()
    }

    pub fn features(&self, detections: &BlockDetections) -> Result<BlockFeatureVector> {
        let ft = self.ft_annotations()?;
        extract_features(&self.meta, &self.grid, detections, ft.as_ref())
    }
}

/// Detection quality of one block against its labels, in the mosaic frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub ap: Option<f64>,
    pub f1: f64,
}

pub fn score_detections(
    detections: &BlockDetections,
    labels: &AnnotationSet,
    iou_threshold: f64,
) -> Result<DetectionScores> {
    let dets = detections_to_mosaic(detections.iter());
    // clip ground truth to its patch, as detections are
    let gts: Vec<BoundingBox> = labels
        .patches()
        .flat_map(|(p, boxes)| {
            boxes.iter().filter_map(move |b| {
                let (cx, cy) = p.offset(b.cx, b.cy);
                BoundingBox { cx, cy, ..*b }.clip(
                    p.origin_x as f64,
                    p.origin_y as f64,
                    (p.origin_x + p.w) as f64,
                    (p.origin_y + p.h) as f64,
                )
            })
        })
        .collect();
    let m = match_detections(&dets, &gts, iou_threshold)?;
    let prf = precision_recall_f1(&m);
    let ap = if gts.is_empty() {
        None
    } else {
        Some(average_precision(&dets, &gts, iou_threshold)?)
    };
    Ok(DetectionScores {
        precision: prf.precision,
        recall: prf.recall,
        ap,
        f1: prf.f1,
    })
}

/// Everything the evaluation protocols need from one block.
#[derive(Debug, Clone)]
pub struct ProcessedBlock {
    pub row: FeatureRow,
    pub scores: Option<DetectionScores>,
}

pub fn process_block(entry: &ManifestEntry, cfg: &PipelineConfig) -> Result<ProcessedBlock> {
    let block = LoadedBlock::load(entry, cfg)?;
    let detections = block.detections(cfg)?;
    let features = block.features(&detections)?;
    let scores = block
        .labels()?
        .map(|l| score_detections(&detections, &l, cfg.iou_threshold))
        .transpose()?;
    Ok(ProcessedBlock {
        row: FeatureRow {
            features,
            gt_count: entry.gt_count.map(|g| g as f64),
        },
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_partial_json() {
        let cfg = PipelineConfig {
            seed: 42,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"patch_size_px": 320}"#).unwrap();
        assert_eq!(partial.patch_size_px, 320);
        assert_eq!(partial.ridge.lambda, 10.0);
        assert_eq!(partial.confidence_threshold, 0.25);
    }

    #[test]
    fn config_validation() {
        let bad = PipelineConfig {
            iou_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_validation());
    }

    #[test]
    fn manifest_paths_resolve_against_base() {
        let text = "block_id,sidecar,label_dir,detection_dir,ft_dir,gt_count\n\
                    T7,T7.json,,det/T7,ft/T7,8900\nT8,T8.json,labels/T8,,,\n";
        let m = Manifest::parse(text.as_bytes(), Path::new("/data"), "m.csv").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].sidecar, Path::new("/data/T7.json"));
        assert_eq!(m.entries[0].label_dir, None);
        assert_eq!(m.entries[0].gt_count, Some(8900));
        assert_eq!(m.entries[1].label_dir.as_deref(), Some(Path::new("/data/labels/T8")));
        assert_eq!(m.entries[1].gt_count, None);
    }

    #[test]
    fn manifest_errors_name_the_block() {
        let dup = "block_id,sidecar,label_dir,detection_dir,ft_dir,gt_count\nA,a.json,,,,\nA,b.json,,,,\n";
        let err = Manifest::parse(dup.as_bytes(), Path::new("."), "m.csv").unwrap_err();
        assert!(err.to_string().contains("block A listed twice"), "{err}");
        let bad = "block_id,sidecar,label_dir,detection_dir,ft_dir,gt_count\nB,b.json,,,,many\n";
        let err = Manifest::parse(bad.as_bytes(), Path::new("."), "m.csv").unwrap_err();
        assert!(err.to_string().contains("block B"), "{err}");
        assert!(Manifest::parse("a,b\n".as_bytes(), Path::new("."), "m.csv").is_err());
    }

    #[test]
    fn manifest_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            entries: vec![ManifestEntry {
                block_id: "S01".into(),
                sidecar: dir.path().join("S01/meta.json"),
                label_dir: Some(dir.path().join("S01/labels")),
                detection_dir: None,
                ft_dir: Some(dir.path().join("S01/ft")),
                gt_count: Some(1234),
            }],
        };
        let path = dir.path().join("manifest.csv");
        m.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("S01,S01/meta.json,S01/labels,,S01/ft,1234"), "{text}");
        assert_eq!(Manifest::read(&path).unwrap(), m);
    }
}
