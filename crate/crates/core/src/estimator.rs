//! Block-level features and the ridge-regression count corrector.
//!
//! The corrector maps a block feature vector `x` to a count `sum_j w_j x_j`
//! (plus an optional intercept), with `W` minimizing
//! `sum_i (y_i - w . x_i)^2 + lambda * |w|^2`. The minimizer is computed in
//! closed form from the normal equations `(X'X + lambda I) w = X'y`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationSet;
use crate::detect::BlockDetections;
use crate::error::{ensure, Error, Result};
use crate::raster::{OrthomosaicMeta, PatchGrid};

/// Column order of the feature vector.
pub const FEATURE_NAMES: [&str; 4] = ["det_count", "det_density", "ft_density", "area_ha"];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockFeatureVector {
    pub block_id: String,
    /// Detections summed over all patches.
    pub det_count: f64,
    /// Detections per grid patch, over every patch of the grid.
    pub det_density: f64,
    /// Mean boxes per fine-tuning patch; `None` when no such annotations exist.
    pub ft_density: Option<f64>,
    pub area_ha: f64,
}

impl BlockFeatureVector {
    pub fn values(&self) -> Result<[f64; NUM_FEATURES]> {
        let ft = self
            .ft_density
            .ok_or_else(|| Error::IncompleteFeatures(self.block_id.clone()))?;
        let v = [self.det_count, self.det_density, ft, self.area_ha];
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "block {}: non-finite feature",
                self.block_id
            )));
        }
        Ok(v)
    }
}

pub fn extract_features(
    meta: &OrthomosaicMeta,
    grid: &PatchGrid,
    detections: &BlockDetections,
    ft_annotations: Option<&AnnotationSet>,
) -> Result<BlockFeatureVector> {
    meta.validate()?;
    if grid.is_empty() {
        return Err(Error::InvalidParameter(format!("block {}: grid has no patches", meta.id)));
    }
    let det_count = detections.count().total as f64;
    let ft_density = match ft_annotations {
        None => None,
        Some(ft) if ft.patch_count() == 0 => {
            return Err(Error::InvalidParameter(format!(
                "block {}: fine-tuning annotation set has no patches",
                meta.id
            )))
        }
        Some(ft) => Some(ft.total_count() as f64 / ft.patch_count() as f64),
    };
    Ok(BlockFeatureVector {
        block_id: meta.id.clone(),
        det_count,
        det_density: det_count / grid.len() as f64,
        ft_density,
        area_ha: meta.area_ha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeOptions {
    pub lambda: f64,
    /// Fit an unpenalized intercept.
    pub intercept: bool,
    /// Rescale features before fitting; the scaling is stored in the model.
    pub standardize: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            intercept: false,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Vec<FeatureScaling>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPrediction {
    pub block_id: String,
    pub raw: f64,
    pub final_count: u64,
}

/// Clamps at zero, then rounds half up.
pub fn final_count(raw: f64) -> u64 {
    if raw.is_nan() {
        return 0;
    }
    raw.max(0.0).round() as u64
}

fn check_design(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    ensure(!x.is_empty(), || "need at least one training row".into())?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let m = x[0].len();
    ensure(m >= 1, || "need at least one feature".into())?;
    for row in x {
        if row.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: row.len(),
            });
        }
    }
    ensure(
        x.iter().flatten().chain(y).all(|v| v.is_finite()),
        || "training data contains non-finite values".into(),
    )?;
    Ok(m)
}

/// Ridge loss `sum_i (y_i - w . x_i)^2 + lambda |w|^2` with no intercept.
pub fn ridge_loss(w: &[f64], x: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let residual: f64 = x
        .iter()
        .zip(y)
        .map(|(row, yi)| {
            let r = yi - row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            r * r
        })
        .sum();
    residual + lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`ridge_loss`]: `-2 X'(y - Xw) + 2 lambda w`.
pub fn ridge_gradient(w: &[f64], x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let mut g: Vec<f64> = w.iter().map(|v| 2.0 * lambda * v).collect();
    for (row, yi) in x.iter().zip(y) {
        let r = yi - row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        for (gj, xj) in g.iter_mut().zip(row) {
            *gj -= 2.0 * r * xj;
        }
    }
    g
}

pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], opts: RidgeOptions) -> Result<RidgeModel> {
    let m = check_design(x, y)?;
    let n = x.len();
    let lambda = opts.lambda;
    ensure(lambda.is_finite() && lambda >= 0.0, || format!("lambda must be >= 0, got {lambda}"))?;

    let nf = n as f64;
    let col_mean = |j: usize| x.iter().map(|r| r[j]).sum::<f64>() / nf;
    let centers: Vec<f64> = (0..m)
        .map(|j| if opts.intercept { col_mean(j) } else { 0.0 })
        .collect();
    let scales: Vec<f64> = (0..m)
        .map(|j| {
            if !opts.standardize {
                return 1.0;
            }
            let s = (x.iter().map(|r| (r[j] - centers[j]).powi(2)).sum::<f64>() / nf).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let y_mean = if opts.intercept { y.iter().sum::<f64>() / nf } else { 0.0 };

    let z = DMatrix::from_fn(n, m, |i, j| (x[i][j] - centers[j]) / scales[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = z.transpose() * &z;
    for j in 0..m {
        gram[(j, j)] += lambda;
    }
    let rhs = z.transpose() * yc;
    let max_diag = (0..m).map(|j| gram[(j, j)]).fold(0.0f64, f64::max);
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    let min_pivot = chol.l_dirty().diagonal().iter().map(|d| d * d).fold(f64::INFINITY, f64::min);
    if max_diag == 0.0 || min_pivot <= 1e-13 * max_diag {
        return Err(Error::Singular);
    }
    let w_scaled = chol.solve(&rhs);

    let (weights, intercept, scaling) = if opts.standardize {
        let scaling = centers
            .iter()
            .zip(&scales)
            .map(|(&mean, &std)| FeatureScaling { mean, std })
            .collect();
        (w_scaled.iter().copied().collect(), opts.intercept.then_some(y_mean), Some(scaling))
    } else {
        let w: Vec<f64> = w_scaled.iter().copied().collect();
        let b = y_mean - w.iter().zip(&centers).map(|(a, c)| a * c).sum::<f64>();
        (w, opts.intercept.then_some(b), None)
    };
    Ok(RidgeModel {
        m,
        lambda,
        weights,
        intercept,
        scaling,
    })
}

/// Fits on complete feature vectors with their targets.
pub fn fit_blocks(features: &[BlockFeatureVector], targets: &[f64], opts: RidgeOptions) -> Result<RidgeModel> {
    let x = features
        .iter()
        .map(|f| f.values().map(|v| v.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    fit_ridge(&x, targets, opts)
}

impl RidgeModel {
    pub fn predict_raw(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                actual: features.len(),
            });
        }
        let dot: f64 = match &self.scaling {
            Some(scaling) => features
                .iter()
                .zip(scaling)
                .zip(&self.weights)
                .map(|((x, s), w)| w * (x - s.mean) / s.std)
                .sum(),
            None => features.iter().zip(&self.weights).map(|(x, w)| w * x).sum(),
        };
        Ok(dot + self.intercept.unwrap_or(0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                actual: self.weights.len(),
            });
        }
        if let Some(s) = &self.scaling {
            if s.len() != self.m {
                return Err(Error::DimensionMismatch {
                    expected: self.m,
                    actual: s.len(),
                });
            }
        }
        ensure(
            self.weights.iter().chain(self.intercept.iter()).all(|w| w.is_finite()),
            || "model weights must be finite".into(),
        )?;
        ensure(self.lambda >= 0.0, || "model lambda must be >= 0".into())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

pub fn predict_count(model: &RidgeModel, f: &BlockFeatureVector) -> Result<CountPrediction> {
    let raw = model.predict_raw(&f.values()?)?;
    Ok(CountPrediction {
        block_id: f.block_id.clone(),
        raw,
        final_count: final_count(raw),
    })
}

/// A feature vector with its ground-truth count, as stored in feature CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub features: BlockFeatureVector,
    pub gt_count: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct FeatureCsvRecord {
    block_id: String,
    det_count: f64,
    det_density: f64,
    ft_density: Option<f64>,
    area_ha: f64,
    #[serde(default)]
    gt_count: Option<f64>,
}

const CSV_HEADER: [&str; 5] = ["block_id", "det_count", "det_density", "ft_density", "area_ha"];

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(file, &path.display().to_string())
}

pub fn parse_feature_csv(reader: impl std::io::Read, source: &str) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let ok = names.len() >= 5
        && names[..5] == CSV_HEADER
        && (names.len() == 5 || (names.len() == 6 && names[5] == "gt_count"));
    if !ok {
        return Err(Error::Parse {
            path: source.to_string(),
            line: 1,
            message: format!(
                "expected header {}[,gt_count], found {}",
                CSV_HEADER.join(","),
                names.join(",")
            ),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<FeatureCsvRecord>() {
        let r = rec?;
        rows.push(FeatureRow {
            features: BlockFeatureVector {
                block_id: r.block_id,
                det_count: r.det_count,
                det_density: r.det_density,
                ft_density: r.ft_density,
                area_ha: r.area_ha,
            },
            gt_count: r.gt_count,
        });
    }
    Ok(rows)
}

pub fn format_feature_csv(rows: &[FeatureRow]) -> Result<String> {
    let with_gt = rows.iter().any(|r| r.gt_count.is_some());
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    if with_gt {
        header.push("gt_count");
    }
    wtr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let f = &r.features;
        let mut rec = vec![
            f.block_id.clone(),
            f.det_count.to_string(),
            f.det_density.to_string(),
            opt(f.ft_density),
            f.area_ha.to_string(),
        ];
        if with_gt {
            rec.push(opt(r.gt_count));
        }
        wtr.write_record(&rec)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_feature_csv(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    fs::write(path, format_feature_csv(rows)?).map_err(|e| Error::io(path, e))
}
