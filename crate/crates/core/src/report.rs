//! Per-block evaluation reports.
//!
//! The CSV layout has one row per block with ground truth, detection count,
//! corrected count and their relative precisions, followed by an `overall`
//! row (ratios of sums) and an `average` row (means over blocks).

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::relative_precision;
use crate::pipeline::DetectionScores;
use crate::stats::{paired_t_test, Alternative};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub block_id: String,
    pub gt_count: u64,
    pub det_count: u64,
    pub corrected_count: u64,
    pub det_rp: f64,
    pub corrected_rp: f64,
    pub detection: Option<DetectionScores>,
}

impl BlockReport {
    pub fn new(block_id: impl Into<String>, gt_count: u64, det_count: u64, corrected_count: u64) -> Result<Self> {
        let block_id = block_id.into();
        if gt_count == 0 {
            return Err(Error::Data(format!("block {block_id}: ground truth count is zero")));
        }
        let gt = gt_count as f64;
        Ok(Self {
            det_rp: relative_precision(det_count as f64, gt)?,
            corrected_rp: relative_precision(corrected_count as f64, gt)?,
            block_id,
            gt_count,
            det_count,
            corrected_count,
            detection: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub gt_total: u64,
    pub det_total: u64,
    pub corrected_total: u64,
    pub overall_det_rp: f64,
    pub overall_corrected_rp: f64,
    pub mean_det_rp: f64,
    pub mean_corrected_rp: f64,
    /// Mean detection precision over blocks that have labels.
    pub mean_precision: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Significance {
    /// Paired t statistic of detection RP minus corrected RP.
    pub t_statistic: f64,
    pub df: f64,
    /// `P(T <= t)`: evidence that correction raises RP.
    pub p_one_sided: f64,
    pub p_two_sided: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub protocol: String,
    pub blocks: Vec<BlockReport>,
    pub aggregate: Aggregate,
    pub significance: Option<Significance>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvaluationReport {
    /// Sorts blocks by id and computes aggregates. The significance test is
    /// skipped when it is undefined (fewer than two blocks or identical RPs).
    pub fn new(protocol: impl Into<String>, mut blocks: Vec<BlockReport>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Data("report has no blocks".into()));
        }
        blocks.sort_by(|a, b| a.block_id.cmp(&b.block_id));
        let gt_total: u64 = blocks.iter().map(|b| b.gt_count).sum();
        let det_total: u64 = blocks.iter().map(|b| b.det_count).sum();
        let corrected_total: u64 = blocks.iter().map(|b| b.corrected_count).sum();
        let gt = gt_total as f64;
        let aggregate = Aggregate {
            gt_total,
            det_total,
            corrected_total,
            overall_det_rp: relative_precision(det_total as f64, gt)?,
            overall_corrected_rp: relative_precision(corrected_total as f64, gt)?,
            mean_det_rp: mean(blocks.iter().map(|b| b.det_rp)).unwrap_or(0.0),
            mean_corrected_rp: mean(blocks.iter().map(|b| b.corrected_rp)).unwrap_or(0.0),
            mean_precision: mean(blocks.iter().filter_map(|b| b.detection.map(|d| d.precision))),
        };
        let det: Vec<f64> = blocks.iter().map(|b| b.det_rp).collect();
        let corr: Vec<f64> = blocks.iter().map(|b| b.corrected_rp).collect();
        let significance = paired_t_test(&det, &corr).ok().map(|t| Significance {
            t_statistic: t.t,
            df: t.df,
            p_one_sided: t.p_value(Alternative::Less),
            p_two_sided: t.p_value(Alternative::TwoSided),
        });
        Ok(Self {
            protocol: protocol.into(),
            blocks,
            aggregate,
            significance,
        })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "block_id",
            "gt",
            "det_count",
            "det_rp",
            "corrected_count",
            "corrected_rp",
            "precision",
            "recall",
            "ap",
            "f1",
        ])?;
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let opt = |v: Option<f64>| v.map(pct).unwrap_or_default();
        for b in &self.blocks {
            let d = b.detection;
            wtr.write_record([
                b.block_id.clone(),
                b.gt_count.to_string(),
                b.det_count.to_string(),
                pct(b.det_rp),
                b.corrected_count.to_string(),
                pct(b.corrected_rp),
                opt(d.map(|d| d.precision)),
                opt(d.map(|d| d.recall)),
                opt(d.and_then(|d| d.ap)),
                opt(d.map(|d| d.f1)),
            ])?;
        }
        let a = &self.aggregate;
        wtr.write_record([
            "overall".to_string(),
            a.gt_total.to_string(),
            a.det_total.to_string(),
            pct(a.overall_det_rp),
            a.corrected_total.to_string(),
            pct(a.overall_corrected_rp),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        wtr.write_record([
            "average".to_string(),
            String::new(),
            String::new(),
            pct(a.mean_det_rp),
            String::new(),
            pct(a.mean_corrected_rp),
            opt(a.mean_precision),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        wtr.flush().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        let _ = writeln!(s, "protocol: {}", self.protocol);
        let _ = writeln!(s, "blocks: {}", self.blocks.len());
        let _ = writeln!(
            s,
            "detection count: overall RP {:.1}%, average RP {:.1}%",
            100.0 * a.overall_det_rp,
            100.0 * a.mean_det_rp
        );
        let _ = writeln!(
            s,
            "corrected count: overall RP {:.1}%, average RP {:.1}%",
            100.0 * a.overall_corrected_rp,
            100.0 * a.mean_corrected_rp
        );
        if let Some(p) = a.mean_precision {
            let _ = writeln!(s, "mean detection precision: {:.1}%", 100.0 * p);
        }
        if let Some(t) = &self.significance {
            let _ = writeln!(
                s,
                "paired t-test: t = {:.3} (df {}), p one-sided = {:.5}, two-sided = {:.5}",
                t.t_statistic, t.df, t.p_one_sided, t.p_two_sided
            );
        }
        s
    }
}
