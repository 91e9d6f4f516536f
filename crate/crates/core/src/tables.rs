//! Golden copies of the published result tables and the arithmetic that
//! re-derives their computed cells from the printed primitives.
//!
//! Cells are kept as printed. Percentages (`"38.4%"`) and bare fractions
//! (`"0.227"`) are both normalized to percentage points; the latter are
//! flagged because they break the column's convention.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{f1_from_pr, relative_precision};
use crate::stats::{paired_t_test, PairedTTest};

pub const DETECTION_ABLATION_FILE: &str = "detection_ablation.csv";
pub const CORRECTION_ABLATION_FILE: &str = "correction_ablation.csv";
pub const FIELD_RESULTS_FILE: &str = "field_results.csv";

const DETECTION_ABLATION_CSV: &str = include_str!("../fixtures/detection_ablation.csv");
const CORRECTION_ABLATION_CSV: &str = include_str!("../fixtures/correction_ablation.csv");
const FIELD_RESULTS_CSV: &str = include_str!("../fixtures/field_results.csv");

pub const METHODS: [&str; 3] = ["yolo", "frcnn", "ours"];
pub const DETECTION_METRICS: [&str; 4] = ["precision", "recall", "ap", "f1"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Printed {
    pub text: String,
    /// Percentage points.
    pub value: f64,
    /// Decimal places of `value` as printed.
    pub decimals: u32,
    /// Printed as a bare fraction instead of a percentage.
    pub raw_fraction: bool,
}

impl Printed {
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let (num, raw_fraction) = match t.strip_suffix('%') {
            Some(n) => (n.trim(), false),
            None => (t, true),
        };
        let parsed: f64 = num
            .parse()
            .map_err(|_| Error::Data(format!("cannot read printed cell {text:?}")))?;
        let digits = num.split_once('.').map_or(0, |(_, frac)| frac.len() as u32);
        let (value, decimals) = if raw_fraction {
            (parsed * 100.0, digits.saturating_sub(2))
        } else {
            (parsed, digits)
        };
        Ok(Self {
            text: t.to_string(),
            value,
            decimals,
            raw_fraction,
        })
    }

    /// Half a unit in the last printed place, in percentage points.
    pub fn rounding_half_width(&self) -> f64 {
        0.5 * 10f64.powi(-(self.decimals as i32))
    }
}

impl fmt::Display for Printed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionAblationRow {
    /// Fold number, or `"average"`.
    pub fold: String,
    pub model: u32,
    /// Precision, recall, AP and F1 as printed.
    pub cells: [Printed; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionAblationRow {
    pub block: String,
    pub gt: Option<u64>,
    pub det_count: Option<u64>,
    pub det_rp: Printed,
    pub corrected_count: Option<u64>,
    pub corrected_rp: Printed,
    pub improvement: Printed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldResultsRow {
    pub block: String,
    pub gt: Option<u64>,
    pub counts: [Option<u64>; 3],
    pub rps: [Printed; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenTables {
    pub detection_ablation: Vec<DetectionAblationRow>,
    pub correction_ablation: Vec<CorrectionAblationRow>,
    pub field_results: Vec<FieldResultsRow>,
}

fn records(text: impl Read, source: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text);
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Data(format!("{source}: expected header {header:?}, found {found:?}")));
    }
    rdr.records().map(|r| r.map_err(Error::from)).collect()
}

fn opt_count(s: &str, source: &str) -> Result<Option<u64>> {
    if s.trim().is_empty() {
        return Ok(None);
    }
    s.trim()
        .parse()
        .map(Some)
        .map_err(|_| Error::Data(format!("{source}: bad count {s:?}")))
}

pub fn parse_detection_ablation(text: impl Read, source: &str) -> Result<Vec<DetectionAblationRow>> {
    records(text, source, &["fold", "model", "precision", "recall", "ap", "f1"])?
        .iter()
        .map(|r| {
            let model = r[1]
                .parse()
                .map_err(|_| Error::Data(format!("{source}: bad model id {:?}", &r[1])))?;
            Ok(DetectionAblationRow {
                fold: r[0].to_string(),
                model,
                cells: [
                    Printed::parse(&r[2])?,
                    Printed::parse(&r[3])?,
                    Printed::parse(&r[4])?,
                    Printed::parse(&r[5])?,
                ],
            })
        })
        .collect()
}

pub fn parse_correction_ablation(text: impl Read, source: &str) -> Result<Vec<CorrectionAblationRow>> {
    let header = [
        "block",
        "gt",
        "det_count",
        "det_rp",
        "corrected_count",
        "corrected_rp",
        "improvement",
    ];
    records(text, source, &header)?
        .iter()
        .map(|r| {
            Ok(CorrectionAblationRow {
                block: r[0].to_string(),
                gt: opt_count(&r[1], source)?,
                det_count: opt_count(&r[2], source)?,
                det_rp: Printed::parse(&r[3])?,
                corrected_count: opt_count(&r[4], source)?,
                corrected_rp: Printed::parse(&r[5])?,
                improvement: Printed::parse(&r[6])?,
            })
        })
        .collect()
}

pub fn parse_field_results(text: impl Read, source: &str) -> Result<Vec<FieldResultsRow>> {
    let header = [
        "block",
        "gt",
        "yolo_count",
        "yolo_rp",
        "frcnn_count",
        "frcnn_rp",
        "ours_count",
        "ours_rp",
    ];
    records(text, source, &header)?
        .iter()
        .map(|r| {
            Ok(FieldResultsRow {
                block: r[0].to_string(),
                gt: opt_count(&r[1], source)?,
                counts: [
                    opt_count(&r[2], source)?,
                    opt_count(&r[4], source)?,
                    opt_count(&r[6], source)?,
                ],
                rps: [Printed::parse(&r[3])?, Printed::parse(&r[5])?, Printed::parse(&r[7])?],
            })
        })
        .collect()
}

impl GoldenTables {
    /// The copies compiled into the library.
    pub fn embedded() -> Self {
        Self {
            detection_ablation: parse_detection_ablation(DETECTION_ABLATION_CSV.as_bytes(), DETECTION_ABLATION_FILE)
                .expect("embedded table parses"),
            correction_ablation: parse_correction_ablation(
                CORRECTION_ABLATION_CSV.as_bytes(),
                CORRECTION_ABLATION_FILE,
            )
            .expect("embedded table parses"),
            field_results: parse_field_results(FIELD_RESULTS_CSV.as_bytes(), FIELD_RESULTS_FILE)
                .expect("embedded table parses"),
        }
    }

    /// Reads the three table files from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        Ok(Self {
            detection_ablation: parse_detection_ablation(
                read(DETECTION_ABLATION_FILE)?.as_bytes(),
                DETECTION_ABLATION_FILE,
            )?,
            correction_ablation: parse_correction_ablation(
                read(CORRECTION_ABLATION_FILE)?.as_bytes(),
                CORRECTION_ABLATION_FILE,
            )?,
            field_results: parse_field_results(read(FIELD_RESULTS_FILE)?.as_bytes(), FIELD_RESULTS_FILE)?,
        })
    }

    fn field_block_rows(&self) -> impl Iterator<Item = &FieldResultsRow> {
        self.field_results
            .iter()
            .filter(|r| r.block != "overall" && r.block != "average")
    }

    fn field_row(&self, name: &str) -> Result<&FieldResultsRow> {
        self.field_results
            .iter()
            .find(|r| r.block == name)
            .ok_or_else(|| Error::Data(format!("{FIELD_RESULTS_FILE}: no {name} row")))
    }

    /// Paired t-test of the printed per-block RP columns of two methods.
    pub fn field_results_t_test(&self, a: &str, b: &str) -> Result<PairedTTest> {
        let col = |m: &str| -> Result<Vec<f64>> {
            let j = method_index(m)?;
            Ok(self.field_block_rows().map(|r| r.rps[j].value).collect())
        };
        paired_t_test(&col(a)?, &col(b)?)
    }
}

fn method_index(m: &str) -> Result<usize> {
    METHODS
        .iter()
        .position(|x| *x == m)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown method {m:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckOptions {
    pub rp_tolerance: f64,
    pub f1_tolerance: f64,
    pub average_tolerance: f64,
    /// Never demand more agreement than the printed precision allows.
    pub widen_to_printed_precision: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            rp_tolerance: 0.1,
            f1_tolerance: 0.2,
            average_tolerance: 0.1,
            widen_to_printed_precision: false,
        }
    }
}

impl CheckOptions {
    fn tolerance(&self, base: f64, printed: &Printed) -> f64 {
        if self.widen_to_printed_precision {
            base.max(printed.rounding_half_width())
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellCheck {
    pub table: &'static str,
    pub row: String,
    pub column: String,
    pub printed: String,
    pub recomputed: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Shown alongside the verdict but not part of it.
    pub informational: bool,
    pub note: String,
}

impl CellCheck {
    fn new(
        table: &'static str,
        row: &str,
        column: impl Into<String>,
        printed: &Printed,
        recomputed: f64,
        tolerance: f64,
    ) -> Self {
        let deviation = recomputed - printed.value;
        Self {
            table,
            row: row.to_string(),
            column: column.into(),
            printed: printed.text.clone(),
            recomputed,
            deviation,
            tolerance,
            pass: deviation.abs() <= tolerance + 1e-9,
            informational: false,
            note: if printed.raw_fraction {
                "printed as a fraction".into()
            } else {
                String::new()
            },
        }
    }

    fn exact(table: &'static str, row: &str, column: &str, printed: u64, recomputed: u64) -> Self {
        Self {
            table,
            row: row.to_string(),
            column: column.to_string(),
            printed: printed.to_string(),
            recomputed: recomputed as f64,
            deviation: recomputed as f64 - printed as f64,
            tolerance: 0.0,
            pass: printed == recomputed,
            informational: false,
            note: String::new(),
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rp_pp(count: Option<u64>, gt: Option<u64>, what: &str) -> Result<f64> {
    match (count, gt) {
        (Some(c), Some(g)) => Ok(100.0 * relative_precision(c as f64, g as f64)?),
        _ => Err(Error::Data(format!("{what}: missing count or ground truth"))),
    }
}

/// Per-block RP for every method, the overall row (sums and RP) and the
/// per-method averages of the recomputed block RPs.
pub fn check_field_results(t: &GoldenTables, opts: &CheckOptions) -> Result<Vec<CellCheck>> {
    const TABLE: &str = "field_results";
    let mut out = Vec::new();
    let mut per_method: [Vec<f64>; 3] = Default::default();
    let mut gt_sum = 0;
    let mut count_sums = [0u64; 3];
    for r in t.field_block_rows() {
        gt_sum += r.gt.unwrap_or(0);
        for (j, m) in METHODS.iter().enumerate() {
            count_sums[j] += r.counts[j].unwrap_or(0);
            let rp = rp_pp(r.counts[j], r.gt, &format!("{TABLE} {} {m}", r.block))?;
            per_method[j].push(rp);
            let tol = opts.tolerance(opts.rp_tolerance, &r.rps[j]);
            out.push(CellCheck::new(TABLE, &r.block, format!("{m}_rp"), &r.rps[j], rp, tol));
        }
    }
    let overall = t.field_row("overall")?;
    let printed_gt = overall.gt.ok_or_else(|| Error::Data("overall row has no gt".into()))?;
    out.push(CellCheck::exact(TABLE, "overall", "gt", printed_gt, gt_sum));
    for (j, m) in METHODS.iter().enumerate() {
        let printed = overall.counts[j].ok_or_else(|| Error::Data(format!("overall row has no {m} count")))?;
        out.push(CellCheck::exact(TABLE, "overall", &format!("{m}_count"), printed, count_sums[j]));
        let rp = rp_pp(overall.counts[j], overall.gt, "overall")?;
        let tol = opts.tolerance(opts.rp_tolerance, &overall.rps[j]);
        let mut c = CellCheck::new(TABLE, "overall", format!("{m}_rp"), &overall.rps[j], rp, tol);
        c.note = "from the printed overall count and ground truth".into();
        out.push(c);
    }
    let average = t.field_row("average")?;
    for (j, m) in METHODS.iter().enumerate() {
        let tol = opts.tolerance(opts.average_tolerance, &average.rps[j]);
        out.push(CellCheck::new(TABLE, "average", format!("{m}_rp"), &average.rps[j], mean(&per_method[j]), tol));
    }
    Ok(out)
}

/// F1 of every fold from its printed precision and recall, and the column
/// averages of every metric.
pub fn check_detection_ablation(t: &GoldenTables, opts: &CheckOptions) -> Result<Vec<CellCheck>> {
    const TABLE: &str = "detection_ablation";
    let mut out = Vec::new();
    let folds: Vec<&DetectionAblationRow> = t.detection_ablation.iter().filter(|r| r.fold != "average").collect();
    for r in &folds {
        let [p, rc, _, f1] = &r.cells;
        let recomputed = 100.0 * f1_from_pr(p.value / 100.0, rc.value / 100.0);
        let tol = opts.tolerance(opts.f1_tolerance, f1);
        out.push(CellCheck::new(
            TABLE,
            &format!("fold {}", r.fold),
            format!("f1_model{}", r.model),
            f1,
            recomputed,
            tol,
        ));
    }
    for avg in t.detection_ablation.iter().filter(|r| r.fold == "average") {
        for (k, metric) in DETECTION_METRICS.iter().enumerate() {
            let column: Vec<f64> = folds
                .iter()
                .filter(|r| r.model == avg.model)
                .map(|r| r.cells[k].value)
                .collect();
            if column.is_empty() {
                return Err(Error::Data(format!("{TABLE}: no folds for model {}", avg.model)));
            }
            let tol = opts.tolerance(opts.average_tolerance, &avg.cells[k]);
            out.push(CellCheck::new(
                TABLE,
                "average",
                format!("{metric}_model{}", avg.model),
                &avg.cells[k],
                mean(&column),
                tol,
            ));
        }
    }
    Ok(out)
}

/// Detection and corrected RP per block, their difference, and the three
/// averages, all from the printed counts. The mean of the printed
/// improvement column is added as an informational line.
pub fn check_correction_ablation(t: &GoldenTables, opts: &CheckOptions) -> Result<Vec<CellCheck>> {
    const TABLE: &str = "correction_ablation";
    let mut out = Vec::new();
    let mut det = Vec::new();
    let mut corr = Vec::new();
    let mut printed_improvements = Vec::new();
    let blocks = t.correction_ablation.iter().filter(|r| r.block != "average");
    for r in blocks {
        let d = rp_pp(r.det_count, r.gt, &format!("{TABLE} {}", r.block))?;
        let c = rp_pp(r.corrected_count, r.gt, &format!("{TABLE} {}", r.block))?;
        out.push(CellCheck::new(TABLE, &r.block, "det_rp", &r.det_rp, d, opts.tolerance(opts.rp_tolerance, &r.det_rp)));
        out.push(CellCheck::new(
            TABLE,
            &r.block,
            "corrected_rp",
            &r.corrected_rp,
            c,
            opts.tolerance(opts.rp_tolerance, &r.corrected_rp),
        ));
        out.push(CellCheck::new(
            TABLE,
            &r.block,
            "improvement",
            &r.improvement,
            c - d,
            opts.tolerance(opts.rp_tolerance, &r.improvement),
        ));
        det.push(d);
        corr.push(c);
        printed_improvements.push(r.improvement.value);
    }
    let avg = t
        .correction_ablation
        .iter()
        .find(|r| r.block == "average")
        .ok_or_else(|| Error::Data(format!("{TABLE}: no average row")))?;
    let improvements: Vec<f64> = corr.iter().zip(&det).map(|(c, d)| c - d).collect();
    let tol = |p: &Printed| opts.tolerance(opts.average_tolerance, p);
    out.push(CellCheck::new(TABLE, "average", "det_rp", &avg.det_rp, mean(&det), tol(&avg.det_rp)));
    out.push(CellCheck::new(
        TABLE,
        "average",
        "corrected_rp",
        &avg.corrected_rp,
        mean(&corr),
        tol(&avg.corrected_rp),
    ));
    out.push(CellCheck::new(
        TABLE,
        "average",
        "improvement",
        &avg.improvement,
        mean(&improvements),
        tol(&avg.improvement),
    ));
    let mut info = CellCheck::new(
        TABLE,
        "average",
        "improvement",
        &avg.improvement,
        mean(&printed_improvements),
        tol(&avg.improvement),
    );
    info.informational = true;
    info.note = "mean of the printed improvement column".into();
    out.push(info);
    Ok(out)
}

pub fn check_all(t: &GoldenTables, opts: &CheckOptions) -> Result<Vec<CellCheck>> {
    let mut out = check_detection_ablation(t, opts)?;
    out.extend(check_correction_ablation(t, opts)?);
    out.extend(check_field_results(t, opts)?);
    Ok(out)
}

pub fn write_checks_csv(checks: &[CellCheck], w: impl std::io::Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "table",
        "row",
        "column",
        "printed",
        "recomputed",
        "deviation",
        "tolerance",
        "status",
        "note",
    ])?;
    for c in checks {
        let status = match (c.informational, c.pass) {
            (true, _) => "info",
            (false, true) => "pass",
            (false, false) => "FAIL",
        };
        wtr.write_record([
            c.table,
            &c.row,
            &c.column,
            &c.printed,
            &format!("{:.4}", c.recomputed),
            &format!("{:+.4}", c.deviation),
            &format!("{}", c.tolerance),
            status,
            &c.note,
        ])?;
    }
    wtr.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}
