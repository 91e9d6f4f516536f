use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use moundcount::annotations::AnnotationSet;
use moundcount::augment::augment_patch;
use moundcount::detect::{detect_block, BlockDetections, OracleBackend, OracleBackendConfig};
use moundcount::estimator::{fit_blocks, predict_count, read_feature_csv, write_feature_csv, FeatureRow, RidgeModel};
use moundcount::metrics::relative_precision;
use moundcount::pipeline::{process_block, DetectionScores, LoadedBlock, Manifest, ManifestEntry, PipelineConfig};
use moundcount::raster::{build_grid, OrthomosaicMeta, PatchGrid};
use moundcount::report::{BlockReport, EvaluationReport};
use moundcount::sim::{generate_fleet, FleetDistribution};
use moundcount::tables::{check_all, write_checks_csv, CheckOptions, GoldenTables};
use moundcount::validation::{kfold_cross_validate, loocv_regressor};

use crate::{Backend, Cli, Command, CommonArgs, OracleArgs, Protocol, EXIT_DATA, EXIT_VALIDATION};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<moundcount::Error> for CliError {
    fn from(e: moundcount::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Config file first, then explicit flags. `--seed` also reseeds the
/// augmentation and the oracle detector.
fn effective_config(c: &CommonArgs) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = c.patch_size {
        cfg.patch_size_px = v;
    }
    if let Some(v) = c.conf_threshold {
        cfg.confidence_threshold = v;
    }
    if let Some(v) = c.lambda {
        cfg.ridge.lambda = v;
    }
    if let Some(v) = c.iou {
        cfg.iou_threshold = v;
    }
    if let Some(v) = c.edge_policy {
        cfg.edge_policy = v;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.augmentation.seed = seed;
        cfg.oracle.seed = seed;
    }
    if c.manifest.is_some() {
        cfg.manifest = c.manifest.clone();
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    cfg.ridge.intercept |= c.intercept;
    cfg.ridge.standardize |= c.standardize;
    cfg.strict_missing_files |= c.strict;
    Ok(cfg)
}

fn apply_oracle_args(cfg: &mut OracleBackendConfig, a: &OracleArgs) {
    if let Some(v) = a.miss_rate {
        cfg.miss_rate = v;
    }
    if let Some(v) = a.fp_rate {
        cfg.false_positive_rate_per_patch = v;
    }
    if let Some(v) = a.jitter {
        cfg.center_jitter_px = v;
    }
}

fn require_out(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| CliError::Validation("this command needs --out".into()))
}

fn require_manifest(cfg: &PipelineConfig) -> Result<Manifest> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Validation("this command needs --manifest".into()))?;
    Ok(Manifest::read(path)?)
}

/// Validates the config and echoes it into the output directory.
fn start(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = require_out(cfg)?;
    cfg.echo(&out)?;
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli.common)?;
    match cli.command {
        Command::Simulate {
            n,
            area_min,
            area_max,
            invisible_min,
            invisible_max,
            no_small_blocks,
            oracle,
        } => {
            apply_oracle_args(&mut cfg.oracle, &oracle);
            let mut dist = FleetDistribution {
                include_small_blocks: !no_small_blocks,
                ..Default::default()
            };
            dist.area_ha = (area_min.unwrap_or(dist.area_ha.0), area_max.unwrap_or(dist.area_ha.1));
            dist.invisible_fraction = (
                invisible_min.unwrap_or(dist.invisible_fraction.0),
                invisible_max.unwrap_or(dist.invisible_fraction.1),
            );
            simulate(&cfg, n, &dist)
        }
        Command::Tile { sidecar, width, height } => tile(&cfg, sidecar, width.zip(height)),
        Command::Augment {
            labels,
            sidecar,
            boxes_per_source,
        } => {
            if let Some(b) = boxes_per_source {
                cfg.augmentation.boxes_per_source = b;
            }
            augment(&cfg, &labels, &sidecar)
        }
        Command::Detect { backend, oracle } => {
            apply_oracle_args(&mut cfg.oracle, &oracle);
            detect(&cfg, backend)
        }
        Command::Features => features(&cfg),
        Command::TrainGlobal { features } => train_global(&cfg, &features),
        Command::Count { model, features } => count(&cfg, &model, features.as_deref()),
        Command::Evaluate {
            protocol,
            k,
            features,
            fixtures,
            exact_tolerance,
            fail_on_mismatch,
        } => match protocol {
            Protocol::TableCheck => table_check(&cfg, fixtures.as_deref(), !exact_tolerance, fail_on_mismatch),
            Protocol::Loocv => loocv(&cfg, features.as_deref()),
            Protocol::Kfold => kfold(&cfg, features.as_deref(), k),
        },
    }
}

fn simulate(cfg: &PipelineConfig, n: usize, dist: &FleetDistribution) -> Result<()> {
    let out = start(cfg)?;
    let blocks = generate_fleet(n, dist, cfg.seed, cfg.patch_size_px, cfg.edge_policy)?;
    let mut entries = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let id = &b.meta.id;
        let dir = out.join(id);
        create_dir(&dir)?;
        let sidecar = dir.join("meta.json");
        b.meta.write_sidecar(&sidecar)?;
        let labels = dir.join("labels");
        b.visible.non_empty().write_dir(&labels)?;
        let ft = dir.join("ft");
        b.ft_sample.write_dir(&ft)?;
        let oracle = OracleBackend::new(OracleBackendConfig {
            seed: cfg.oracle.seed ^ b.spec.seed,
            ..cfg.oracle.clone()
        })?
        .with_block(b.visible.clone());
        let detections = dir.join("detections");
        detect_block(&oracle, &b.grid, id)?.write_dir(&detections)?;
        log::info!("{id}: {} mounds, {} visible", b.gt_count, b.visible_count());
        entries.push(ManifestEntry {
            block_id: id.clone(),
            sidecar,
            label_dir: Some(labels),
            detection_dir: Some(detections),
            ft_dir: Some(ft),
            gt_count: Some(b.gt_count),
        });
    }
    Manifest { entries }.write(&out.join("manifest.csv"))?;
    let specs: Vec<_> = blocks.iter().map(|b| &b.spec).collect();
    write_file(&out.join("fleet.json"), &(serde_json::to_string_pretty(&specs)? + "\n"))?;
    println!("simulated {} blocks into {}", blocks.len(), out.display());
    Ok(())
}

fn write_grid_csv(grid: &PatchGrid, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["index", "row", "col", "origin_x", "origin_y", "width", "height"])?;
    for p in grid.patches() {
        wtr.serialize((p.index, p.row, p.col, p.origin_x, p.origin_y, p.w, p.h))?;
    }
    wtr.flush().map_err(|e| CliError::Data(e.to_string()))
}

fn tile(cfg: &PipelineConfig, sidecar: Option<PathBuf>, size: Option<(u32, u32)>) -> Result<()> {
    cfg.validate()?;
    let meta = match (sidecar, size) {
        (Some(path), _) => OrthomosaicMeta::read_sidecar(&path)?,
        (None, Some((w, h))) => OrthomosaicMeta::new("mosaic", w, h, 1.0)?,
        (None, None) => return Err(CliError::Validation("tile needs --sidecar or --width/--height".into())),
    };
    let grid = build_grid(&meta, cfg.patch_size_px, cfg.edge_policy)?;
    match &cfg.out {
        Some(out) => {
            cfg.echo(out)?;
            let path = out.join("patches.csv");
            let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_grid_csv(&grid, file)?;
            println!("{} patches ({} cols x {} rows)", grid.len(), grid.cols(), grid.rows());
        }
        None => write_grid_csv(&grid, std::io::stdout().lock())?,
    }
    Ok(())
}

fn augment(cfg: &PipelineConfig, labels: &Path, sidecar: &Path) -> Result<()> {
    let out = start(cfg)?;
    let meta = OrthomosaicMeta::read_sidecar(sidecar)?;
    let grid = build_grid(&meta, cfg.patch_size_px, cfg.edge_policy)?;
    let set = AnnotationSet::read_dir(labels, &grid, &meta.id)?;
    let mut combined = AnnotationSet::new(meta.id.clone());
    let mut added = 0;
    for (patch, boxes) in set.patches() {
        let generated = augment_patch(boxes, &cfg.augmentation, patch)?;
        added += generated.len();
        let dst = combined.add_patch(*patch);
        dst.extend_from_slice(boxes);
        dst.extend(generated.into_iter().map(|a| a.bbox));
    }
    combined.write_dir(&out.join("labels"))?;
    println!("{} original boxes, {added} augmented", set.total_count());
    Ok(())
}

fn detect(cfg: &PipelineConfig, backend: Backend) -> Result<()> {
    let out = start(cfg)?;
    let manifest = require_manifest(cfg)?;
    let path = out.join("detection_counts.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["block_id", "det_count", "patches", "det_density"])?;
    for entry in &manifest.entries {
        let block = LoadedBlock::load(entry, cfg)?;
        let dets: BlockDetections = match backend {
            Backend::File => block.detections(cfg)?,
            Backend::Oracle => {
                let truth = block.labels()?.ok_or_else(|| {
                    CliError::Data(format!("block {}: the oracle backend needs a label_dir", entry.block_id))
                })?;
                let oracle = OracleBackend::new(cfg.oracle.clone())?.with_block(truth);
                detect_block(&oracle, &block.grid, &entry.block_id)?.filtered(cfg.confidence_threshold)
            }
        };
        dets.write_dir(&out.join("detections").join(&entry.block_id))?;
        let total = dets.count().total;
        wtr.write_record([
            entry.block_id.clone(),
            total.to_string(),
            block.grid.len().to_string(),
            (total as f64 / block.grid.len() as f64).to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| io_err(&path, e))?;
    println!("detected {} blocks", manifest.entries.len());
    Ok(())
}

/// Feature rows (and detection scores, when labels exist) for every block.
fn manifest_rows(cfg: &PipelineConfig) -> Result<(Vec<FeatureRow>, BTreeMap<String, DetectionScores>)> {
    let manifest = require_manifest(cfg)?;
    let mut rows = Vec::with_capacity(manifest.entries.len());
    let mut scores = BTreeMap::new();
    for entry in &manifest.entries {
        let p = process_block(entry, cfg)?;
        if let Some(s) = p.scores {
            scores.insert(entry.block_id.clone(), s);
        }
        rows.push(p.row);
    }
    Ok((rows, scores))
}

fn input_rows(
    cfg: &PipelineConfig,
    features: Option<&Path>,
) -> Result<(Vec<FeatureRow>, BTreeMap<String, DetectionScores>)> {
    match features {
        Some(path) => Ok((read_feature_csv(path)?, BTreeMap::new())),
        None => manifest_rows(cfg),
    }
}

fn features(cfg: &PipelineConfig) -> Result<()> {
    let out = start(cfg)?;
    let (rows, _) = manifest_rows(cfg)?;
    write_feature_csv(&out.join("features.csv"), &rows)?;
    println!("wrote features for {} blocks", rows.len());
    Ok(())
}

fn targets(rows: &[FeatureRow]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            r.gt_count
                .ok_or_else(|| CliError::Data(format!("block {} has no gt_count", r.features.block_id)))
        })
        .collect()
}

fn train_global(cfg: &PipelineConfig, features: &Path) -> Result<()> {
    let out = start(cfg)?;
    let rows = read_feature_csv(features)?;
    let y = targets(&rows)?;
    let feats: Vec<_> = rows.iter().map(|r| r.features.clone()).collect();
    let model = fit_blocks(&feats, &y, cfg.ridge)?;
    model.save(&out.join("model.json"))?;
    println!("trained on {} blocks, weights {:?}", rows.len(), model.weights);
    Ok(())
}

fn gt_u64(block_id: &str, gt: f64) -> Result<u64> {
    if gt.fract() == 0.0 && gt > 0.0 {
        Ok(gt as u64)
    } else {
        Err(CliError::Data(format!("block {block_id}: gt_count {gt} is not a positive integer")))
    }
}

fn write_report(out: &Path, report: &EvaluationReport) -> Result<()> {
    let path = out.join("report.csv");
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    report.write_csv(file)?;
    let summary = report.summary();
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn count(cfg: &PipelineConfig, model: &Path, features: Option<&Path>) -> Result<()> {
    let out = start(cfg)?;
    if !model.exists() {
        return Err(CliError::Data(format!("model file {} not found", model.display())));
    }
    let model = RidgeModel::load(model)?;
    let (rows, scores) = input_rows(cfg, features)?;
    let path = out.join("counts.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["block_id", "det_count", "raw", "final_count", "gt_count", "det_rp", "corrected_rp"])?;
    let mut reports = Vec::new();
    for r in &rows {
        let f = &r.features;
        let pred = predict_count(&model, f)?;
        let (gt, det_rp, corr_rp) = match r.gt_count {
            Some(gt) => (
                gt.to_string(),
                format!("{:.1}", 100.0 * relative_precision(f.det_count, gt)?),
                format!("{:.1}", 100.0 * relative_precision(pred.final_count as f64, gt)?),
            ),
            None => Default::default(),
        };
        wtr.write_record([
            f.block_id.clone(),
            f.det_count.to_string(),
            pred.raw.to_string(),
            pred.final_count.to_string(),
            gt,
            det_rp,
            corr_rp,
        ])?;
        println!("{}: {} detected, {} corrected", f.block_id, f.det_count, pred.final_count);
        if let Some(gt) = r.gt_count {
            let mut b = BlockReport::new(&f.block_id, gt_u64(&f.block_id, gt)?, f.det_count as u64, pred.final_count)?;
            b.detection = scores.get(&f.block_id).copied();
            reports.push(b);
        }
    }
    wtr.flush().map_err(|e| io_err(&path, e))?;
    if !reports.is_empty() && reports.len() == rows.len() {
        write_report(&out, &EvaluationReport::new("count", reports)?)?;
    }
    Ok(())
}

fn loocv(cfg: &PipelineConfig, features: Option<&Path>) -> Result<()> {
    let out = start(cfg)?;
    let (rows, scores) = input_rows(cfg, features)?;
    let preds = loocv_regressor(&rows, cfg.ridge)?;
    let reports = preds
        .iter()
        .map(|p| {
            let mut b = BlockReport::new(
                &p.block_id,
                gt_u64(&p.block_id, p.gt_count)?,
                p.det_count as u64,
                p.prediction.final_count,
            )?;
            b.detection = scores.get(&p.block_id).copied();
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    write_report(&out, &EvaluationReport::new("loocv", reports)?)
}

fn kfold(cfg: &PipelineConfig, features: Option<&Path>, k: Option<usize>) -> Result<()> {
    let out = start(cfg)?;
    let (rows, scores) = input_rows(cfg, features)?;
    targets(&rows)?;
    let k = k.unwrap_or(rows.len());
    let mut reports = Vec::new();
    let cv = kfold_cross_validate(
        &rows,
        k,
        |train| {
            let feats: Vec<_> = train.iter().map(|r| r.features.clone()).collect();
            let y: Vec<f64> = train.iter().map(|r| r.gt_count.unwrap_or(0.0)).collect();
            fit_blocks(&feats, &y, cfg.ridge)
        },
        |model, test| {
            let mut rps = Vec::with_capacity(test.len());
            for r in test {
                let f = &r.features;
                let gt = r.gt_count.unwrap_or(0.0);
                let pred = predict_count(model, f)?;
                let mut b = BlockReport::new(&f.block_id, gt as u64, f.det_count as u64, pred.final_count)?;
                b.detection = scores.get(&f.block_id).copied();
                rps.push(b.corrected_rp);
                reports.push(b);
            }
            Ok(rps.iter().sum::<f64>() / rps.len() as f64)
        },
    )?;
    let path = out.join("folds.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["fold", "test_blocks", "mean_corrected_rp"])?;
    for f in &cv.folds {
        let ids: Vec<&str> = f.fold.test.iter().map(|&i| rows[i].features.block_id.as_str()).collect();
        wtr.write_record([(f.fold.index + 1).to_string(), ids.join(" "), format!("{:.4}", f.score)])?;
    }
    wtr.write_record(["mean".to_string(), String::new(), format!("{:.4}", cv.mean)])?;
    wtr.flush().map_err(|e| io_err(&path, e))?;
    println!("{k}-fold mean corrected RP: {:.1}%", 100.0 * cv.mean);
    write_report(&out, &EvaluationReport::new(format!("kfold (k = {k})"), reports)?)
}

fn table_check(cfg: &PipelineConfig, fixtures: Option<&Path>, widen: bool, fail_on_mismatch: bool) -> Result<()> {
    let tables = match fixtures {
        Some(dir) => GoldenTables::load(dir)?,
        None => GoldenTables::embedded(),
    };
    let opts = CheckOptions {
        widen_to_printed_precision: widen,
        ..Default::default()
    };
    let checks = check_all(&tables, &opts)?;
    let failures: Vec<_> = checks.iter().filter(|c| !c.pass && !c.informational).collect();
    let mut summary = String::new();
    for table in ["detection_ablation", "correction_ablation", "field_results"] {
        let cells: Vec<_> = checks.iter().filter(|c| c.table == table && !c.informational).collect();
        let passed = cells.iter().filter(|c| c.pass).count();
        summary += &format!("{table}: {passed}/{} cells reproduce\n", cells.len());
    }
    for c in &failures {
        summary += &format!(
            "  mismatch {} {} {}: printed {}, recomputed {:.3} (tolerance {})\n",
            c.table, c.row, c.column, c.printed, c.recomputed, c.tolerance
        );
    }
    for c in checks.iter().filter(|c| c.informational) {
        summary += &format!(
            "  note {} {} {}: printed {}, {} gives {:.3}\n",
            c.table, c.row, c.column, c.printed, c.note, c.recomputed
        );
    }
    let t = tables.field_results_t_test("yolo", "ours")?;
    summary += &format!(
        "paired t-test yolo vs ours RP: t = {:.4}, df = {}, p two-sided = {:.5}, p one-sided = {:.5}\n",
        t.t,
        t.df,
        t.p_value(moundcount::stats::Alternative::TwoSided),
        t.p_value(moundcount::stats::Alternative::Less)
    );
    match &cfg.out {
        Some(out) => {
            cfg.echo(out)?;
            let path = out.join("table_check.csv");
            let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_checks_csv(&checks, file)?;
            write_file(&out.join("table_check.txt"), &summary)?;
        }
        None => write_checks_csv(&checks, std::io::stdout().lock())?,
    }
    print!("{summary}");
    if fail_on_mismatch && !failures.is_empty() {
        return Err(CliError::Data(format!("{} table cells do not reproduce", failures.len())));
    }
    Ok(())
}
