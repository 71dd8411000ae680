use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use jers_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use jers_core::dataset::{
    generate_dataset, load_dataset, save_dataset, Dataset, DatasetManifest, Subject,
};
use jers_core::evaluate::{evaluate_case, CaseScores};
use jers_core::metrics::MetricsReport;
use jers_core::pipeline::{ablate, Atlas, Inference, JersModel, Stages, Variant};
use jers_core::train::{StepRecord, Trainer, ValRecord};
use jers_core::CoreError;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SweepAxis};
use crate::error::{CliError, Result};
use crate::images::{mid_slice, overlay, write_pgm, write_ppm, Plane};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";

/// Creates `out`, refusing a non-empty directory unless `force` is set.
/// Existing files are overwritten, never deleted.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| CliError::io(out, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Config(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(
        path,
        &serde_json::to_string_pretty(value).expect("serializable"),
    )
}

fn core_io(path: &Path) -> impl Fn(std::io::Error) -> CoreError + '_ {
    move |e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// The configured dataset directory, or a fresh in-memory one.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.data {
        Some(dir) => load_dataset(dir)?,
        None => generate_dataset(&cfg.phantom, cfg.master_seed, cfg.splits)?,
    };
    if ds.atlas_image.dims() != cfg.phantom.resolution {
        return Err(CliError::Config(format!(
            "dataset resolution {:?} differs from the configured {:?}",
            ds.atlas_image.dims(),
            cfg.phantom.resolution
        )));
    }
    if ds.atlas_labels.classes() != cfg.arch.classes {
        return Err(CliError::Config(format!(
            "dataset has {} classes, arch expects {}",
            ds.atlas_labels.classes(),
            cfg.arch.classes
        )));
    }
    Ok(ds)
}

pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<JersModel<f32>> {
    let atlas = Atlas::new(&ds.atlas_image, &ds.atlas_labels)?;
    let model = JersModel::new(cfg.arch.clone(), cfg.stages, atlas, cfg.training.seed)?;
    Ok(ablate(&model, cfg.variant)?)
}

pub fn cmd_phantom(cfg: &RunConfig, out: &Path, force: bool) -> Result<DatasetManifest> {
    cfg.phantom.validate()?;
    prepare_out(out, force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let ds = generate_dataset(&cfg.phantom, cfg.master_seed, cfg.splits)?;
    Ok(save_dataset(out, &ds)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Val(ValRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub stages: Stages,
    pub steps: usize,
    pub resumed_from: Option<usize>,
    pub best: Option<ValRecord>,
    pub last_checkpoint: String,
    pub best_checkpoint: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights with the best validation score (or the final ones).
    pub model: JersModel<f32>,
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

fn checkpoint_of(
    cfg: &RunConfig,
    model: &JersModel<f32>,
    step: usize,
    trainer: Option<&Trainer>,
    val: Option<&ValRecord>,
) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        seed: cfg.training.seed,
        step,
        optimizer: trainer.map(|t| t.opt.clone()),
        extra: serde_json::json!({ "training": cfg.training, "val": val }),
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, force: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_out(out, force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let ds = load_or_generate(cfg)?;
    train_in(cfg, &ds, out)
}

/// Trains into an already prepared directory.
pub fn train_in(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(build_model(cfg, ds)?, cfg.training.clone())?;
    let mut resumed_from = None;
    if let Some(path) = &cfg.checkpoint {
        let ck = load_checkpoint(path)?;
        check_compatible(&ck.model, ds)?;
        if ck.model.variant != cfg.variant {
            return Err(CliError::Config(format!(
                "checkpoint variant {} differs from the configured {}",
                ck.model.variant, cfg.variant
            )));
        }
        trainer.model = ck.model;
        if let Some(opt) = ck.optimizer {
            trainer.opt = opt;
        }
        trainer.step = ck.step;
        resumed_from = Some(ck.step);
    }

    let log_path = out.join(TRAIN_LOG);
    let timing_path = out.join(TIMING_LOG);
    let log = RefCell::new(BufWriter::new(
        File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?,
    ));
    let mut timing =
        BufWriter::new(File::create(&timing_path).map_err(|e| CliError::io(&timing_path, e))?);
    let train_images = ds.images(jers_core::dataset::Split::Train);
    let val = ds.phantoms(jers_core::dataset::Split::Val);
    let start = Instant::now();
    let last_path = out.join(LAST_CKPT);
    let best_path = out.join(BEST_CKPT);

    let result = trainer.run(
        &train_images,
        &val,
        |r| {
            let line =
                serde_json::to_string(&LogRecord::Step(r.clone())).expect("record serializes");
            writeln!(log.borrow_mut(), "{line}").map_err(core_io(&log_path))?;
            let t = serde_json::json!({ "step": r.step, "seconds": start.elapsed().as_secs_f64() });
            writeln!(timing, "{t}").map_err(core_io(&timing_path))
        },
        |tr, v, improved| {
            let line =
                serde_json::to_string(&LogRecord::Val(v.clone())).expect("record serializes");
            let mut log = log.borrow_mut();
            writeln!(log, "{line}").map_err(core_io(&log_path))?;
            log.flush().map_err(core_io(&log_path))?;
            save_checkpoint(
                &last_path,
                &checkpoint_of(cfg, &tr.model, tr.step, Some(tr), Some(v)),
            )?;
            if improved {
                save_checkpoint(
                    &best_path,
                    &checkpoint_of(cfg, &tr.model, tr.step, None, Some(v)),
                )?;
            }
            Ok(())
        },
    );
    log.into_inner()
        .flush()
        .map_err(|e| CliError::io(&log_path, e))?;
    timing.flush().map_err(|e| CliError::io(&timing_path, e))?;
    result?;

    let last_val = trainer.best.as_ref().map(|(b, _)| b.clone());
    save_checkpoint(
        &last_path,
        &checkpoint_of(cfg, &trainer.model, trainer.step, Some(&trainer), None),
    )?;
    if trainer.best.is_none() {
        save_checkpoint(
            &best_path,
            &checkpoint_of(cfg, &trainer.model, trainer.step, None, None),
        )?;
    }
    let manifest = RunManifest {
        variant: trainer.model.variant,
        stages: trainer.model.stages,
        steps: trainer.step,
        resumed_from,
        best: last_val,
        last_checkpoint: LAST_CKPT.into(),
        best_checkpoint: BEST_CKPT.into(),
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(TrainOutcome {
        model: trainer.best_model(),
        manifest,
        dir: out.to_path_buf(),
    })
}

fn check_compatible(model: &JersModel<f32>, ds: &Dataset) -> Result<()> {
    if model.atlas.dims() != ds.atlas_image.dims() {
        return Err(CliError::Config(format!(
            "checkpoint resolution {:?} differs from the dataset {:?}",
            model.atlas.dims(),
            ds.atlas_image.dims()
        )));
    }
    if model.atlas.classes() != ds.atlas_labels.classes() {
        return Err(CliError::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            model.atlas.classes(),
            ds.atlas_labels.classes()
        )));
    }
    Ok(())
}

/// Per-case scores of one evaluated split.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub scores: Vec<CaseScores>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cases: usize,
    pub dice_ext: f64,
    pub mi_reg: f64,
    pub mi_unregistered: f64,
    pub dice_seg: f64,
    pub dice_seg_warped: f64,
}

impl EvalOutcome {
    pub fn summary(&self) -> EvalSummary {
        let n = self.scores.len().max(1) as f64;
        let avg = |f: fn(&CaseScores) -> f64| self.scores.iter().map(f).sum::<f64>() / n;
        EvalSummary {
            cases: self.scores.len(),
            dice_ext: avg(|s| s.dice_ext),
            mi_reg: avg(|s| s.mi_reg),
            mi_unregistered: avg(|s| s.mi_unregistered),
            dice_seg: avg(|s| s.dice_seg_mean()),
            dice_seg_warped: avg(|s| s.dice_seg_warped),
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, force: bool) -> Result<EvalOutcome> {
    cfg.validate()?;
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("eval needs a checkpoint (--checkpoint)".into()))?;
    let model = load_checkpoint(path)?.model;
    let ds = load_or_generate(cfg)?;
    check_compatible(&model, &ds)?;
    prepare_out(out, force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    eval_in(cfg, &ds, &model, out)
}

/// Evaluates `model` on the configured split into an already prepared directory.
pub fn eval_in(
    cfg: &RunConfig,
    ds: &Dataset,
    model: &JersModel<f32>,
    out: &Path,
) -> Result<EvalOutcome> {
    let mut report = MetricsReport::new(model.atlas.class_names.clone());
    let mut scores = Vec::new();
    let image_dir = out.join("images");
    if cfg.images {
        fs::create_dir_all(&image_dir).map_err(|e| CliError::io(&image_dir, e))?;
    }
    for subject in ds.split(cfg.split) {
        let (s, inf) = evaluate_case(model, &subject.phantom, &subject.id)?;
        report.rows.push(s.to_row(&subject.id));
        if cfg.images {
            write_case_images(&image_dir, subject, &inf)?;
        }
        scores.push(s);
    }
    let csv_path = out.join(METRICS_CSV);
    let file = File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    report.write_csv(file)?;
    let outcome = EvalOutcome { report, scores };
    write_json(&out.join(SUMMARY), &outcome.summary())?;
    Ok(outcome)
}

fn write_case_images(dir: &Path, subject: &Subject, inf: &Inference) -> Result<()> {
    let image = &subject.phantom.image;
    let dims = image.dims();
    let mask: Vec<usize> = inf.mask.iter().map(|&v| usize::from(v > 0.5)).collect();
    let seg = inf.segmentation.argmax();
    for plane in Plane::ALL {
        let stem = format!("{}_{}", subject.id, plane.name());
        let gray = mid_slice(image.values(), dims, plane);
        write_pgm(&dir.join(format!("{stem}_input.pgm")), &gray)?;
        write_pgm(
            &dir.join(format!("{stem}_warped.pgm")),
            &mid_slice(inf.warped.values(), dims, plane),
        )?;
        write_ppm(
            &dir.join(format!("{stem}_mask.ppm")),
            &overlay(&gray, &mid_slice(&mask, dims, plane)),
        )?;
        write_ppm(
            &dir.join(format!("{stem}_seg.ppm")),
            &overlay(&gray, &mid_slice(&seg, dims, plane)),
        )?;
    }
    Ok(())
}

/// One cell of a sweep or ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub axis: String,
    pub value: String,
    pub summary: EvalSummary,
}

fn run_cell(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<EvalSummary> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    let trained = train_in(cfg, ds, dir)?;
    Ok(eval_in(cfg, ds, &trained.model, dir)?.summary())
}

fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut text = String::from("axis,value,dice_ext,mi_reg,dice_seg\n");
    for r in rows {
        let s = &r.summary;
        text.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.axis, r.value, s.dice_ext, s.mi_reg, s.dice_seg
        ));
    }
    write_text(path, &text)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    prepare_out(out, force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let ds = load_or_generate(cfg)?;
    let mut rows = Vec::new();
    match cfg.sweep.axis {
        SweepAxis::Stages => {
            for &s in &cfg.sweep.stages {
                let mut cell = cfg.clone();
                cell.stages = Stages {
                    extraction: s,
                    registration: s,
                };
                let summary = run_cell(&cell, &ds, &out.join(format!("stages_{s}")))?;
                rows.push(GridRow {
                    axis: "stages".into(),
                    value: s.to_string(),
                    summary,
                });
            }
        }
        SweepAxis::Lambda => {
            for &l in &cfg.sweep.lambdas {
                let mut cell = cfg.clone();
                cell.training.weights.lambda = l;
                let summary = run_cell(&cell, &ds, &out.join(format!("lambda_{l:e}")))?;
                rows.push(GridRow {
                    axis: "lambda".into(),
                    value: format!("{l:e}"),
                    summary,
                });
            }
        }
    }
    write_grid_csv(&out.join("sweep.csv"), &rows)?;
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    if cfg.ablate.is_empty() {
        return Err(CliError::Config("ablate needs at least one variant".into()));
    }
    prepare_out(out, force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let ds = load_or_generate(cfg)?;
    let mut rows = Vec::new();
    for &v in &cfg.ablate {
        let mut cell = cfg.clone();
        cell.variant = v;
        let summary = run_cell(&cell, &ds, &out.join(v.name()))?;
        rows.push(GridRow {
            axis: "variant".into(),
            value: v.name().into(),
            summary,
        });
    }
    write_grid_csv(&out.join("ablation.csv"), &rows)?;
    Ok(rows)
}
