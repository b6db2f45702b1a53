//! Three-step co-design pipeline: electronic baseline, optical layer in
//! place of stage 1, then stage-2 removal. Each step is trained (when
//! `epochs > 0`), evaluated and profiled; results go to `report.jsonl`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{load_cifar10, Cifar10Set};
use super::macs::MacReport;
use super::model::{build_model, count_macs, Model, ModelSpec, Variant};
use super::train::{evaluate, train_with, EpochMetrics};
use crate::error::{Error, Result};
use crate::optical_layer::compile;
use crate::optics::write_psf;

pub const REPORT_FILE: &str = "report.jsonl";

/// One line of `report.jsonl`. `macs` is in millions of electronic MACs;
/// `reduction` is the percentage saved relative to the baseline step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub step: String,
    pub arch: String,
    pub variant: String,
    pub epoch: Option<usize>,
    pub loss: Option<f64>,
    pub top1: Option<f64>,
    pub macs: f64,
    pub reduction: f64,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub name: String,
    pub spec: ModelSpec,
    pub macs: MacReport,
    pub reduction: f64,
    pub history: Vec<EpochMetrics>,
    pub top1: Option<f64>,
    pub psf_image: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub steps: Vec<StepResult>,
    pub report_path: PathBuf,
}

pub fn pipeline_steps(config: &ExperimentConfig) -> Vec<(String, ModelSpec)> {
    let mut replace = config.model_spec(Variant::Codesign);
    replace.stages_removed.clear();
    vec![
        ("baseline".into(), config.model_spec(Variant::Electronic)),
        ("replace_stage1".into(), replace),
        ("remove_stage2".into(), config.model_spec(Variant::Codesign)),
    ]
}

/// Loads the dataset named by the config, applying `subset`/`test_subset`.
pub fn load_data(config: &ExperimentConfig) -> Result<(Cifar10Set, Cifar10Set)> {
    let dir = config
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("training needs a dataset directory (data_dir)".into()))?;
    let (train, test) = load_cifar10(dir)?;
    let train = match config.train.subset_size {
        Some(n) => train.subset(n)?,
        None => train,
    };
    let test = match config.test_subset {
        Some(n) => test.subset(n)?,
        None => test,
    };
    Ok((train, test))
}

/// Writes the PSF of a co-design model's optical layer as `path` plus sidecar.
pub fn export_model_psf(model: &Model, path: &Path) -> Result<()> {
    let layer = model
        .optical_layer()
        .ok_or_else(|| Error::Config("model has no optical layer".into()))?;
    let compiled = compile(&layer.params(&model.store), &layer.spec, 32, 32)?;
    write_psf(&compiled.psf, path)?;
    compiled.save(path.with_extension("optics.tnsr"))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let data = if config.train.epochs > 0 { Some(load_data(config)?) } else { None };
    run_experiment_on(config, data.as_ref().map(|(a, b)| (a, b)))
}

/// As [`run_experiment`] with preloaded `(train, test)` data.
pub fn run_experiment_on(config: &ExperimentConfig, data: Option<(&Cifar10Set, &Cifar10Set)>) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let report_path = config.out_dir.join(REPORT_FILE);
    let mut out = std::io::BufWriter::new(std::fs::File::create(&report_path)?);
    let mut steps: Vec<StepResult> = Vec::new();
    let mut train_cfg = config.train.clone();
    train_cfg.subset_size = None;
    for (name, spec) in pipeline_steps(config) {
        let mut model = build_model(&spec, config.train.seed)?;
        let macs = count_macs(&model, [1, 3, 32, 32])?;
        let reduction = match steps.first() {
            Some(base) => 100.0 * macs.reduction_vs(&base.macs),
            None => 0.0,
        };
        log::info!("{name}: {:.1} MFLOPs, reduction {reduction:.1}%", macs.mflops());
        let line = |epoch, loss, top1| ReportLine {
            step: name.clone(),
            arch: spec.architecture.to_string(),
            variant: spec.variant.to_string(),
            epoch,
            loss,
            top1,
            macs: macs.mflops(),
            reduction,
        };
        let mut history = Vec::new();
        let mut top1 = None;
        match data {
            Some((train, test)) if train_cfg.epochs > 0 => {
                let ckpt = config.out_dir.join(&name);
                let mut lines = Vec::new();
                history = train_with(&mut model, train, Some(test), &train_cfg, Some(&ckpt), |m, _| {
                    lines.push(line(Some(m.epoch), Some(m.loss), m.top1));
                    Ok(())
                })?;
                for l in lines {
                    writeln!(out, "{}", serde_json::to_string(&l).expect("serializable"))?;
                }
                top1 = history.last().and_then(|m| m.top1);
            }
            Some((_, test)) => {
                top1 = Some(evaluate(&mut model, test, &train_cfg)?);
                writeln!(out, "{}", serde_json::to_string(&line(None, None, top1)).expect("serializable"))?;
            }
            None => writeln!(out, "{}", serde_json::to_string(&line(None, None, None)).expect("serializable"))?,
        }
        out.flush()?;
        let psf_image = if spec.variant == Variant::Codesign {
            let p = config.out_dir.join(format!("{name}_psf.pgm"));
            export_model_psf(&model, &p)?;
            Some(p)
        } else {
            None
        };
        steps.push(StepResult {
            name,
            spec,
            macs,
            reduction,
            history,
            top1,
            psf_image,
        });
    }
    Ok(ExperimentReport { steps, report_path })
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportLine>> {
    let text = std::fs::read_to_string(path)?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line).map_err(|e| Error::Format {
                offset,
                message: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Final line of every step as a table.
pub fn summarize(lines: &[ReportLine]) -> String {
    let mut s = format!("{:<16} {:<9} {:<11} {:>8} {:>10} {:>8}\n", "step", "arch", "variant", "top1", "MFLOPs", "saved");
    let mut seen: Vec<&str> = Vec::new();
    for l in lines {
        if !seen.contains(&l.step.as_str()) {
            seen.push(&l.step);
        }
    }
    for step in seen {
        let l = lines.iter().rev().find(|l| l.step == step).expect("present");
        s += &format!(
            "{:<16} {:<9} {:<11} {:>8} {:>10.1} {:>7.1}%\n",
            l.step,
            l.arch,
            l.variant,
            l.top1.map_or("-".into(), |t| format!("{t:.2}")),
            l.macs,
            l.reduction
        );
    }
    s
}
