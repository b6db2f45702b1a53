use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use optikonv::harness::experiment::{export_model_psf, load_data, read_report, summarize, ReportLine};
use optikonv::harness::train::train_with;
use optikonv::harness::{build_model, count_macs, evaluate, run_experiment, ExperimentConfig, Variant};
use optikonv::optical_layer::{compile, OpticalLayerParams};
use optikonv::optics::pgm::Gray16;
use optikonv::optics::retrieval::psf_loss;
use optikonv::optics::{
    add_sensor_noise, apply_fab_model, export_dose_map, gerchberg_saxton, optical_convolve, psf_from_phase, read_psf,
    retrieve_phase_sgd_with, write_psf, FabModel, OpticsConfig, PhaseMask, SgdOptions,
};
use optikonv::tensor::{checkpoint, Tensor};
use optikonv::Error;
use rand::SeedableRng;

pub const DATA_ENV: &str = "OPTIKONV_DATA";

#[derive(Parser, Debug)]
#[command(name = "optikonv", version, about = "Opto-electronic convolution co-design experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key = value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Train on the first N training images
    #[arg(long, global = true)]
    pub subset: Option<usize>,
    /// Number of training epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// vgg13 | resnet18
    #[arg(long, global = true)]
    pub arch: Option<String>,
    /// electronic | codesign
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Output directory
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (1 gives bit-reproducible runs)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write checkpoints and report.jsonl
    Train,
    /// Evaluate a checkpoint on the test set
    Eval {
        /// Model checkpoint (TNSR1)
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print electronic MACs and the per-layer table
    Macs,
    /// Compile a co-design checkpoint's optical layer into psf.pgm
    CompilePsf {
        /// Model checkpoint (TNSR1)
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image side length the layout is planned for
        #[arg(long, default_value_t = 32)]
        input_size: usize,
    },
    /// Find a phase mask whose PSF matches a target image
    RetrievePhase {
        /// Target PSF image (PGM)
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// sgd | gs
        #[arg(long, default_value = "sgd")]
        method: String,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[command(flatten)]
        optics: OpticsArgs,
        /// Quantize to this many phase levels inside the loop (0 = continuous)
        #[arg(long, default_value_t = 0)]
        levels: u32,
    },
    /// Convolve an image with a PSF as the optical system would
    Simulate {
        /// Input image (PGM)
        #[arg(long)]
        input: PathBuf,
        /// PSF image (PGM)
        #[arg(long, conflicts_with = "mask")]
        psf: Option<PathBuf>,
        /// Phase mask checkpoint; its PSF is used
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Gaussian read noise sigma
        #[arg(long, default_value_t = 0.0)]
        noise: f32,
    },
    /// Write the lithography dose map of a phase mask
    ExportDose {
        /// Phase mask checkpoint
        #[arg(long)]
        mask: PathBuf,
        /// Quantization levels (0 keeps the mask's own)
        #[arg(long, default_value_t = 0)]
        levels: u32,
        #[arg(long, default_value_t = 0.0)]
        blur: f64,
    },
    /// Run the three-step co-design pipeline, or summarize an existing report
    Report {
        /// Existing report.jsonl to summarize instead of running
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct OpticsArgs {
    /// meters
    #[arg(long, default_value_t = 532e-9)]
    pub wavelength: f64,
    /// meters
    #[arg(long, default_value_t = 12e-3)]
    pub distance: f64,
    /// meters
    #[arg(long, default_value_t = 8e-6)]
    pub pitch: f64,
    /// aperture radius in pixels (default: half the mask)
    #[arg(long)]
    pub aperture: Option<f64>,
}

impl OpticsArgs {
    fn config(&self, n: usize) -> OpticsConfig {
        OpticsConfig {
            wavelength: self.wavelength,
            distance: self.distance,
            mask_pixels: n,
            pitch: self.pitch,
            aperture: self.aperture.unwrap_or(n as f64 / 2.0),
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Geometry(_)
        | Error::Sampling { .. }
        | Error::Format { .. }
        | Error::Io(_)
        | Error::Unsupported(_)
        | Error::StaleLayout { .. } => 1,
        _ => 2,
    }
}

/// Config file, then `OPTIKONV_DATA`, then flags.
pub fn resolve(common: &Common) -> optikonv::Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if c.data_dir.is_none() {
        c.data_dir = std::env::var_os(DATA_ENV).map(PathBuf::from);
    }
    if let Some(v) = &common.arch {
        c.set("arch", v)?;
    }
    if let Some(v) = &common.variant {
        c.set("variant", v)?;
    }
    if let Some(v) = common.seed {
        c.train.seed = v;
    }
    if let Some(v) = common.subset {
        c.train.subset_size = Some(v);
    }
    if let Some(v) = common.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = &common.out_dir {
        c.out_dir = v.clone();
    }
    if let Some(v) = common.threads {
        c.threads = Some(v);
    }
    c.validate()?;
    Ok(c)
}

pub fn dispatch(cli: Cli) -> optikonv::Result<()> {
    let config = resolve(&cli.common)?;
    log::info!("resolved config:\n{}", config.resolved().trim_end());
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train => train(&config),
        Command::Eval { ckpt } => eval(&config, &ckpt),
        Command::Macs => macs(&config),
        Command::CompilePsf { ckpt, input_size } => compile_psf(&config, &ckpt, input_size),
        Command::RetrievePhase {
            target,
            iters,
            method,
            lr,
            optics,
            levels,
        } => retrieve_phase(&config, &target, iters, &method, lr, &optics, levels),
        Command::Simulate { input, psf, mask, noise } => simulate(&config, &input, psf.as_deref(), mask.as_deref(), noise),
        Command::ExportDose { mask, levels, blur } => export_dose(&config, &mask, levels, blur),
        Command::Report { input } => report(&config, input.as_deref()),
    }
}

fn json_line(out: &mut impl Write, line: &ReportLine) -> optikonv::Result<()> {
    writeln!(out, "{}", serde_json::to_string(line).expect("serializable"))?;
    Ok(())
}

fn train(config: &ExperimentConfig) -> optikonv::Result<()> {
    let (train_set, test_set) = load_data(config)?;
    let spec = config.model_spec(config.variant);
    let mut model = build_model(&spec, config.train.seed)?;
    let input = [1, 3, 32, 32];
    let macs = count_macs(&model, input)?;
    let baseline = count_macs(&build_model(&config.model_spec(Variant::Electronic), 0)?, input)?;
    let reduction = 100.0 * macs.reduction_vs(&baseline);
    std::fs::create_dir_all(&config.out_dir)?;
    let mut out = std::fs::File::create(config.out_dir.join("report.jsonl"))?;
    let mut train_cfg = config.train.clone();
    train_cfg.subset_size = None;
    let ckpt_dir = config.out_dir.join("checkpoints");
    train_with(&mut model, &train_set, Some(&test_set), &train_cfg, Some(&ckpt_dir), |m, _| {
        json_line(
            &mut out,
            &ReportLine {
                step: "train".into(),
                arch: spec.architecture.to_string(),
                variant: spec.variant.to_string(),
                epoch: Some(m.epoch),
                loss: Some(m.loss),
                top1: m.top1,
                macs: macs.mflops(),
                reduction,
            },
        )
    })?;
    let model_path = config.out_dir.join("model.tnsr");
    model.save(&model_path)?;
    println!("model: {}", model_path.display());
    if spec.variant == Variant::Codesign {
        let p = config.out_dir.join("psf.pgm");
        export_model_psf(&model, &p)?;
        println!("psf: {}", p.display());
    }
    Ok(())
}

fn eval(config: &ExperimentConfig, ckpt: &Path) -> optikonv::Result<()> {
    let (_, test_set) = load_data(config)?;
    let mut model = build_model(&config.model_spec(config.variant), config.train.seed)?;
    model.load(ckpt)?;
    let top1 = evaluate(&mut model, &test_set, &config.train)?;
    println!("top1 {top1:.2}");
    Ok(())
}

fn macs(config: &ExperimentConfig) -> optikonv::Result<()> {
    let input = [1, 3, 32, 32];
    let spec = config.model_spec(config.variant);
    let report = count_macs(&build_model(&spec, 0)?, input)?;
    println!("{:.1}", report.mflops());
    if spec.variant == Variant::Codesign {
        let base = count_macs(&build_model(&config.model_spec(Variant::Electronic), 0)?, input)?;
        println!("reduction vs electronic: {:.1}%", 100.0 * report.reduction_vs(&base));
    }
    print!("{}", report.table());
    Ok(())
}

fn compile_psf(config: &ExperimentConfig, ckpt: &Path, size: usize) -> optikonv::Result<()> {
    let spec = config.model_spec(Variant::Codesign).optical;
    let records = checkpoint::load(ckpt)?;
    let params = OpticalLayerParams::from_records(&records, "optical", &spec)?;
    let compiled = compile(&params, &spec, size, size)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("psf.pgm");
    let meta = write_psf(&compiled.psf, &path)?;
    compiled.save(config.out_dir.join("optics.tnsr"))?;
    println!("{} ({}x{}, sum {:.6})", path.display(), meta.width, meta.height, meta.sum);
    Ok(())
}

fn retrieve_phase(
    config: &ExperimentConfig,
    target: &Path,
    iters: usize,
    method: &str,
    lr: f64,
    optics: &OpticsArgs,
    levels: u32,
) -> optikonv::Result<()> {
    let target = read_psf(target)?;
    if target.height() != target.width() {
        return Err(Error::Geometry(format!("target must be square, got {}x{}", target.height(), target.width())));
    }
    let cfg = optics.config(target.width());
    let fab = (levels > 0).then_some(FabModel {
        levels,
        dose_blur_sigma: 0.0,
    });
    let (mask, history) = match method {
        "sgd" => {
            let r = retrieve_phase_sgd_with(
                &target,
                &cfg,
                &SgdOptions {
                    iters,
                    lr,
                    seed: config.train.seed,
                    fab,
                },
            )?;
            (r.mask, r.loss_history)
        }
        "gs" => {
            let traced = optikonv::optics::gerchberg_saxton_traced(&target, &cfg, iters, config.train.seed)?;
            let mask = match fab {
                Some(f) => apply_fab_model(&traced.mask, &f)?,
                None => traced.mask,
            };
            (mask, traced.loss_history)
        }
        other => return Err(Error::Config(format!("unknown method {other:?} (sgd|gs)"))),
    };
    std::fs::create_dir_all(&config.out_dir)?;
    let mask_path = config.out_dir.join("mask.tnsr");
    mask.save(&mask_path)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in history.iter().enumerate() {
        csv += &format!("{i},{l:e}\n");
    }
    std::fs::write(config.out_dir.join("loss_history.csv"), csv)?;
    let psf = psf_from_phase(&mask)?;
    write_psf(&psf, config.out_dir.join("mask_psf.pgm"))?;
    let gs = gerchberg_saxton(&target, &cfg, 200).and_then(|m| psf_from_phase(&m));
    println!("mask: {}", mask_path.display());
    println!("final loss {:.4e}", psf_loss(&psf, &target));
    if let Ok(gs) = gs {
        log::info!("200-iteration GS loss {:.4e}", psf_loss(&gs, &target));
    }
    Ok(())
}

fn read_image(path: &Path) -> optikonv::Result<Tensor> {
    let img = Gray16::read(path)?;
    Tensor::new(
        &[1, img.height, img.width],
        img.pixels.iter().map(|&p| p as f32 / 65535.0).collect(),
    )
}

fn simulate(config: &ExperimentConfig, input: &Path, psf: Option<&Path>, mask: Option<&Path>, noise: f32) -> optikonv::Result<()> {
    let psf = match (psf, mask) {
        (Some(p), _) => read_psf(p)?,
        (None, Some(m)) => psf_from_phase(&PhaseMask::load(m)?)?,
        (None, None) => return Err(Error::Config("simulate needs --psf or --mask".into())),
    };
    let image = read_image(input)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.train.seed);
    let sensor = add_sensor_noise(&optical_convolve(&image, &psf)?, noise, &mut rng)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let raw = config.out_dir.join("sensor.tnsr");
    checkpoint::save(&raw, &[("sensor", &sensor)])?;
    let (h, w) = (sensor.shape()[1], sensor.shape()[2]);
    let plane = &sensor.data()[..h * w];
    let peak = plane.iter().copied().fold(0.0f32, f32::max);
    let scale = if peak > 0.0 { 65535.0 / peak } else { 0.0 };
    Gray16 {
        width: w,
        height: h,
        pixels: plane.iter().map(|&v| (v.max(0.0) * scale).round() as u16).collect(),
    }
    .write(config.out_dir.join("sensor.pgm"))?;
    println!("sensor: {} ({h}x{w})", raw.display());
    Ok(())
}

fn export_dose(config: &ExperimentConfig, mask: &Path, levels: u32, blur: f64) -> optikonv::Result<()> {
    let mut mask = PhaseMask::load(mask)?;
    if levels > 0 || blur > 0.0 {
        mask = apply_fab_model(
            &mask,
            &FabModel {
                levels,
                dose_blur_sigma: blur,
            },
        )?;
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("dose.pgm");
    export_dose_map(&mask, &path)?;
    println!("dose: {} ({} levels)", path.display(), mask.levels());
    Ok(())
}

fn report(config: &ExperimentConfig, input: Option<&Path>) -> optikonv::Result<()> {
    let lines = match input {
        Some(p) => read_report(p)?,
        None => read_report(run_experiment(config)?.report_path)?,
    };
    print!("{}", summarize(&lines));
    Ok(())
}
