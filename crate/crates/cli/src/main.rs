//! `egoseg` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use egoseg::eval::{benchmark_inference, evaluate, write_overlays};
use egoseg::imgproc::{
    chroma_key, crop_resize, io, morphology_with_border, Border, CropBox, HsvThresholds, MorphOp,
};
use egoseg::matting::{matte_from_mask, MattingParams};
use egoseg::synth::{
    build_dataset, expand_backgrounds, load_backgrounds, load_foregrounds, load_samples,
    DatasetManifest, KeyingOptions, Split, SynthConfig,
};
use egoseg::thundernet::{load_checkpoint, model_grad_check, Model, ModelConfig, ModelGradCheckOptions};
use egoseg::train::{fit_manifest, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "egoseg", version, about = "Egocentric human segmentation toolkit")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chroma-key a green-screen capture into a cleaned binary mask.
    Key(KeyArgs),
    /// Estimate an alpha matte from an image and a binary mask.
    Matte(MatteArgs),
    /// Build a composited dataset from foreground captures and backgrounds.
    Synth(SynthArgs),
    /// Train the segmentation network.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Measure per-frame inference latency.
    Bench(BenchArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct HsvArgs {
    #[arg(long, default_value_t = HsvThresholds::default().hue_lo)]
    hue_lo: f32,
    #[arg(long, default_value_t = HsvThresholds::default().hue_hi)]
    hue_hi: f32,
    #[arg(long, default_value_t = HsvThresholds::default().sat_min)]
    sat_min: f32,
    #[arg(long, default_value_t = HsvThresholds::default().val_min)]
    val_min: f32,
}

impl HsvArgs {
    fn thresholds(&self) -> anyhow::Result<HsvThresholds> {
        let t = HsvThresholds {
            hue_lo: self.hue_lo,
            hue_hi: self.hue_hi,
            sat_min: self.sat_min,
            val_min: self.val_min,
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Args, Debug)]
struct MattingArgs {
    #[arg(long, default_value_t = MattingParams::default().band_radius)]
    band_radius: usize,
    #[arg(long, default_value_t = MattingParams::default().rays)]
    rays: usize,
    #[arg(long, default_value_t = MattingParams::default().samples_per_ray)]
    samples_per_ray: usize,
    #[arg(long, default_value_t = MattingParams::default().neighborhood)]
    neighborhood: usize,
    #[arg(long, default_value_t = MattingParams::default().smooth_sigma)]
    smooth_sigma: f64,
    #[arg(long, default_value_t = MattingParams::default().lambda)]
    lambda: f64,
}

impl MattingArgs {
    fn params(&self) -> anyhow::Result<MattingParams> {
        let p = MattingParams {
            band_radius: self.band_radius,
            rays: self.rays,
            samples_per_ray: self.samples_per_ray,
            neighborhood: self.neighborhood,
            smooth_sigma: self.smooth_sigma,
            lambda: self.lambda,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct KeyArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output mask PNG (0/255).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hsv: HsvArgs,
    /// Opening radius of the cleanup (0 skips it).
    #[arg(long, default_value_t = 1)]
    open_radius: usize,
    /// Closing radius of the cleanup (0 skips it).
    #[arg(long, default_value_t = 2)]
    close_radius: usize,
    /// Crop box `x,y,w,h` applied to the mask after keying.
    #[arg(long, value_parser = parse_box)]
    crop: Option<CropBox>,
    /// Output size `HxW` of the cropped mask (defaults to the box size).
    #[arg(long, value_parser = parse_hw)]
    resize: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
struct MatteArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Output alpha PNG (alpha x 255, rounded).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matting: MattingArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    fg_dir: PathBuf,
    #[arg(long)]
    bg_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().per_user_cap)]
    per_user_cap: usize,
    #[arg(long, default_value_t = SynthConfig::default().val_fraction)]
    val_fraction: f64,
    #[arg(long, default_value_t = SynthConfig::default().frames_per_background)]
    frames_per_background: usize,
    /// Rotation angles added for floor-pose backgrounds.
    #[arg(long, value_delimiter = ',', default_values_t = SynthConfig::default().floor_rotations)]
    rotations: Vec<u32>,
    #[command(flatten)]
    hsv: HsvArgs,
    #[command(flatten)]
    matting: MattingArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML file of training settings; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Epoch checkpoint to continue from (its `.adam` file must sit next to it).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for prediction overlays.
    #[arg(long)]
    overlays: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model to time; without it a freshly initialized desk-size model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Square input size (defaults to the model's input size).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Use the toy configuration (48x48 input, pyramid bins 1 and 2).
    #[arg(long)]
    toy: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = ModelGradCheckOptions::default().probes_per_tensor)]
    probes_per_tensor: usize,
    #[arg(long, default_value_t = ModelGradCheckOptions::default().eps)]
    eps: f64,
}

/// Bad flags or arguments; exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn parse_box(s: &str) -> Result<CropBox, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad box component {p:?}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        &[x, y, w, h] => Ok(CropBox { x, y, w, h }),
        _ => Err("expected x,y,w,h".into()),
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {v:?}"));
    Ok((p(h)?, p(w)?))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (train or val)"))
}

fn source_label(src: Option<ValueSource>) -> &'static str {
    match src {
        Some(ValueSource::CommandLine) => "command line",
        Some(ValueSource::EnvVariable) => "environment",
        Some(ValueSource::DefaultValue) => "default",
        _ => "unset",
    }
}

/// Prints every flag of the command with its value and where the value came from.
fn echo_args(cmd: &clap::Command, m: &ArgMatches) {
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(id, "help" | "version") {
            continue;
        }
        let value = match m.try_get_raw(id) {
            Ok(Some(vals)) => vals.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(","),
            _ => "none".to_string(),
        };
        println!("{:<32} # {}", format!("{id} = {value}"), source_label(m.value_source(id)));
    }
}

fn echo_resolved(root: &ArgMatches) {
    let cmd = Cli::command();
    println!("# resolved configuration");
    echo_args(&cmd, root);
    if let Some((name, sub)) = root.subcommand() {
        println!("{:<32} # command line", format!("command = {name}"));
        if let Some(sc) = cmd.find_subcommand(name) {
            echo_args(sc, sub);
        }
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    echo_resolved(&matches);
    let seed_given = matches.value_source("seed") == Some(ValueSource::CommandLine);
    match run(&cli, seed_given) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<egoseg::Error>() {
        Some(err) if err.is_numeric() => 3,
        Some(egoseg::Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn run(cli: &Cli, seed_given: bool) -> anyhow::Result<()> {
    match &cli.command {
        Command::Key(a) => key(a),
        Command::Matte(a) => matte(a),
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train(a, seed_given.then_some(cli.seed)),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, cli.seed),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
    }
}

fn key(a: &KeyArgs) -> anyhow::Result<()> {
    let thresholds = a.hsv.thresholds()?;
    let image = io::read_rgb(&a.input)?;
    let raw = chroma_key(&image, &thresholds);
    let opened = morphology_with_border(&raw, MorphOp::Open, a.open_radius, Border::Replicate);
    let mut mask = morphology_with_border(&opened, MorphOp::Close, a.close_radius, Border::Replicate);
    if a.crop.is_some() || a.resize.is_some() {
        let bx = a.crop.unwrap_or(CropBox::full(mask.height(), mask.width()));
        let (h, w) = a.resize.unwrap_or((bx.h, bx.w));
        mask = crop_resize(&image.to_f32(), Some(&mask), bx, h, w)?.1.expect("mask given");
    }
    io::write_mask(&a.out, &mask)?;
    println!(
        "foreground_pixels={} total_pixels={}",
        mask.count_ones(),
        mask.height() * mask.width()
    );
    Ok(())
}

fn matte(a: &MatteArgs) -> anyhow::Result<()> {
    let params = a.matting.params()?;
    let image = io::read_rgb(&a.image)?.to_f32();
    let mask = io::read_mask(&a.mask)?;
    let out = matte_from_mask(&image, &mask, &params)?;
    io::write_gray(&a.out, out.alpha.height(), out.alpha.width(), out.alpha.as_slice())?;
    println!(
        "unknown_pixels={} fallback_pixels={}",
        out.diagnostics.unknown_pixels, out.diagnostics.fallback_pixels
    );
    Ok(())
}

fn synth(a: &SynthArgs, seed: u64) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        frames_per_background: a.frames_per_background,
        floor_rotations: a.rotations.clone(),
        per_user_cap: a.per_user_cap,
        val_fraction: a.val_fraction,
        seed,
    };
    cfg.validate()?;
    let keying = KeyingOptions {
        thresholds: a.hsv.thresholds()?,
        matting: a.matting.params()?,
    };
    let fgs = load_foregrounds(&a.fg_dir, &keying)?;
    let bgs = expand_backgrounds(&load_backgrounds(&a.bg_dir, cfg.frames_per_background)?, &cfg.floor_rotations)?;
    let plan = build_dataset(&fgs, &bgs, &cfg)?;
    for w in &plan.warnings {
        println!("warning: {w}");
    }
    plan.materialize(&fgs, &bgs, &a.out)?;
    let m = &plan.manifest;
    println!(
        "records={} train={} val={} foregrounds={} backgrounds={} manifest={}",
        m.records.len(),
        m.split(Split::Train).len(),
        m.split(Split::Val).len(),
        fgs.len(),
        bgs.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

/// `seed` overrides the config file's seed when given on the command line.
fn train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let (mut cfg, file_keys) = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let keys: Vec<String> = text
                .parse::<toml::Table>()
                .map_err(|e| Usage(format!("{}: {e}", p.display())))?
                .keys()
                .cloned()
                .collect();
            (TrainConfig::from_toml_str(&text)?, keys)
        }
        None => (TrainConfig::default(), Vec::new()),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    println!("# training configuration (keys from the config file: {})", if file_keys.is_empty() { "none".into() } else { file_keys.join(", ") });
    print!("{}", cfg.to_toml());
    let history = fit_manifest(&a.manifest, &cfg, &a.out_dir, a.resume.as_deref())?;
    if let Some(last) = history.epochs.last() {
        println!(
            "epoch={} train_loss={:.6} val_loss={:.6} val_iou_bg={:.4} val_iou_human={:.4}",
            last.epoch, last.train_loss, last.val_loss, last.val_iou_bg, last.val_iou_human
        );
    }
    Ok(())
}

fn write_report(path: &Path, json: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let model: Model<f32> = load_checkpoint(&a.checkpoint)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let samples = load_samples(&manifest, base, a.split, Some(model.config().input_size))?;
    let (report, preds) = evaluate(&model, &samples, a.batch_size)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.report {
        write_report(p, &json)?;
    }
    if let Some(dir) = &a.overlays {
        write_overlays(dir, &samples, &preds)?;
    }
    println!(
        "images={} dataset_iou_bg={:.4} dataset_iou_human={:.4} dataset_miou={:.4} per_image_iou_human={:.4}",
        report.images, report.dataset.background, report.dataset.human, report.dataset.mean, report.per_image_mean.human
    );
    Ok(())
}

fn bench(a: &BenchArgs, seed: u64) -> anyhow::Result<()> {
    let model: Model<f32> = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => Model::new(ModelConfig {
            ppm_bins: vec![1, 2, 3, 6],
            seed,
            ..ModelConfig::desk()
        })?,
    };
    let size = a.size.unwrap_or(model.config().input_size);
    let report = benchmark_inference(&model, size, a.warmup, a.iters)?;
    if let Some(p) = &a.report {
        write_report(p, &report.to_json())?;
    }
    println!(
        "size={} median_ms={:.3} p95_ms={:.3} threads={} reference_gpu_ms_720={}",
        report.input_size, report.median_ms, report.p95_ms, report.threads, report.reference_gpu_ms_720
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> anyhow::Result<()> {
    if !a.toy {
        bail!(Usage("only the toy configuration is supported; pass --toy".into()));
    }
    let opts = ModelGradCheckOptions {
        probes_per_tensor: a.probes_per_tensor,
        eps: a.eps,
        seed,
        ..ModelGradCheckOptions::default()
    };
    let r = model_grad_check(&ModelConfig::toy(), &opts)?;
    println!(
        "max_rel_err={:.3e} worst={} analytic={:.6e} numeric={:.6e} probes={} kinks_excluded={}",
        r.max_rel_err, r.worst, r.analytic, r.numeric, r.probes, r.kinks_excluded
    );
    if r.max_rel_err < a.tolerance {
        println!("PASS");
        Ok(())
    } else {
        Err(egoseg::Error::GradCheck {
            max_rel_err: r.max_rel_err,
            tolerance: a.tolerance,
        }
        .into())
    }
}
