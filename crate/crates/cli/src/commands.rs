//! Subcommand implementations. Every handler resolves its configuration from
//! flags, an optional key=value file and built-in defaults (in that order),
//! does the work through the library crate, then writes a run manifest next
//! to its primary output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use derain_core::derain::derain;
use derain_core::eval::{evaluate, timed_derain, EvalReport};
use derain_core::fixtures::{self, FixtureSpec};
use derain_core::imaging::{guided_filter, load_png, save_png, Image};
use derain_core::srdn::{pretrain_srdn, SrdnModel, SrdnTrainConfig};
use derain_core::tensor::Tensor;
use derain_core::trainer::{
    load_corpus, load_derain_checkpoint, load_srdn_checkpoint, synthesize_pair, train,
    TrainConfig,
};
use derain_core::transform::{
    cached_soft_label, crop_to_scale_multiple, transform, transform_ablated, LabelMode,
    DEFAULT_EPS, DEFAULT_RADIUS,
};

use crate::config::{
    parse_count_range, parse_value_range, pick, pick_count_range, pick_optional_path,
    pick_required, pick_switch, pick_value_range, FileConfig,
};
use crate::manifest::RunManifest;

fn finish(manifest: &RunManifest, target: &Path) -> Result<()> {
    let path = manifest.write_next_to(target)?;
    println!("manifest: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-fixtures

#[derive(Args, Debug)]
pub struct GenFixturesArgs {
    /// Output directory (clean/, rainy/, manifest.txt)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Streaks per image, inclusive "LO,HI"
    #[arg(long, value_parser = parse_count_range)]
    streaks: Option<(usize, usize)>,
    /// Streak length range in pixels, "LO,HI"
    #[arg(long, value_parser = parse_value_range)]
    length: Option<(f64, f64)>,
    /// Streak thickness in pixels
    #[arg(long)]
    streak_width: Option<f64>,
    /// Angle range from vertical in degrees, "LO,HI"
    #[arg(long, value_parser = parse_value_range)]
    angle: Option<(f64, f64)>,
    /// Peak streak brightness range, "LO,HI"
    #[arg(long, value_parser = parse_value_range)]
    intensity: Option<(f64, f64)>,
    /// Per-streak opacity multiplier
    #[arg(long)]
    alpha: Option<f64>,
    /// key=value file supplying any of the flags above
    #[arg(long)]
    config: Option<PathBuf>,
}

const GEN_FIXTURES_KEYS: &[&str] = &[
    "out", "count", "height", "width", "seed", "streaks", "length", "streak-width", "angle",
    "intensity", "alpha",
];

pub fn gen_fixtures(args: GenFixturesArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), GEN_FIXTURES_KEYS)?;
    let defaults = FixtureSpec::default();
    let out: PathBuf = pick_required(args.out, &file, "out")?;
    let spec = FixtureSpec {
        count: pick(args.count, &file, "count", defaults.count)?,
        height: pick(args.height, &file, "height", defaults.height)?,
        width: pick(args.width, &file, "width", defaults.width)?,
        streak_count: pick_count_range(args.streaks, &file, "streaks", defaults.streak_count)?,
        streak_length: pick_value_range(args.length, &file, "length", defaults.streak_length)?,
        streak_width: pick(args.streak_width, &file, "streak-width", defaults.streak_width)?,
        streak_angle: pick_value_range(args.angle, &file, "angle", defaults.streak_angle)?,
        streak_intensity: pick_value_range(
            args.intensity,
            &file,
            "intensity",
            defaults.streak_intensity,
        )?,
        streak_alpha: pick(args.alpha, &file, "alpha", defaults.streak_alpha)?,
        seed: pick(args.seed, &file, "seed", defaults.seed)?,
    };

    let start = Instant::now();
    let report = fixtures::gen_fixtures(&spec, &out)?;
    println!(
        "generated {} pairs at {}x{} in {} (mean rainy PSNR {:.2} dB)",
        spec.count,
        spec.height,
        spec.width,
        out.display(),
        report.mean_psnr_db
    );

    let mut m = RunManifest::new("gen-fixtures");
    m.set_path("out", &out);
    m.set("count", spec.count);
    m.set("height", spec.height);
    m.set("width", spec.width);
    m.set("seed", spec.seed);
    m.set("streaks", format!("{},{}", spec.streak_count.0, spec.streak_count.1));
    m.set("length", format!("{},{}", spec.streak_length.0, spec.streak_length.1));
    m.set("streak-width", spec.streak_width);
    m.set("angle", format!("{},{}", spec.streak_angle.0, spec.streak_angle.1));
    m.set(
        "intensity",
        format!("{},{}", spec.streak_intensity.0, spec.streak_intensity.1),
    );
    m.set("alpha", spec.streak_alpha);
    m.seed = Some(spec.seed);
    m.output(&out);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &out)
}

// ---------------------------------------------------------------------------
// pretrain-srdn

#[derive(Args, Debug)]
pub struct PretrainSrdnArgs {
    /// Directory of rainy PNGs to train on
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint file to write
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const PRETRAIN_KEYS: &[&str] = &["corpus", "out", "epochs", "lr", "batch", "patch", "seed"];

pub fn pretrain(args: PretrainSrdnArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), PRETRAIN_KEYS)?;
    let defaults = SrdnTrainConfig::default();
    let corpus_dir: PathBuf = pick_required(args.corpus, &file, "corpus")?;
    let out: PathBuf = pick_required(args.out, &file, "out")?;
    let config = SrdnTrainConfig {
        epochs: pick(args.epochs, &file, "epochs", defaults.epochs)?,
        lr: pick(args.lr, &file, "lr", defaults.lr)?,
        batch: pick(args.batch, &file, "batch", defaults.batch)?,
        patch: pick(args.patch, &file, "patch", defaults.patch)?,
        seed: pick(args.seed, &file, "seed", defaults.seed)?,
        checkpoint_path: Some(out.clone()),
    };

    let start = Instant::now();
    let images: Vec<Image> = load_corpus(&corpus_dir)?
        .into_iter()
        .map(|(_, im)| im)
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut model = SrdnModel::new(&mut rng);
    pretrain_srdn(&mut model, &images, &config, &mut |epoch, loss| {
        println!("epoch={epoch} srdn_loss={loss:.6}");
    })?;
    println!(
        "wrote {} ({} parameter tensors, {} scalars)",
        out.display(),
        model.named_params().len(),
        model.parameter_count()
    );

    let mut m = RunManifest::new("pretrain-srdn");
    m.set_path("corpus", &corpus_dir);
    m.set_path("out", &out);
    m.set("epochs", config.epochs);
    m.set("lr", config.lr);
    m.set("batch", config.batch);
    m.set("patch", config.patch);
    m.set("seed", config.seed);
    m.seed = Some(config.seed);
    m.input(&corpus_dir)?;
    m.output(&out);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &out)
}

// ---------------------------------------------------------------------------
// transform

#[derive(Args, Debug)]
pub struct TransformArgs {
    /// Rainy input PNG
    #[arg(long)]
    image: Option<PathBuf>,
    /// Pre-trained upscaler checkpoint (optional when --cache is warm)
    #[arg(long)]
    srdn: Option<PathBuf>,
    /// Soft-label output PNG
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Label synthesis: full, noscale or nofilter
    #[arg(long)]
    mode: Option<String>,
    /// Label cache directory (reused across runs)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Also write the intermediate stages into this directory
    #[arg(long)]
    dump_stages: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const TRANSFORM_KEYS: &[&str] = &[
    "image", "srdn", "out", "radius", "eps", "mode", "cache", "dump-stages",
];

fn parse_mode(s: &str) -> Result<LabelMode> {
    match s {
        "full" => Ok(LabelMode::Full),
        "noscale" => Ok(LabelMode::NoScaling),
        "nofilter" => Ok(LabelMode::NoFilter),
        other => bail!("unknown label mode {other:?}; expected full, noscale or nofilter"),
    }
}

pub fn transform_cmd(args: TransformArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), TRANSFORM_KEYS)?;
    let image_path: PathBuf = pick_required(args.image, &file, "image")?;
    let out: PathBuf = pick_required(args.out, &file, "out")?;
    let srdn_path = pick_optional_path(args.srdn, &file, "srdn")?;
    let cache = pick_optional_path(args.cache, &file, "cache")?;
    let dump_stages = pick_optional_path(args.dump_stages, &file, "dump-stages")?;
    let radius = pick(args.radius, &file, "radius", DEFAULT_RADIUS)?;
    let eps = pick(args.eps, &file, "eps", DEFAULT_EPS)?;
    let mode = parse_mode(&pick(args.mode, &file, "mode", "full".to_string())?)?;

    let start = Instant::now();
    let source = load_png(&image_path)?;
    let x = crop_to_scale_multiple(&source)?;
    if (x.height(), x.width()) != (source.height(), source.width()) {
        println!(
            "input cropped to {}x{} (the transform needs multiples of 8)",
            x.height(),
            x.width()
        );
    }
    let srdn = srdn_path
        .as_deref()
        .map(|p| load_srdn_checkpoint(p).map(|s| s.model))
        .transpose()?;

    let label = match &cache {
        Some(dir) => cached_soft_label(dir, &x, srdn.as_ref(), radius, eps, mode)?,
        None => match (mode, srdn.as_ref()) {
            (LabelMode::NoScaling, _) => guided_filter(&x, &x, radius, eps),
            (_, Some(model)) => transform_ablated(&x, model, radius, eps, mode),
            (_, None) => bail!("--srdn is required without a warm --cache"),
        },
    };
    save_png(&label, &out)?;
    println!("label written to {}", out.display());

    if let Some(stage_dir) = &dump_stages {
        let model = srdn
            .as_ref()
            .ok_or_else(|| anyhow!("--dump-stages needs --srdn to run the full pipeline"))?;
        std::fs::create_dir_all(stage_dir)
            .with_context(|| format!("cannot create {}", stage_dir.display()))?;
        let bundle = transform(&x, model, radius, eps);
        for (name, im) in [
            ("downscaled.png", &bundle.downscaled),
            ("upscaled.png", &bundle.upscaled),
            ("rain-free.png", &bundle.rain_free),
            ("label.png", &bundle.label),
        ] {
            save_png(im, &stage_dir.join(name))?;
        }
        println!("stages written to {}", stage_dir.display());
    }

    let mut m = RunManifest::new("transform");
    m.set_path("image", &image_path);
    m.set_path("out", &out);
    if let Some(p) = &srdn_path {
        m.set_path("srdn", p);
        m.input(p)?;
    }
    if let Some(p) = &cache {
        m.set_path("cache", p);
    }
    if let Some(p) = &dump_stages {
        m.set_path("dump-stages", p);
        m.output(p);
    }
    m.set("radius", radius);
    m.set("eps", eps);
    m.set("mode", mode.tag());
    m.input(&image_path)?;
    m.output(&out);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &out)
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of rainy training PNGs
    #[arg(long)]
    rainy: Option<PathBuf>,
    /// Directory of clean PNGs for feedback pairs
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Soft-label cache directory
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory receiving periodic and final checkpoints
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Pre-trained upscaler checkpoint (optional when --labels is warm)
    #[arg(long)]
    srdn: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Soft-objective-only epochs before feedback starts
    #[arg(long = "warm-up")]
    warm_up: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Weight of the hard objective in the combined loss
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Ablation: labels without the downscale round trip
    #[arg(long)]
    no_scaling: bool,
    /// Ablation: labels without the guided filter
    #[arg(long)]
    no_filter: bool,
    /// Ablation: never build feedback pairs
    #[arg(long)]
    no_feedback: bool,
    /// Ablation: train the base network without the detail block
    #[arg(long)]
    no_detail: bool,
    /// Continue from a periodic checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const TRAIN_KEYS: &[&str] = &[
    "rainy", "clean", "labels", "checkpoints", "srdn", "epochs", "warm-up", "lr", "batch",
    "patch", "alpha", "seed", "checkpoint-every", "radius", "eps", "no-scaling", "no-filter",
    "no-feedback", "no-detail", "resume",
];

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let config = TrainConfig {
        total_epochs: pick(args.epochs, &file, "epochs", d.total_epochs)?,
        soft_only_epochs: pick(args.warm_up, &file, "warm-up", d.soft_only_epochs)?,
        lr_initial: pick(args.lr, &file, "lr", d.lr_initial)?,
        batch: pick(args.batch, &file, "batch", d.batch)?,
        patch: pick(args.patch, &file, "patch", d.patch)?,
        alpha: pick(args.alpha, &file, "alpha", d.alpha)?,
        seed: pick(args.seed, &file, "seed", d.seed)?,
        rainy_dir: pick_required(args.rainy, &file, "rainy")?,
        clean_dir: pick_required(args.clean, &file, "clean")?,
        label_cache_dir: pick_required(args.labels, &file, "labels")?,
        checkpoint_dir: pick_required(args.checkpoints, &file, "checkpoints")?,
        srdn_checkpoint: pick_optional_path(args.srdn, &file, "srdn")?,
        checkpoint_every: pick(args.checkpoint_every, &file, "checkpoint-every", d.checkpoint_every)?,
        gf_radius: pick(args.radius, &file, "radius", d.gf_radius)?,
        gf_eps: pick(args.eps, &file, "eps", d.gf_eps)?,
        no_scaling: pick_switch(args.no_scaling, &file, "no-scaling")?,
        no_filter: pick_switch(args.no_filter, &file, "no-filter")?,
        no_feedback: pick_switch(args.no_feedback, &file, "no-feedback")?,
        no_detail: pick_switch(args.no_detail, &file, "no-detail")?,
    };
    let resume = pick_optional_path(args.resume, &file, "resume")?;

    let start = Instant::now();
    train(&config, resume.as_deref(), &mut |report| {
        println!("{}", report.log_line());
    })?;
    let final_path = config.checkpoint_dir.join("derain-final.ckpt");
    println!("final checkpoint: {}", final_path.display());

    let mut m = RunManifest::new("train");
    for (key, value) in config.descriptor_entries() {
        // Descriptor keys match the library config; translate to flag names.
        let flag = match key.as_str() {
            "total_epochs" => "epochs".to_string(),
            "soft_only_epochs" => "warm-up".to_string(),
            "lr_initial" => "lr".to_string(),
            "rainy_dir" => "rainy".to_string(),
            "clean_dir" => "clean".to_string(),
            "label_cache_dir" => "labels".to_string(),
            "checkpoint_dir" => "checkpoints".to_string(),
            "srdn_checkpoint" => "srdn".to_string(),
            "gf_radius" => "radius".to_string(),
            "gf_eps" => "eps".to_string(),
            other => other.replace('_', "-"),
        };
        m.set(&flag, value);
    }
    if let Some(p) = &resume {
        m.set_path("resume", p);
        m.input(p)?;
    }
    m.seed = Some(config.seed);
    m.input(&config.rainy_dir)?;
    m.input(&config.clean_dir)?;
    if let Some(p) = &config.srdn_checkpoint {
        m.input(p)?;
    }
    m.output(&config.checkpoint_dir);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &config.checkpoint_dir)
}

// ---------------------------------------------------------------------------
// infer / extract-rain / synthesize

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rainy input PNG
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Restored output PNG
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const INFER_KEYS: &[&str] = &["checkpoint", "in", "out"];

pub fn infer(args: InferArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), INFER_KEYS)?;
    let checkpoint: PathBuf = pick_required(args.checkpoint, &file, "checkpoint")?;
    let input: PathBuf = pick_required(args.input, &file, "in")?;
    let out: PathBuf = pick_required(args.out, &file, "out")?;

    let start = Instant::now();
    let state = load_derain_checkpoint(&checkpoint)?;
    let x = load_png(&input)?;
    let (restored, seconds) = timed_derain(&state.model, &x);
    save_png(&restored, &out)?;
    println!(
        "restored {}x{} in {seconds:.3} s: {}",
        x.width(),
        x.height(),
        out.display()
    );

    let mut m = RunManifest::new("infer");
    m.set_path("checkpoint", &checkpoint);
    m.set_path("in", &input);
    m.set_path("out", &out);
    m.input(&checkpoint)?;
    m.input(&input)?;
    m.output(&out);
    m.timing("forward", seconds);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &out)
}

#[derive(Args, Debug)]
pub struct ExtractRainArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rainy input PNG
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Rain-map output PNG, residual remapped from (-1,1) to (0,1)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn extract_rain(args: ExtractRainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), INFER_KEYS)?;
    let checkpoint: PathBuf = pick_required(args.checkpoint, &file, "checkpoint")?;
    let input: PathBuf = pick_required(args.input, &file, "in")?;
    let out: PathBuf = pick_required(args.out, &file, "out")?;

    let start = Instant::now();
    let state = load_derain_checkpoint(&checkpoint)?;
    let x = load_png(&input)?;
    let (_, residual) = derain(&state.model, x.tensor());
    save_png(&Image::from_tensor(remap_residual(&residual)), &out)?;
    println!("rain map written to {}", out.display());

    let mut m = RunManifest::new("extract-rain");
    m.set_path("checkpoint", &checkpoint);
    m.set_path("in", &input);
    m.set_path("out", &out);
    m.input(&checkpoint)?;
    m.input(&input)?;
    m.output(&out);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &out)
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Rainy PNG whose extracted rain gets transplanted
    #[arg(long)]
    rain_source: Option<PathBuf>,
    /// Clean PNG receiving the rain
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Synthetic rainy output PNG (pairs with the clean input)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const SYNTHESIZE_KEYS: &[&str] = &["checkpoint", "rain-source", "clean", "out"];

pub fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), SYNTHESIZE_KEYS)?;
    let checkpoint: PathBuf = pick_required(args.checkpoint, &file, "checkpoint")?;
    let rain_source: PathBuf = pick_required(args.rain_source, &file, "rain-source")?;
    let clean_path: PathBuf = pick_required(args.clean, &file, "clean")?;
    let out: PathBuf = pick_required(args.out, &file, "out")?;

    let start = Instant::now();
    let state = load_derain_checkpoint(&checkpoint)?;
    let x = load_png(&rain_source)?;
    let c = load_png(&clean_path)?;
    if (x.height(), x.width()) != (c.height(), c.width()) {
        bail!(
            "size mismatch: rain source is {}x{} but the clean image is {}x{}; crop one to match",
            x.width(),
            x.height(),
            c.width(),
            c.height()
        );
    }
    let (synthetic, _) = synthesize_pair(&state.model, &state.detail, &x, &c);
    save_png(&synthetic, &out)?;
    println!(
        "hard pair written to {} (rain source: {})",
        out.display(),
        rain_source.display()
    );

    let mut m = RunManifest::new("synthesize");
    m.set_path("checkpoint", &checkpoint);
    m.set_path("rain-source", &rain_source);
    m.set_path("clean", &clean_path);
    m.set_path("out", &out);
    m.input(&checkpoint)?;
    m.input(&rain_source)?;
    m.input(&clean_path)?;
    m.output(&out);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &out)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fixture directory with rainy/ and clean/ pairs
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Directory receiving report.txt and report.json
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

const EVAL_KEYS: &[&str] = &["checkpoint", "fixtures", "report"];

#[derive(Serialize)]
struct PairScoreJson {
    name: String,
    rainy_psnr: f64,
    rainy_ssim: f64,
    derained_psnr: f64,
    derained_ssim: f64,
    seconds: f64,
}

#[derive(Serialize)]
struct EvalJson {
    pairs: Vec<PairScoreJson>,
    mean_rainy_psnr: f64,
    mean_rainy_ssim: f64,
    mean_derained_psnr: f64,
    mean_derained_ssim: f64,
    mean_seconds: f64,
}

fn eval_json(report: &EvalReport) -> EvalJson {
    EvalJson {
        pairs: report
            .pairs
            .iter()
            .map(|p| PairScoreJson {
                name: p.name.clone(),
                rainy_psnr: p.rainy_psnr,
                rainy_ssim: p.rainy_ssim,
                derained_psnr: p.derained_psnr,
                derained_ssim: p.derained_ssim,
                seconds: p.seconds,
            })
            .collect(),
        mean_rainy_psnr: report.mean_rainy_psnr,
        mean_rainy_ssim: report.mean_rainy_ssim,
        mean_derained_psnr: report.mean_derained_psnr,
        mean_derained_ssim: report.mean_derained_ssim,
        mean_seconds: report.mean_seconds,
    }
}

pub fn eval_cmd(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref(), EVAL_KEYS)?;
    let checkpoint: PathBuf = pick_required(args.checkpoint, &file, "checkpoint")?;
    let fixtures_dir: PathBuf = pick_required(args.fixtures, &file, "fixtures")?;
    let report_dir: PathBuf = pick_required(args.report, &file, "report")?;

    let start = Instant::now();
    let report = evaluate(&checkpoint, &fixtures_dir)?;
    print!("{}", report.table());
    std::fs::create_dir_all(&report_dir)
        .with_context(|| format!("cannot create {}", report_dir.display()))?;
    let txt_path = report_dir.join("report.txt");
    let json_path = report_dir.join("report.json");
    std::fs::write(&txt_path, report.table())
        .with_context(|| format!("cannot write {}", txt_path.display()))?;
    let mut body = serde_json::to_vec_pretty(&eval_json(&report))?;
    body.push(b'\n');
    std::fs::write(&json_path, body)
        .with_context(|| format!("cannot write {}", json_path.display()))?;
    println!("report: {}", txt_path.display());

    let mut m = RunManifest::new("eval");
    m.set_path("checkpoint", &checkpoint);
    m.set_path("fixtures", &fixtures_dir);
    m.set_path("report", &report_dir);
    m.input(&checkpoint)?;
    m.input(&fixtures_dir)?;
    m.output(&txt_path);
    m.output(&json_path);
    m.timing("total", start.elapsed().as_secs_f64());
    finish(&m, &report_dir)
}

// ---------------------------------------------------------------------------

/// Display remap for rain maps: the residual lives in (-1, 1), so mid-gray
/// means no rain.
fn remap_residual(residual: &Tensor<f32>) -> Tensor<f32> {
    residual.map(|r| (r + 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_rain_map_remap_centers_zero_at_mid_gray() {
        let r = Tensor::from_vec([1, 1, 1, 3], vec![-0.5, 0.0, 0.5]);
        let d = remap_residual(&r);
        assert_eq!(d.data(), &[0.25, 0.5, 0.75]);
    }

    #[test]
    fn label_modes_parse_and_reject() {
        assert_eq!(parse_mode("full").unwrap(), LabelMode::Full);
        assert_eq!(parse_mode("noscale").unwrap(), LabelMode::NoScaling);
        assert_eq!(parse_mode("nofilter").unwrap(), LabelMode::NoFilter);
        assert!(parse_mode("other").is_err());
    }
}
