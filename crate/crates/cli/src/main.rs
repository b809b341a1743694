mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use musart::audio::{load_audio, MelFrontend};
use musart::dataset::{load_manifest, synth_generate, Corpus, SynthConfig, SEGMENT_START};
use musart::diff::Checkpoint;
use musart::error::ErrorCategory;
use musart::imaging::{resize_rgb, write_file, ImageTensor, IMAGE_SIZE};
use musart::losses::FeatureExtractor;
use musart::mvnet::{MVNet, MVNetConfig};
use musart::stnets::{
    train_decoder, Backend, Decoder, DecoderTrainConfig, StyleTransfer, TransferConfig,
};
use musart::trainer::{
    eval_era_accuracy, labelled_music, resume, train_from, Ablation, TrainConfig, TrainState,
};
use musart::video::{load_frames, transfer_video, write_frames, VideoConfig};
use musart::{gradsuite, Error, Result};

use crate::config::{flags, opt, resolve, ConfigFile};

/// Environment variable naming the directory under which training runs are created.
const RUN_ROOT_ENV: &str = "MUSART_RUN_ROOT";
const DECODER_FILE: &str = "decoder.ck";
const VERSIONS_FILE: &str = "versions.json";

#[derive(Parser, Debug)]
#[command(
    name = "musart",
    version,
    about = "Music-driven visual style transfer",
    arg_required_else_help = true
)]
struct Cli {
    /// TOML file with [synth], [train], [style], [video] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic era-labelled corpus of WAV clips and PNG images.
    Synth(SynthArgs),
    /// Train the music visualization network on a manifest.
    Train(TrainArgs),
    /// Generate the style image for a music clip.
    Visualize(VisualizeArgs),
    /// Stylize a content image with the style image generated from music.
    Transfer(TransferArgs),
    /// Stylize a directory of video frames with a sliding music window.
    Video(VideoArgs),
    /// Era accuracy of the classifier on generated images.
    Eval(EvalArgs),
    /// Central-difference check of every primitive, loss term and the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    music_seconds: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelPreset {
    /// Full-width networks.
    Full,
    /// Narrow networks for single-core runs.
    Desk,
}

impl ModelPreset {
    fn config(self) -> MVNetConfig {
        match self {
            Self::Full => MVNetConfig::default(),
            Self::Desk => MVNetConfig::desk(),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to `$MUSART_RUN_ROOT/train-<ablation>-seed<seed>` (root `runs`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// style, cls_trip or full.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    w_tri: Option<f64>,
    #[arg(long)]
    w_sty: Option<f64>,
    #[arg(long)]
    w_cls: Option<f64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
    /// Classifier output count.
    #[arg(long)]
    classes: Option<usize>,
    /// After training, fit the style transfer decoder for this many steps and save
    /// it as `decoder.ck` in the run directory.
    #[arg(long, default_value_t = 0)]
    decoder_steps: usize,
}

#[derive(Args, Debug)]
struct NetArgs {
    /// Training checkpoint; an untrained network from `--seed` when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Architecture of the untrained network used without `--checkpoint`.
    #[arg(long, value_enum, default_value = "desk")]
    model: ModelPreset,
}

#[derive(Args, Debug)]
struct StyleArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend: Option<Backend>,
    /// 1 is fully stylized, 0 is the content round trip.
    #[arg(long)]
    blend: Option<f64>,
    /// Decoder checkpoint; defaults to `decoder.ck` beside `--checkpoint`.
    #[arg(long)]
    decoder: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    music: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    music: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the generated style image here.
    #[arg(long)]
    style_out: Option<PathBuf>,
    #[command(flatten)]
    style: StyleArgs,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct VideoArgs {
    /// Directory of PNG frames, processed in file-name order.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    music: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fps: Option<f64>,
    /// Draw a new noise code for every frame instead of keeping one for the video.
    #[arg(long)]
    fresh_noise: bool,
    #[command(flatten)]
    style: StyleArgs,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StyleOptions {
    seed: u64,
    backend: Backend,
    blend: f64,
}

impl StyleOptions {
    fn defaults() -> Self {
        let t = TransferConfig::default();
        Self {
            seed: 0,
            backend: t.backend,
            blend: t.blend,
        }
    }

    fn transfer(&self) -> TransferConfig {
        TransferConfig {
            backend: self.backend,
            blend: self.blend,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct VideoOptions {
    fps: f64,
    fixed_noise: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct EvalOptions {
    samples: usize,
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Usage => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn run(cli: Cli) -> Result<u8> {
    let file = cli.config.as_deref().map(ConfigFile::load).transpose()?;
    let file = file.as_ref();
    match cli.command {
        Command::Synth(a) => synth(a, file),
        Command::Train(a) => train(a, file),
        Command::Visualize(a) => visualize(a, file),
        Command::Transfer(a) => transfer(a, file),
        Command::Video(a) => video(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Prints the machine-readable `key=value` summary of a run.
fn summary(pairs: &[(&str, String)]) {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", body.join(" "));
}

fn versions() -> Value {
    json!({
        "musart": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "debug_assertions": cfg!(debug_assertions),
        "threads": 1,
    })
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_file(
        path,
        serde_json::to_string_pretty(v)
            .expect("json serializes")
            .as_bytes(),
    )
}

/// `<out>.run.json` next to a single-file output.
fn write_sidecar(out: &Path, command: &str, resolved: Value) -> Result<()> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    write_json(
        &out.with_file_name(name),
        &json!({ "command": command, "config": resolved, "versions": versions() }),
    )
}

fn synth(a: SynthArgs, file: Option<&ConfigFile>) -> Result<u8> {
    let cfg: SynthConfig = resolve(
        &SynthConfig::default(),
        file,
        "synth",
        flags([
            ("n_classes", opt(&a.classes)),
            ("per_class", opt(&a.per_class)),
            ("seed", opt(&a.seed)),
            ("music_seconds", opt(&a.music_seconds)),
            ("image_size", opt(&a.image_size)),
        ]),
    )?;
    let s = synth_generate(&cfg, &a.out)?;
    write_json(
        &a.out.join(VERSIONS_FILE),
        &json!({ "config": cfg, "versions": versions() }),
    )?;
    summary(&[
        ("command", "synth".into()),
        ("manifest", s.manifest.display().to_string()),
        ("music", s.music.to_string()),
        ("images", s.images.to_string()),
        ("seed", cfg.seed.to_string()),
    ]);
    Ok(0)
}

fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::StyleOnly => "style",
        Ablation::ClsTrip => "cls_trip",
        Ablation::Full => "full",
    }
}

fn train(a: TrainArgs, file: Option<&ConfigFile>) -> Result<u8> {
    let ablation = a
        .ablation
        .as_deref()
        .map(str::parse::<Ablation>)
        .transpose()?;
    let defaults = TrainConfig {
        model: MVNetConfig::desk(),
        ..TrainConfig::default()
    };
    let mut cfg: TrainConfig = resolve(
        &defaults,
        file,
        "train",
        flags([
            ("epochs", opt(&a.epochs)),
            ("lr", opt(&a.lr)),
            ("batch", opt(&a.batch)),
            ("seed", opt(&a.seed)),
            ("ablation", opt(&ablation)),
            ("weights.w_tri", opt(&a.w_tri)),
            ("weights.w_sty", opt(&a.w_sty)),
            ("weights.w_cls", opt(&a.w_cls)),
            ("eval_samples", opt(&a.eval_samples)),
            ("model", opt(&a.model.map(ModelPreset::config))),
        ]),
    )?;
    if let Some(k) = a.classes {
        cfg.model.n_classes = k;
    }
    let manifest = load_manifest(&a.manifest)?;
    let corpus = Corpus::load(&manifest)?;
    let (state, report, run_dir) = match &a.resume {
        Some(ck) => {
            let run_dir = a
                .run_dir
                .clone()
                .unwrap_or_else(|| ck.parent().unwrap_or(Path::new(".")).to_path_buf());
            let (state, report) = resume(ck, &corpus, a.epochs, &run_dir)?;
            (state, report, run_dir)
        }
        None => {
            let run_dir = a.run_dir.clone().unwrap_or_else(|| {
                let root = std::env::var_os(RUN_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(format!(
                    "train-{}-seed{}",
                    ablation_name(cfg.ablation),
                    cfg.seed
                ))
            });
            let mut state = TrainState::new(&cfg)?;
            let report = train_from(&mut state, &corpus, &cfg, &run_dir)?;
            (state, report, run_dir)
        }
    };
    write_json(
        &run_dir.join(VERSIONS_FILE),
        &json!({ "seed": cfg.seed, "manifest": a.manifest, "versions": versions() }),
    )?;
    let mut pairs = vec![
        ("command", "train".to_string()),
        ("run_dir", run_dir.display().to_string()),
        ("epochs", state.epoch.to_string()),
        ("steps", state.step.to_string()),
        ("seed", cfg.seed.to_string()),
        ("ablation", ablation_name(cfg.ablation).to_string()),
    ];
    if let Some(last) = report.epochs.last() {
        pairs.push(("total", format!("{:.6}", last.losses.total)));
        if let Some(acc) = last.era_accuracy {
            pairs.push(("era_accuracy", format!("{acc:.4}")));
        }
    }
    if a.decoder_steps > 0 {
        let images: Vec<ImageTensor> = corpus
            .images
            .iter()
            .map(|t| {
                ImageTensor::clamped(resize_rgb(t, IMAGE_SIZE, IMAGE_SIZE).map(|v| 2.0 * v - 1.0))
            })
            .collect::<Result<_>>()?;
        let mut dec = Decoder::for_extractor(&state.extractor, cfg.seed)?;
        let dcfg = DecoderTrainConfig {
            max_steps: a.decoder_steps,
            seed: cfg.seed,
            ..DecoderTrainConfig::default()
        };
        let rep = train_decoder(&state.extractor, &mut dec, &images, &dcfg)?;
        let mut ck = Checkpoint::new(json!({ "extractor": state.extractor.meta() }));
        dec.write_checkpoint(&mut ck);
        ck.save(&run_dir.join(DECODER_FILE))?;
        pairs.push(("decoder_steps", rep.steps.to_string()));
        pairs.push(("decoder_rel_rms", format!("{:.6}", rep.rel_rms)));
    }
    summary(&pairs);
    Ok(0)
}

/// The network plus the extractor its checkpoint was trained with, if any.
fn load_net(n: &NetArgs, seed: u64) -> Result<(MVNet, Option<FeatureExtractor>)> {
    match &n.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let net = MVNet::from_checkpoint(&ck)?;
            let fx = ck
                .meta
                .get("extractor")
                .map(FeatureExtractor::from_meta)
                .transpose()?;
            Ok((net, fx))
        }
        None => Ok((MVNet::new(n.model.config(), seed)?, None)),
    }
}

/// Decoder from `--decoder`, else `decoder.ck` beside the checkpoint, else an
/// untrained decoder.
fn load_transfer(
    n: &NetArgs,
    decoder: Option<&Path>,
    fx: Option<FeatureExtractor>,
    seed: u64,
) -> Result<StyleTransfer> {
    let sibling = n
        .checkpoint
        .as_ref()
        .map(|c| c.with_file_name(DECODER_FILE))
        .filter(|p| p.exists());
    match decoder.map(Path::to_path_buf).or(sibling) {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let dec = Decoder::from_checkpoint(&ck).map_err(|e| match e {
                Error::Checkpoint { reason, .. } => Error::Checkpoint {
                    path: path.clone(),
                    reason,
                },
                other => other,
            })?;
            let fx = match ck.meta.get("extractor") {
                Some(m) => FeatureExtractor::from_meta(m)?,
                None => fx.unwrap_or_else(|| FeatureExtractor::new(seed)),
            };
            Ok(StyleTransfer::new(fx, dec))
        }
        None => {
            log::warn!("no decoder checkpoint found; using an untrained decoder");
            let fx = fx.unwrap_or_else(|| FeatureExtractor::new(seed));
            let dec = Decoder::for_extractor(&fx, seed)?;
            Ok(StyleTransfer::new(fx, dec))
        }
    }
}

fn style_options(s: &StyleArgs, file: Option<&ConfigFile>) -> Result<StyleOptions> {
    let o: StyleOptions = resolve(
        &StyleOptions::defaults(),
        file,
        "style",
        flags([
            ("seed", opt(&s.seed)),
            ("backend", opt(&s.backend)),
            ("blend", opt(&s.blend)),
        ]),
    )?;
    o.transfer().validate()?;
    Ok(o)
}

fn visualize(a: VisualizeArgs, file: Option<&ConfigFile>) -> Result<u8> {
    let style = StyleArgs {
        seed: a.seed,
        backend: None,
        blend: None,
        decoder: None,
    };
    let o = style_options(&style, file)?;
    let (net, _) = load_net(&a.net, o.seed)?;
    let mel = MelFrontend::new().from_file(&a.music, SEGMENT_START)?;
    let z = net.noise(&mut ChaCha8Rng::seed_from_u64(o.seed));
    let img = net.visualize(&mel, &z)?;
    img.save_png(&a.out)?;
    write_sidecar(
        &a.out,
        "visualize",
        json!({ "seed": o.seed, "checkpoint": a.net.checkpoint, "music": a.music }),
    )?;
    summary(&[
        ("command", "visualize".into()),
        ("out", a.out.display().to_string()),
        ("seed", o.seed.to_string()),
    ]);
    Ok(0)
}

fn transfer(a: TransferArgs, file: Option<&ConfigFile>) -> Result<u8> {
    let o = style_options(&a.style, file)?;
    let (net, fx) = load_net(&a.net, o.seed)?;
    let st = load_transfer(&a.net, a.style.decoder.as_deref(), fx, o.seed)?;
    let content = ImageTensor::load(&a.content)?;
    let mel = MelFrontend::new().from_file(&a.music, SEGMENT_START)?;
    let z = net.noise(&mut ChaCha8Rng::seed_from_u64(o.seed));
    let (out, style) = st.stylize(&content, &mel, &net, &z, &o.transfer())?;
    out.image.save_png(&a.out)?;
    if let Some(p) = &a.style_out {
        style.save_png(p)?;
    }
    write_sidecar(
        &a.out,
        "transfer",
        json!({ "style": o, "checkpoint": a.net.checkpoint, "content": a.content, "music": a.music }),
    )?;
    summary(&[
        ("command", "transfer".into()),
        ("out", a.out.display().to_string()),
        ("backend", o.backend.to_string()),
        ("blend", o.blend.to_string()),
        ("seed", o.seed.to_string()),
        ("fell_back", out.fell_back.to_string()),
    ]);
    Ok(0)
}

fn video(a: VideoArgs, file: Option<&ConfigFile>) -> Result<u8> {
    let o = style_options(&a.style, file)?;
    let dv = VideoConfig::default();
    let v: VideoOptions = resolve(
        &VideoOptions {
            fps: dv.fps,
            fixed_noise: dv.fixed_noise,
        },
        file,
        "video",
        flags([
            ("fps", opt(&a.fps)),
            ("fixed_noise", a.fresh_noise.then_some(Value::Bool(false))),
        ]),
    )?;
    let (net, fx) = load_net(&a.net, o.seed)?;
    let st = load_transfer(&a.net, a.style.decoder.as_deref(), fx, o.seed)?;
    let frames: Vec<ImageTensor> = load_frames(&a.frames)?
        .into_iter()
        .map(|(_, f)| f)
        .collect();
    let audio = load_audio(&a.music)?;
    let cfg = VideoConfig {
        fps: v.fps,
        seed: o.seed,
        transfer: o.transfer(),
        fixed_noise: v.fixed_noise,
    };
    let out = transfer_video(&frames, &audio, &net, &st, &cfg)?;
    write_frames(&a.out, &out)?;
    write_json(
        &a.out.join(VERSIONS_FILE),
        &json!({ "config": cfg, "checkpoint": a.net.checkpoint, "music": a.music, "versions": versions() }),
    )?;
    summary(&[
        ("command", "video".into()),
        ("out", a.out.display().to_string()),
        ("frames", out.len().to_string()),
        ("fps", v.fps.to_string()),
        ("seed", o.seed.to_string()),
        ("fixed_noise", v.fixed_noise.to_string()),
    ]);
    Ok(0)
}

fn eval(a: EvalArgs, file: Option<&ConfigFile>) -> Result<u8> {
    let o: EvalOptions = resolve(
        &EvalOptions {
            samples: 200,
            seed: 0,
        },
        file,
        "eval",
        flags([("samples", opt(&a.samples)), ("seed", opt(&a.seed))]),
    )?;
    let net = MVNet::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let corpus = Corpus::load(&load_manifest(&a.manifest)?)?;
    let music = labelled_music(&corpus);
    let acc = eval_era_accuracy(
        &net,
        &music,
        o.samples,
        &mut ChaCha8Rng::seed_from_u64(o.seed),
    )?;
    let classes = corpus.num_classes_present();
    summary(&[
        ("command", "eval".into()),
        ("checkpoint", a.checkpoint.display().to_string()),
        ("samples", o.samples.to_string()),
        ("classes", classes.to_string()),
        ("chance", format!("{:.4}", 1.0 / classes.max(1) as f64)),
        ("accuracy", format!("{acc:.4}")),
    ]);
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Error::invalid(format!("eps {} must be positive", a.eps)));
    }
    let results = gradsuite::run(a.eps, a.seed)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict} {:<32} max_rel_err={:.3e} checked={} kinks={}",
            r.name, r.report.max_rel_err, r.report.checked, r.report.kinks
        );
    }
    let worst = results
        .iter()
        .map(|r| r.report.max_rel_err)
        .fold(0.0, f64::max);
    summary(&[
        ("command", "gradcheck".into()),
        ("checks", results.len().to_string()),
        ("failed", failed.to_string()),
        ("max_rel_err", format!("{worst:.3e}")),
        ("tolerance", format!("{:.0e}", gradsuite::TOLERANCE)),
    ]);
    Ok(if failed == 0 {
        0
    } else {
        exit_code(ErrorCategory::Numeric)
    })
}
