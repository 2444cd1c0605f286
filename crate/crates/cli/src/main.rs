//! `pseudoflow` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gradcore::GradCheckConfig;
use pseudoflow::dataio::{
    flow_to_rgb, generate_clips, generate_dataset, load_split, read_flo, read_frames, read_png, write_flo,
    write_frames, write_png, Domain, SceneConfig, Split,
};
use pseudoflow::evalmetrics::{evaluate_run, EvalConfig, DEFAULT_ALPHA};
use pseudoflow::experiment::{preset, run_ablation, video_to_labels, Variant};
use pseudoflow::flowsynth::{scale_spec, synthesize_flow, FlowMode, FlowSpec};
use pseudoflow::gradsuite::gradient_suite;
use pseudoflow::models::Network;
use pseudoflow::trainer::{frame_translator, translate_sequence, TrainConfig, TrainData, Trainer};
use pseudoflow::warp::{backward_warp, Border};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "pseudoflow", version, about = "Unpaired video translation with synthetic-flow consistency")]
struct Cli {
    /// print errors as one JSON object per line on stderr
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural two-domain dataset to disk
    DatasetGen(DatasetGen),
    /// Write one synthetic flow field as .flo plus a color PNG
    SynthFlow(SynthFlow),
    /// Backward-warp a PNG by a .flo field
    Warp(WarpCmd),
    /// Train both generators and discriminators
    Train(Train),
    /// Translate a clip directory frame by frame
    Translate(Translate),
    /// Score a trained generator on a dataset split
    Eval(Eval),
    /// Finite-difference check of every op, the warp and a toy generator
    Gradcheck(Gradcheck),
    /// Train and score a preset matrix of variants over several seeds
    Ablate(Ablate),
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// TOML file with scene settings; flags below override it
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    val_clips: Option<usize>,
    /// std of i.i.d. noise on domain X frames
    #[arg(long)]
    sensor_noise: Option<f64>,
}

impl SceneArgs {
    fn resolve(&self) -> anyhow::Result<SceneConfig> {
        let mut c = match &self.scene {
            Some(p) => {
                let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&s).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => SceneConfig::default(),
        };
        if let Some(v) = self.width {
            c.width = v;
        }
        if let Some(v) = self.height {
            c.height = v;
        }
        if let Some(v) = self.frames {
            c.frames_per_clip = v;
        }
        if let Some(v) = self.train_clips {
            c.train_clips = v;
        }
        if let Some(v) = self.val_clips {
            c.val_clips = v;
        }
        if let Some(v) = self.sensor_noise {
            c.sensor_noise = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct DatasetGen {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scene: SceneArgs,
    /// splits to render
    #[arg(long, value_delimiter = ',', default_values = ["train", "val"])]
    splits: Vec<SplitArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    TranslationOnly,
    ScalingOnly,
}

#[derive(Args, Debug)]
struct SynthFlow {
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// debug rendering; defaults to the .flo path with a .png extension
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    mode: ModeArg,
    /// use the parameters as given instead of rescaling them to the resolution
    #[arg(long)]
    no_auto_scale: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BorderArg {
    Clamp,
    Zero,
}

#[derive(Args, Debug)]
struct WarpCmd {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    flow: PathBuf,
    /// defaults to `<image>_warped.png`
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "clamp")]
    border: BorderArg,
}

#[derive(Args, Debug)]
struct Train {
    /// dataset root written by dataset-gen
    #[arg(long)]
    data: PathBuf,
    /// TOML training config; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory for checkpoints, log and resolved config
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// start from the video-to-labels defaults (X side suppressed, cycle on)
    #[arg(long)]
    video_to_labels: bool,
    /// continue from a training checkpoint instead of starting fresh
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Direction {
    /// X frames through G_Y
    X2y,
    /// Y frames through G_X
    Y2x,
}

#[derive(Args, Debug)]
struct Translate {
    /// training checkpoint or saved network
    #[arg(long)]
    checkpoint: PathBuf,
    /// clip directory
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "x2y")]
    direction: Direction,
}

#[derive(Args, Debug)]
struct Eval {
    /// training checkpoint or saved network; omit to score the untranslated source
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "x2y")]
    direction: Direction,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// report path stem; `.json` and `.csv` are written
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Gradcheck {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct Ablate {
    /// wrong-flow, no-noise, flow-modes, losses, directions or all
    #[arg(long)]
    preset: String,
    /// dataset root; generated in memory from the scene flags when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[command(flatten)]
    scene: SceneArgs,
    /// base training config; defaults to the video-to-labels setup
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    max_iterations: Option<u64>,
    /// generator and discriminator base width
    #[arg(long)]
    net_width: Option<usize>,
    /// report JSON path
    #[arg(long)]
    out: PathBuf,
}

/// An error the user can fix by changing arguments or config.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<pseudoflow::Error>() {
        Some(pseudoflow::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn log_resolved(command: &str, config: serde_json::Value) {
    eprintln!("{}", json!({ "command": command, "resolved": config }));
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                eprintln!("{}", json!({ "error": "usage", "code": 2, "message": e.to_string().trim() }));
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    if let Err(e) = configure_threads() {
        return report(&e, cli.json);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e, cli.json),
    }
}

fn report(e: &anyhow::Error, json_errors: bool) -> ExitCode {
    let code = exit_code(e);
    if json_errors {
        let kind = if code == 2 { "usage" } else { "runtime" };
        eprintln!("{}", json!({ "error": kind, "code": code, "message": format!("{e:#}") }));
    } else {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(code)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("PSEUDOFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("PSEUDOFLOW_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::DatasetGen(a) => dataset_gen(a),
        Command::SynthFlow(a) => synth_flow(a),
        Command::Warp(a) => warp(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn dataset_gen(a: DatasetGen) -> anyhow::Result<()> {
    let scene = a.scene.resolve()?;
    let splits: Vec<Split> = a.splits.iter().map(|&s| s.into()).collect();
    log_resolved("dataset-gen", json!({ "seed": a.seed, "scene": scene, "out": a.out }));
    let m = generate_dataset(&scene, a.seed, &splits, &a.out)?;
    let clips: usize = m.clips.values().map(Vec::len).sum();
    println!("wrote {clips} clips to {}", a.out.display());
    Ok(())
}

fn synth_flow(a: SynthFlow) -> anyhow::Result<()> {
    let mode = match a.mode {
        ModeArg::Full => FlowMode::Full,
        ModeArg::TranslationOnly => FlowMode::TranslationOnly,
        ModeArg::ScalingOnly => FlowMode::ScalingOnly,
    };
    let base = FlowSpec { mode, auto_scale: !a.no_auto_scale, ..FlowSpec::default() };
    let spec = scale_spec(&base, a.width, a.height);
    log_resolved("synth-flow", json!({ "seed": a.seed, "width": a.width, "height": a.height, "spec": spec }));
    let flow = synthesize_flow(&spec, a.width, a.height, a.seed)?;
    write_flo(&a.out, &flow)?;
    let png = a.png.unwrap_or_else(|| a.out.with_extension("png"));
    write_png(&png, &flow_to_rgb(&flow, None))?;
    println!("{} (max |f| = {:.3} px), {}", a.out.display(), flow.max_abs(), png.display());
    Ok(())
}

fn warp(a: WarpCmd) -> anyhow::Result<()> {
    let img = read_png(&a.image)?;
    let flow = read_flo(&a.flow)?;
    let border = match a.border {
        BorderArg::Clamp => Border::Clamp,
        BorderArg::Zero => Border::Zero,
    };
    let out = a.out.unwrap_or_else(|| {
        let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.image.with_file_name(format!("{stem}_warped.png"))
    });
    log_resolved("warp", json!({ "image": a.image, "flow": a.flow, "border": format!("{border:?}"), "out": out }));
    write_png(&out, &backward_warp(&img, &flow, border)?)?;
    println!("{}", out.display());
    Ok(())
}

fn read_train_config(path: Option<&Path>) -> anyhow::Result<Option<TrainConfig>> {
    path.map(|p| {
        let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        TrainConfig::from_toml(&s).with_context(|| format!("config {}", p.display()))
    })
    .transpose()
}

fn train(a: Train) -> anyhow::Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::load_checkpoint(p)?,
        None => {
            let mut cfg = read_train_config(a.config.as_deref())?.unwrap_or_default();
            if a.video_to_labels {
                cfg = video_to_labels(cfg);
            }
            Trainer::new(override_train(cfg, &a))?
        }
    };
    if a.resume.is_some() {
        trainer.cfg = override_train(trainer.cfg.clone(), &a);
        trainer.cfg.validate()?;
    }
    let toml = trainer.cfg.to_toml();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), &toml)?;
    log_resolved("train", serde_json::to_value(&trainer.cfg)?);
    let data = TrainData::load(&a.data)?;
    let end = trainer.planned_iterations(&data);
    let every = (end / 20).max(1);
    trainer.run(&data, |row| {
        if (row.iteration + 1) % every == 0 || row.iteration + 1 == end {
            eprintln!("iter {:>7}/{end} total {:.4}", row.iteration + 1, row.losses.total);
        }
    })?;
    println!("{}", a.out.join("checkpoints/final.ckpt").display());
    Ok(())
}

fn override_train(mut cfg: TrainConfig, a: &Train) -> TrainConfig {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.paths.checkpoint_dir = Some(a.out.join("checkpoints"));
    cfg.paths.log = Some(a.out.join("log.csv"));
    cfg
}

/// The generator for `direction` from a training checkpoint or a saved network.
fn load_generator(path: &Path, direction: Direction) -> anyhow::Result<Network<f32>> {
    match Trainer::load_checkpoint(path) {
        Ok(t) => Ok(match direction {
            Direction::X2y => t.models.g_y,
            Direction::Y2x => t.models.g_x,
        }),
        Err(pseudoflow::Error::Format { .. }) => Network::load(path)
            .with_context(|| format!("{} is neither a training checkpoint nor a network", path.display())),
        Err(e) => Err(e.into()),
    }
}

fn translate(a: Translate) -> anyhow::Result<()> {
    let net = load_generator(&a.checkpoint, a.direction)?;
    let clip = read_frames(&a.input)?;
    let want = match a.direction {
        Direction::X2y => Domain::X,
        Direction::Y2x => Domain::Y,
    };
    if clip.domain != want {
        return Err(usage(format!("{} holds {:?} frames; direction expects {want:?}", a.input.display(), clip.domain)));
    }
    log_resolved(
        "translate",
        json!({ "checkpoint": a.checkpoint, "input": a.input, "out": a.out, "direction": format!("{:?}", a.direction).to_lowercase() }),
    );
    let out = translate_sequence(frame_translator(&net), &clip)?;
    write_frames(&a.out, &out)?;
    println!("{} frames to {}", out.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let domain = match a.direction {
        Direction::X2y => Domain::X,
        Direction::Y2x => Domain::Y,
    };
    let clips = load_split(&a.data, domain, a.split.into())?;
    let echo = json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "split": format!("{:?}", a.split).to_lowercase(),
        "direction": format!("{:?}", a.direction).to_lowercase(),
        "alpha": a.alpha,
    });
    log_resolved("eval", echo.clone());
    let cfg = EvalConfig { alpha: a.alpha, echo, ..EvalConfig::default() };
    let report = match &a.checkpoint {
        Some(p) => {
            let net = load_generator(p, a.direction)?;
            evaluate_run(frame_translator(&net), &clips, &cfg)?
        }
        None => evaluate_run(|f: &gradcore::Tensor<f32>| Ok(f.clone()), &clips, &cfg)?,
    };
    report.write(&a.out)?;
    println!(
        "{}",
        json!({
            "warping_error": report.warping_error.value,
            "mp": report.mp.value,
            "ac": report.ac.value,
            "miou": report.miou.value,
        })
    );
    Ok(())
}

fn gradcheck(a: Gradcheck) -> anyhow::Result<()> {
    let cfg = GradCheckConfig { tolerance: a.tolerance, seed: a.seed, ..GradCheckConfig::default() };
    log_resolved("gradcheck", json!({ "cases": a.cases, "seed": a.seed, "tolerance": a.tolerance }));
    let report = gradient_suite(a.cases, &cfg)?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed"))
    }
}

fn ablate(a: Ablate) -> anyhow::Result<()> {
    let variants: Vec<Variant> = preset(&a.preset).map_err(|e| usage(e.to_string()))?;
    let mut base = read_train_config(a.config.as_deref())?.unwrap_or_else(|| video_to_labels(TrainConfig::default()));
    if let Some(v) = a.max_iterations {
        base.max_iterations = v;
    }
    if let Some(w) = a.net_width {
        base.generator.base_width = w;
        base.discriminator.base_width = w;
    }
    base.paths = Default::default();
    base.validate()?;
    let (data, val) = match &a.data {
        Some(root) => (TrainData::load(root)?, load_split(root, Domain::X, Split::Val)?),
        None => {
            let scene = a.scene.resolve()?;
            let x = generate_clips(&scene, a.data_seed, Domain::X, Split::Train)?;
            let y = generate_clips(&scene, a.data_seed, Domain::Y, Split::Train)?;
            let val = generate_clips(&scene, a.data_seed, Domain::X, Split::Val)?;
            (TrainData::from_clips(&x, &y), val)
        }
    };
    if val.is_empty() {
        return Err(usage("ablation needs validation clips with ground truth"));
    }
    log_resolved(
        "ablate",
        json!({
            "preset": a.preset,
            "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "seeds": a.seeds,
            "data": a.data,
            "data_seed": a.data_seed,
            "base": base,
        }),
    );
    let report = run_ablation(&base, &variants, &a.seeds, &data, &val, |r| {
        eprintln!(
            "{:<16} seed {:<3} warping error {:.5}  mIoU {:.4}  ({:.0}s)",
            r.variant.name(),
            r.seed,
            r.warping_error,
            r.miou,
            r.train_seconds
        );
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, serde_json::to_string_pretty(&report)? + "\n")?;
    for s in &report.summary {
        println!(
            "{:<16} median warping error {:.5}  median mIoU {:.4}",
            s.variant.name(),
            s.median_warping_error,
            s.median_miou
        );
    }
    Ok(())
}
