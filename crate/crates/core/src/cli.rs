//! Command-line driver: configuration, commands and on-disk layout.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 unmet precondition,
//! 4 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_cloudnet_pairs, build_flownet_pairs, generate_synthetic_sequence, load_sequence, split_train_test,
    SyntheticSceneSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_predictions, evaluate_test_set, flow_histogram_compare};
use crate::neural::{
    load_checkpoint, save_checkpoint, train_cloudnet, train_flownet, LossReport, Role, TrainConfig, UNetConfig,
    UNetModel, DEFAULT_WIDTHS,
};
use crate::optical_flow::{save_flow, FarnebackParams};
use crate::sky_image::{
    expand_ldr, load_pfm, load_png, normalize_hdr, save_pfm, save_png, SkyImage, ToneCurve, DEFAULT_CLOUD_THRESHOLD,
};
use crate::sphere_map::{FisheyeProjection, ProjectionKind};
use crate::temporal_engine::{
    synthesize_with, Manifest, SequenceConfig, DEFAULT_DELTA_T, DEFAULT_INPAINT_ITERATIONS, DEFAULT_SUBSTEPS,
};

pub const CONFIG_VERSION: u32 = 1;
pub const HOME_ENV: &str = "DYNCLOUD_HOME";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Everything a run needs. Precedence: command-line flags, then this
/// document, then the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Image side in pixels; taken from the data or checkpoints when unset.
    pub resolution: Option<usize>,
    pub projection: ProjectionKind,
    pub delta_t: f64,
    pub keyframes: usize,
    pub substeps: usize,
    pub tone_curve: ToneCurve,
    pub peak: f64,
    pub farneback: FarnebackParams,
    pub cloud_threshold: f32,
    pub inpaint_iterations: usize,
    /// Encoder widths shared by both networks; one stage per halving down
    /// to 1×1 when unset.
    pub widths: Option<Vec<usize>>,
    /// `train.seed` is replaced by the top-level `seed`.
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub paths: PathsConfig,
    /// When false, a fresh seed is drawn from the OS for every run.
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            resolution: None,
            projection: ProjectionKind::Equidistant,
            delta_t: DEFAULT_DELTA_T,
            keyframes: 1,
            substeps: DEFAULT_SUBSTEPS,
            tone_curve: ToneCurve::identity(),
            peak: 1.0,
            farneback: FarnebackParams::default(),
            cloud_threshold: DEFAULT_CLOUD_THRESHOLD,
            inpaint_iterations: DEFAULT_INPAINT_ITERATIONS,
            widths: None,
            train: TrainConfig::default(),
            train_fraction: 0.8,
            paths: PathsConfig::default(),
            deterministic: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.root())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        self.train.validate()?;
        let probe = self.sequence_config(self.resolution.unwrap_or(256));
        probe.validate()?;
        if let Some(r) = self.resolution {
            self.unet_config(Role::FlowNet, r).validate()?;
        }
        Ok(())
    }

    pub fn sequence_config(&self, resolution: usize) -> SequenceConfig {
        SequenceConfig {
            delta_t: self.delta_t,
            keyframes: self.keyframes,
            substeps: self.substeps,
            projection: FisheyeProjection {
                resolution,
                kind: self.projection,
            },
            tone_curve: self.tone_curve,
            peak: self.peak,
            farneback: self.farneback,
            cloud_threshold: self.cloud_threshold,
            inpaint_iterations: self.inpaint_iterations,
        }
    }

    pub fn unet_config(&self, role: Role, resolution: usize) -> UNetConfig {
        let widths = match &self.widths {
            Some(w) => w.clone(),
            None => {
                let depth = (resolution.max(2).ilog2() as usize).min(DEFAULT_WIDTHS.len());
                DEFAULT_WIDTHS[..depth].to_vec()
            }
        };
        UNetConfig::for_role(role, resolution).with_widths(&widths)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        if let Some(p) = &self.paths.checkpoints {
            return p.clone();
        }
        match std::env::var_os(HOME_ENV) {
            Some(home) if !home.is_empty() => PathBuf::from(home).join("checkpoints"),
            _ => PathBuf::from("checkpoints"),
        }
    }
}

pub fn checkpoint_path(dir: &Path, role: Role) -> PathBuf {
    dir.join(format!("{}.ckpt", role.label()))
}

pub fn frame_name(index: usize, ext: &str) -> String {
    format!("frame_{index:06}.{ext}")
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::NumericFailure { .. } => EXIT_NUMERIC,
        Error::Config(_) | Error::File { .. } | Error::Format { .. } | Error::Io(_) | Error::Json(_) | Error::Image(_) => {
            EXIT_USAGE
        }
        _ => EXIT_PRECONDITION,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dyncloud", version, about = "Animated cloudy-sky environment maps from a single fisheye image")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural sequence with ground-truth flow.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train FlowNet or CloudNet on a sequence directory.
    Train(TrainArgs),
    /// Animate one sky image into a frame sequence.
    Synthesize(SynthesizeArgs),
    /// Next-frame metrics on a test sequence.
    Evaluate(EvaluateArgs),
    /// Compare flow-magnitude distributions of two sequences.
    Histogram(HistogramArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint directory; defaults to $DYNCLOUD_HOME/checkpoints.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    /// Scene description (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub frames: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scene seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub role: Role,
    /// Sequence directory; the earliest frames are used for training.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// PNG (display range) or PFM (HDR) sky image.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub keyframes: Option<usize>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Test sequence directory.
    #[arg(long)]
    pub test: PathBuf,
    /// Score a predictor that returns the true next frame.
    #[arg(long)]
    pub perfect_stub: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Keep every n-th generated frame (e.g. the substep count to compare
    /// keyframes only).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub generated_stride: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    /// Upper edge of the last bin in pixels per interval.
    #[arg(long, default_value_t = 8.0)]
    pub max_magnitude: f64,
    /// CSV destination.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn resolve(common: &CommonArgs) -> Result<PipelineConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(dir) = &common.checkpoints {
        cfg.paths.checkpoints = Some(dir.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if !cfg.deterministic {
        cfg.seed = rand::random();
        eprintln!("seed {}", cfg.seed);
    }
    Ok(cfg)
}

fn output_dir(flag: Option<&Path>, cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.output.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set paths.output".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e.to_string()))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e.to_string()))
}

#[derive(Serialize)]
struct SyntheticManifest<'a> {
    version: u32,
    resolution: usize,
    interval: f64,
    seed: u64,
    frames: Vec<String>,
    flows: Vec<String>,
    spec: &'a SyntheticSceneSpec,
}

pub fn cmd_make_synthetic(args: &MakeSyntheticArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec).map_err(|e| Error::file(&args.spec, e.to_string()))?;
    let mut spec: SyntheticSceneSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", args.spec.display())))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let synth = generate_synthetic_sequence(&spec, args.frames as usize)?;
    let out = &args.out;
    crate::dataset::save_sequence(&synth.sequence, out)?;
    let flow_dir = out.join("flow");
    fs::create_dir_all(&flow_dir)?;
    let mut flows = Vec::new();
    for (i, f) in synth.ground_truth.iter().enumerate() {
        let name = format!("flow/{i:06}.skfl");
        save_flow(f, &out.join(&name))?;
        flows.push(name);
    }
    let manifest = SyntheticManifest {
        version: 1,
        resolution: spec.resolution,
        interval: spec.interval,
        seed: spec.seed,
        frames: (0..synth.sequence.len())
            .map(|i| format!("frames/{}", crate::dataset::frame_file_name(i)))
            .collect(),
        flows,
        spec: &spec,
    };
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} frames to {}", synth.sequence.len(), out.display());
    Ok(())
}

pub fn loss_history_csv(history: &[LossReport]) -> String {
    let mut s = String::from("epoch,mse,cosine,total\n");
    for (i, h) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, h.mse, h.cosine, h.total);
    }
    s
}

fn load_model(path: &Path, role: Role) -> Result<UNetModel> {
    let model = load_checkpoint(path)?;
    if model.role != role {
        return Err(Error::file(
            path,
            format!("holds a {} model, expected {}", model.role.label(), role.label()),
        ));
    }
    Ok(model)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(d) = &args.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let dataset = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --dataset or set paths.dataset".into()))?;
    let ckpt_dir = cfg.checkpoint_dir();
    let flownet_path = checkpoint_path(&ckpt_dir, Role::FlowNet);
    if args.role == Role::CloudNet && !flownet_path.is_file() {
        return Err(Error::Precondition(format!(
            "CloudNet training needs a FlowNet checkpoint at {}",
            flownet_path.display()
        )));
    }
    if !dataset.is_dir() {
        return Err(Error::file(&dataset, "dataset directory not found"));
    }
    let seq = load_sequence(&dataset, None)?;
    let res = seq.resolution();
    if let Some(r) = cfg.resolution.filter(|&r| r != res) {
        return Err(Error::Precondition(format!("dataset resolution {res} differs from configured {r}")));
    }
    let (train, _) = split_train_test(&seq, cfg.train_fraction)?;
    let unet = cfg.unet_config(args.role, res);
    let tcfg = cfg.train_config();
    let outcome = match args.role {
        Role::FlowNet => {
            let pairs = build_flownet_pairs(&train, &cfg.farneback, cfg.cloud_threshold)?;
            train_flownet(&pairs, &unet, &tcfg)?
        }
        Role::CloudNet => {
            let flownet = load_model(&flownet_path, Role::FlowNet)?;
            if flownet.config.resolution != res {
                return Err(Error::Precondition(format!(
                    "FlowNet checkpoint resolution {} differs from dataset {res}",
                    flownet.config.resolution
                )));
            }
            let triples = build_cloudnet_pairs(&train, &flownet)?;
            train_cloudnet(&triples, &unet, &tcfg)?
        }
    };
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::file(&ckpt_dir, e.to_string()))?;
    let path = checkpoint_path(&ckpt_dir, args.role);
    save_checkpoint(&outcome.model, &path)?;
    let csv = ckpt_dir.join(format!("{}_loss.csv", args.role.label()));
    write_file(&csv, loss_history_csv(&outcome.history))?;
    let last = outcome.history.last().copied().unwrap_or_default();
    println!(
        "{}: {} epochs, final loss {:.6e} (mse {:.6e}), checkpoint {}",
        args.role.label(),
        outcome.history.len(),
        last.total,
        last.mse,
        path.display()
    );
    Ok(())
}

fn load_input(path: &Path, curve: &ToneCurve) -> Result<SkyImage> {
    let is_pfm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        normalize_hdr(&load_pfm(path)?, curve)
    } else {
        load_png(path)
    }
}

fn load_pair(cfg: &PipelineConfig) -> Result<(UNetModel, UNetModel)> {
    let dir = cfg.checkpoint_dir();
    let flownet = load_model(&checkpoint_path(&dir, Role::FlowNet), Role::FlowNet)?;
    let cloudnet = load_model(&checkpoint_path(&dir, Role::CloudNet), Role::CloudNet)?;
    if flownet.config.resolution != cloudnet.config.resolution {
        return Err(Error::Precondition(format!(
            "checkpoint resolutions differ: flownet {}, cloudnet {}",
            flownet.config.resolution, cloudnet.config.resolution
        )));
    }
    Ok((flownet, cloudnet))
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(k) = args.keyframes {
        cfg.keyframes = k;
    }
    if let Some(s) = args.substeps {
        cfg.substeps = s;
    }
    cfg.validate()?;
    let out = output_dir(args.out.as_deref(), &cfg)?;
    let input = load_input(&args.input, &cfg.tone_curve)?;
    let (flownet, cloudnet) = load_pair(&cfg)?;
    let res = flownet.config.resolution;
    if input.width() != res {
        return Err(Error::Precondition(format!(
            "input is {}x{} but the checkpoints expect {res}x{res}",
            input.width(),
            input.height()
        )));
    }
    let seq = cfg.sequence_config(res);
    synthesize_with(&input, &flownet, &cloudnet, &seq, |frame| {
        save_png(&frame.image, &out.join(frame_name(frame.index, "png")))?;
        let hdr = expand_ldr(&frame.image, &seq.tone_curve, seq.peak)?;
        save_pfm(&hdr, &out.join(frame_name(frame.index, "pfm")))
    })?;
    let manifest = Manifest::for_config(&seq, res);
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} frames to {}", manifest.frames.len(), out.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    cfg.validate()?;
    let out = output_dir(args.out.as_deref(), &cfg)?;
    let test = load_sequence(&args.test, None)?;
    let report = if args.perfect_stub {
        evaluate_predictions(&test, cfg.peak, |i, _| Ok(test.frames[i + 1].clone()))?
    } else {
        let (flownet, cloudnet) = load_pair(&cfg)?;
        if test.resolution() != flownet.config.resolution {
            return Err(Error::Precondition(format!(
                "test resolution {} differs from checkpoints {}",
                test.resolution(),
                flownet.config.resolution
            )));
        }
        evaluate_test_set(&test, &flownet, &cloudnet)?
    };
    write_file(&out.join("report.json"), report.to_json()?)?;
    let table = report.to_table();
    write_file(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_histogram(args: &HistogramArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    if !(args.max_magnitude.is_finite() && args.max_magnitude > 0.0) {
        return Err(Error::Config(format!("max magnitude must be positive, got {}", args.max_magnitude)));
    }
    let real = load_sequence(&args.real, None)?;
    let generated = load_sequence(&args.generated, None)?;
    let frames: Vec<SkyImage> = generated
        .frames
        .into_iter()
        .step_by(args.generated_stride as usize)
        .collect();
    let bins = args.bins as usize;
    let edges: Vec<f64> = (0..=bins).map(|k| args.max_magnitude * k as f64 / bins as f64).collect();
    let cmp = flow_histogram_compare(&real, &frames, &edges, &cfg.farneback, cfg.cloud_threshold)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e.to_string()))?;
    }
    write_file(&args.out, cmp.to_csv())?;
    println!("frames {} mean_l1 {:.6}", cmp.frames.len(), cmp.mean_distance);
    Ok(())
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
        Command::Train(a) => cmd_train(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Histogram(a) => cmd_histogram(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
