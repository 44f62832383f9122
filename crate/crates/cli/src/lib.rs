//! The `dfc-dit` command line: training, inference, baselines and evaluation.
//!
//! [`run`] parses one invocation and returns its exit code: 0 on success, 1
//! for usage, config and task errors, 2 for I/O and format errors, 3 when the
//! loss turns non-finite. Outputs are written only once every result is in
//! hand, each to a temporary sibling that is then renamed into place.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfc_dit::baselines::{self, DownscaleKind, DownscaleMethod};
use dfc_dit::imageio::{self, HdrImage, LdrImage};
use dfc_dit::pipelines::{self, Checkpoint, Corpus};
use dfc_dit::{Error, LossArch, LossNetwork, Tap, TapSet, Task, TaskConfig, TransformNet, WeightArchive};
use serde_json::json;

pub use config::{load_config, parse_config};

/// Environment variable naming the default loss-network weight archive.
pub const LOSSNET_ENV: &str = "DFC_DIT_LOSSNET";

#[derive(Debug, Parser)]
#[command(name = "dfc-dit", version, about = "Deep feature consistent image transformations")]
struct Cli {
    /// Worker threads; 0 picks one per core, 1 is fully deterministic.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a 1/4 downscaling net on a directory of images.
    TrainDownscale(TrainArgs),
    /// Train a decolorization net on a directory of images.
    TrainDecolorize(TrainArgs),
    /// Tone map one radiance map by training a fresh net on it.
    Tonemap(TonemapArgs),
    /// Run a trained net on an image.
    Apply(ApplyArgs),
    /// Run a classical downscaling or decolorization baseline.
    Baseline(BaselineArgs),
    /// Compare two images and print the score.
    Eval(EvalArgs),
    /// Write the weight-archive header a loss network expects.
    ExportWeightsTemplate(TemplateArgs),
}

#[derive(Debug, Args)]
struct LossNetArgs {
    /// Loss-network weight archive (defaults to $DFC_DIT_LOSSNET).
    #[arg(long)]
    lossnet: Option<PathBuf>,

    /// Use randomly initialised loss-network weights of this architecture
    /// (vgg19, vgg19/N or tiny/W) instead of an archive.
    #[arg(long, value_name = "ARCH", value_parser = parse_arch)]
    random_lossnet: Option<LossArch>,

    #[arg(long, default_value_t = 0)]
    lossnet_seed: u64,
}

/// Overrides for config-file values.
#[derive(Debug, Args)]
struct ConfigFlags {
    /// `key = value` config file; flags win over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "lr")]
    learning_rate: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Side of the square training crops.
    #[arg(long = "size")]
    training_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    eps_log: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Comma-separated loss-network layers, e.g. conv1_1,conv2_1,conv3_1.
    #[arg(long, value_parser = parse_taps)]
    taps: Option<TapSet>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of PNG/PPM/PGM training images.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Where to write the trained net's weight archive.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    #[command(flatten)]
    lossnet: LossNetArgs,
}

#[derive(Debug, Args)]
struct TonemapArgs {
    /// Radiance (.hdr) input.
    #[arg(long = "in")]
    input: PathBuf,
    /// Display image output (.png, .ppm).
    #[arg(long)]
    out: PathBuf,
    /// Also keep the fitted net.
    #[arg(long)]
    save_net: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigFlags,
    #[command(flatten)]
    lossnet: LossNetArgs,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fail unless the net was trained for this task.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Rendering settings for tone-mapping nets.
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    eps_log: Option<f32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineTask {
    Downscale,
    Decolorize,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    task: BaselineTask,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// subsample, box, bilinear, bicubic or lanczos3.
    #[arg(long, default_value = "bicubic", value_parser = parse_method)]
    method: DownscaleKind,
    #[arg(long, default_value_t = 4)]
    factor: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Ssim,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value = "ssim")]
    metric: Metric,
}

#[derive(Debug, Args)]
struct TemplateArgs {
    #[arg(long, default_value = "vgg19", value_parser = parse_arch)]
    arch: LossArch,
    #[arg(long)]
    out: PathBuf,
    /// Write a complete archive with random weights instead of the header.
    #[arg(long)]
    random_seed: Option<u64>,
}

fn parse_arch(s: &str) -> Result<LossArch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_taps(s: &str) -> Result<TapSet, String> {
    Tap::parse_set(s).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<DownscaleKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code and one-line diagnostic.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::UnknownTap(_)
            | Error::TaskMismatch(_)
            | Error::Config(_) => 1,
            Error::Format(_) | Error::Archive { .. } | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("dfc-dit: {}", line.trim_start_matches("error: "));
            return 1;
        }
    };
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Failure::usage(format!("cannot start {} threads: {e}", cli.threads)))
        .and_then(|pool| pool.install(|| dispatch(cli.command)));
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("dfc-dit: {}", f.message.replace('\n', " "));
            f.code
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::TrainDownscale(a) => train(Task::Downscale, a),
        Command::TrainDecolorize(a) => train(Task::Decolorize, a),
        Command::Tonemap(a) => tonemap(a),
        Command::Apply(a) => apply(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => eval(a),
        Command::ExportWeightsTemplate(a) => export_template(a),
    }
}

/// Resolves the task config: defaults, then the config file, then flags.
fn resolve_config(task: Task, flags: &ConfigFlags) -> Result<TaskConfig, Failure> {
    let mut c = match &flags.config {
        Some(path) => load_config(path, task)?,
        None => TaskConfig::for_task(task),
    };
    macro_rules! over {
        ($($field:ident),*) => { $(if let Some(v) = &flags.$field { c.$field = v.clone(); })* };
    }
    over!(
        learning_rate,
        batch_size,
        epochs,
        training_size,
        iterations,
        alpha,
        gamma,
        eps_log,
        seed,
        hidden,
        depth,
        taps
    );
    c.validate()?;
    Ok(c)
}

fn load_lossnet(args: &LossNetArgs) -> Result<LossNetwork, Failure> {
    if let Some(arch) = args.random_lossnet {
        if args.lossnet.is_some() {
            return Err(Failure::usage("--lossnet and --random-lossnet are mutually exclusive"));
        }
        return Ok(LossNetwork::random(arch, args.lossnet_seed));
    }
    let path = args
        .lossnet
        .clone()
        .or_else(|| std::env::var_os(LOSSNET_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .ok_or_else(|| {
            Failure::usage(format!("no loss network: pass --lossnet, set {LOSSNET_ENV} or use --random-lossnet ARCH"))
        })?;
    Ok(LossNetwork::load_weights(path)?)
}

/// Pending output files, committed together after all work has succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn reading(inputs: &[&Path]) -> Self {
        Outputs { files: Vec::new(), inputs: inputs.iter().map(|p| p.to_path_buf()).collect() }
    }

    fn add(&mut self, path: &Path, bytes: Vec<u8>) -> Result<(), Failure> {
        let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
            (Ok(x), Ok(y)) => x == y,
            _ => a == b,
        };
        if let Some(input) = self.inputs.iter().find(|i| same(i, path)) {
            return Err(Failure::usage(format!("refusing to overwrite input {}", input.display())));
        }
        if self.files.iter().any(|(p, _)| p == path) {
            return Err(Failure::usage(format!("{} is named as two outputs", path.display())));
        }
        self.files.push((path.to_path_buf(), bytes));
        Ok(())
    }

    fn add_image(&mut self, path: &Path, image: &LdrImage) -> Result<(), Failure> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let bytes = match ext.as_str() {
            "ppm" | "pgm" | "pnm" => imageio::encode_pnm(image),
            _ => imageio::encode_png(image)?,
        };
        self.add(path, bytes)
    }

    fn add_json(&mut self, path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).expect("report serialises");
        text.push('\n');
        self.add(path, text.into_bytes())
    }

    fn commit(self) -> Result<(), Failure> {
        let failed = |path: &Path, e: std::io::Error| Failure {
            code: 2,
            message: format!("cannot write {}: {e}", path.display()),
        };
        let staged: Vec<PathBuf> = self
            .files
            .iter()
            .map(|(path, _)| {
                let mut tmp = path.as_os_str().to_owned();
                tmp.push(".partial");
                PathBuf::from(tmp)
            })
            .collect();
        for (i, ((path, bytes), tmp)) in self.files.iter().zip(&staged).enumerate() {
            if let Err(e) = std::fs::write(tmp, bytes) {
                staged[..=i].iter().for_each(|t| drop(std::fs::remove_file(t)));
                return Err(failed(path, e));
            }
        }
        for ((path, _), tmp) in self.files.iter().zip(&staged) {
            std::fs::rename(tmp, path).map_err(|e| failed(path, e))?;
        }
        Ok(())
    }
}

fn train(task: Task, args: TrainArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let mut config = resolve_config(task, &args.config)?;
    if let Some(dir) = &args.corpus {
        config.corpus = Some(dir.clone());
    }
    config.output = Some(args.out.clone());
    let dir = config
        .corpus
        .clone()
        .ok_or_else(|| Failure::usage("no corpus: pass --corpus or set `corpus` in the config"))?;
    let lossnet = load_lossnet(&args.lossnet)?;
    let corpus = Corpus::load_dir(&dir, config.training_size)?;
    let (net, report) = match task {
        Task::Downscale => pipelines::train_downscaler(&corpus, &lossnet, &config)?,
        _ => pipelines::train_decolorizer(&corpus, &lossnet, &config)?,
    };
    let mut out = Outputs::reading(&[&dir]);
    out.add(&args.out, net.to_archive().to_bytes())?;
    let mut sidecar = serde_json::to_value(Checkpoint { config, report }).expect("checkpoint serialises");
    sidecar["corpus_images"] = json!(corpus.len());
    sidecar["loss_network"] = json!({ "architecture": lossnet.arch().to_string(), "checksum": lossnet.checksum() });
    sidecar["seconds"] = json!(start.elapsed().as_secs_f64());
    out.add_json(&pipelines::sidecar_path(&args.out), &sidecar)?;
    out.commit()
}

fn tonemap(args: TonemapArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let mut config = resolve_config(Task::Tonemap, &args.config)?;
    config.output = Some(args.out.clone());
    let lossnet = load_lossnet(&args.lossnet)?;
    let hdr = imageio::load_hdr(&args.input)?;
    let result = pipelines::tonemap_online(&hdr, &lossnet, &config)?;
    let mut out = Outputs::reading(&[&args.input]);
    out.add_image(&args.out, &result.image)?;
    if let Some(path) = &args.save_net {
        out.add(path, result.net.to_archive().to_bytes())?;
        let checkpoint = Checkpoint { config: config.clone(), report: result.report.clone() };
        out.add_json(
            &pipelines::sidecar_path(path),
            &serde_json::to_value(checkpoint).expect("checkpoint serialises"),
        )?;
    }
    let report = json!({
        "command": "tonemap",
        "input": args.input,
        "width": hdr.width,
        "height": hdr.height,
        "dynamic_range": hdr.dynamic_range(),
        "config": config,
        "report": result.report,
        "loss_network": { "architecture": lossnet.arch().to_string(), "checksum": lossnet.checksum() },
        "seconds": start.elapsed().as_secs_f64(),
    });
    out.add_json(&pipelines::sidecar_path(&args.out), &report)?;
    out.commit()
}

fn is_hdr(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("hdr"))
}

fn apply(args: ApplyArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let net = TransformNet::from_archive(&WeightArchive::load(&args.net)?)?;
    if let Some(task) = args.task {
        if task != net.task() {
            return Err(
                Error::TaskMismatch(format!("{} is a {} net, not {task}", args.net.display(), net.task())).into()
            );
        }
    }
    let image = if is_hdr(&args.input) {
        if net.task() != Task::Tonemap {
            return Err(Error::TaskMismatch(format!("the {} net cannot tone map a radiance map", net.task())).into());
        }
        // rendering settings come from the net's sidecar when it has one
        let sidecar = pipelines::sidecar_path(&args.net);
        let mut config = match std::fs::read_to_string(&sidecar) {
            Ok(text) => {
                serde_json::from_str::<Checkpoint>(&text)
                    .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?
                    .config
            }
            Err(_) => TaskConfig::for_task(Task::Tonemap),
        };
        config.alpha = args.alpha.unwrap_or(config.alpha);
        config.gamma = args.gamma.unwrap_or(config.gamma);
        config.eps_log = args.eps_log.unwrap_or(config.eps_log);
        config.validate()?;
        let hdr: HdrImage = imageio::load_hdr(&args.input)?;
        pipelines::apply_hdr(&net, &hdr, &config)?
    } else {
        pipelines::apply(&net, &imageio::load_image(&args.input)?)?
    };
    let mut out = Outputs::reading(&[&args.net, &args.input]);
    out.add_image(&args.out, &image)?;
    let report = json!({
        "command": "apply",
        "net": args.net,
        "task": net.task(),
        "net_checksum": net.checksum(),
        "input": args.input,
        "width": image.width,
        "height": image.height,
        "channels": image.channels,
        "seconds": start.elapsed().as_secs_f64(),
    });
    out.add_json(&pipelines::sidecar_path(&args.out), &report)?;
    out.commit()
}

fn baseline(args: BaselineArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let input = imageio::load_image(&args.input)?;
    let (image, method) = match args.task {
        BaselineTask::Downscale => {
            let method = DownscaleMethod::new(args.method, args.factor)?;
            (baselines::downscale_baseline(&input, method)?, format!("{} x1/{}", args.method, args.factor))
        }
        BaselineTask::Decolorize => (baselines::decolorize_baseline(&input)?, "luminance".to_string()),
    };
    let mut out = Outputs::reading(&[&args.input]);
    out.add_image(&args.out, &image)?;
    let report = json!({
        "command": "baseline",
        "method": method,
        "input": args.input,
        "width": image.width,
        "height": image.height,
        "channels": image.channels,
        "seconds": start.elapsed().as_secs_f64(),
    });
    out.add_json(&pipelines::sidecar_path(&args.out), &report)?;
    out.commit()
}

fn gray(image: LdrImage) -> Result<LdrImage, Failure> {
    Ok(if image.channels == 1 { image } else { imageio::luminance_image(&image)? })
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let a = gray(imageio::load_image(&args.a)?)?;
    let b = gray(imageio::load_image(&args.b)?)?;
    let score = match args.metric {
        Metric::Ssim => baselines::ssim(&a, &b)?,
    };
    println!("{score}");
    Ok(())
}

fn export_template(args: TemplateArgs) -> Result<(), Failure> {
    let mut out = Outputs::default();
    match args.random_seed {
        Some(seed) => out.add(&args.out, LossNetwork::random(args.arch, seed).to_archive().to_bytes())?,
        None => {
            let header = serde_json::to_value(LossNetwork::template_header(args.arch)).expect("header serialises");
            out.add_json(&args.out, &header)?
        }
    }
    out.commit()
}
