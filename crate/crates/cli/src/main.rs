use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tridet::annotation::AnnotationFile;
use tridet::data::{generate_synthetic, Dataset, SynthConfig};
use tridet::eval::{mean_ap, DEFAULT_THRESHOLDS};
use tridet::gradsuite::{run_suite, TOLERANCE};
use tridet::infer::detect;
use tridet::io::{load_detections, save_detections, write_atomic, Checkpoint, FeatureFile};
use tridet::rank::{run_profiles, verify_angle_contraction, ProfileSettings};
use tridet::train::train_with;
use tridet::{Error, Execution, Model, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "tridet",
    version,
    about = "Temporal action detection on pre-extracted features"
)]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Run a checkpoint over feature files and write detections.
    Detect(DetectArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Check angle contraction and write depth profiles.
    Rank(RankArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    /// Instants per video.
    #[arg(long, default_value_t = 256)]
    len: usize,
    /// Feature width.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Mean number of segments per video.
    #[arg(long, default_value_t = 3.0)]
    density: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Put the first N videos in `train/` and the rest in `test/`.
    #[arg(long, value_name = "N")]
    split: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log (CSV); defaults to the checkpoint path with `.losses.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or a single feature file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Detections file (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Annotation file, or a dataset directory holding one.
    #[arg(long)]
    annotations: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RankArgs {
    /// Output directory for `angles.csv` and `profile.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 100)]
    profile_trials: usize,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure of a run: a user-facing problem (exit 1) or an internal one
/// (exit 2).
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

struct Context {
    config: RunConfig,
    exec: Execution,
    /// True when the configuration came from a file.
    from_file: bool,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, Error> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        config.apply_env()?;
        Ok(Self {
            config,
            exec: if cli.sequential {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            from_file: cli.config.is_some(),
        })
    }

    /// Flag, then `TRIDET_SEED`, then the config file.
    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.unwrap_or(self.config.train.seed)
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    path.ok_or_else(|| Failure::User(format!("missing {what}: pass it as a flag or in --config")))
}

fn synth(ctx: &Context, a: SynthArgs) -> Outcome {
    let out = require(a.out.or(ctx.config.output.clone()), "--out")?;
    let cfg = SynthConfig {
        num_videos: a.videos,
        len: a.len,
        dim: a.dim,
        num_classes: a.classes,
        density: a.density,
        noise_std: a.noise,
        seed: ctx.seed(a.seed),
    };
    let data = generate_synthetic(&cfg, ctx.exec)?;
    match a.split {
        Some(n) => {
            if n > data.samples.len() {
                return Err(Failure::User(format!(
                    "--split {n} exceeds --videos {}",
                    data.samples.len()
                )));
            }
            let (train, test) = data.split(n);
            train.save(&out.join("train"))?;
            test.save(&out.join("test"))?;
        }
        None => data.save(&out)?,
    }
    let segments: usize = data.samples.iter().map(|s| s.segments.len()).sum();
    println!(
        "wrote {} videos with {segments} segments to {}",
        data.samples.len(),
        out.display()
    );
    Ok(())
}

fn train(ctx: &Context, a: TrainArgs) -> Outcome {
    let dir = require(a.data.or(ctx.config.data.clone()), "--data")?;
    let out = require(a.out.or(ctx.config.output.clone()), "--out")?;
    let data = Dataset::load(&dir)?;
    let mut cfg = ctx.config.train.clone();
    cfg.seed = ctx.seed(a.seed);
    let input_dim = data
        .input_dim()
        .ok_or_else(|| Failure::User(format!("dataset {} is empty", dir.display())))?;
    if ctx.from_file {
        if cfg.input_dim != input_dim || cfg.num_classes != data.num_classes {
            return Err(Failure::User(format!(
                "config expects input_dim {} and {} classes; dataset has {input_dim} and {}",
                cfg.input_dim, cfg.num_classes, data.num_classes
            )));
        }
    } else {
        cfg.input_dim = input_dim;
        cfg.num_classes = data.num_classes;
    }
    let start = Instant::now();
    let outcome = train_with(&data, &cfg, ctx.exec, |e, loss| {
        eprintln!(
            "epoch {:>3}/{}  loss {loss:.5}  {:.1}s",
            e + 1,
            cfg.epochs,
            start.elapsed().as_secs_f64()
        );
    })?;
    outcome.model.to_checkpoint().save(&out)?;
    let log = a.log.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".losses.csv");
        PathBuf::from(p)
    });
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(csv, "{},{l:.17e}", e + 1).expect("write to string");
    }
    write_atomic(&log, csv.as_bytes())?;
    println!("wrote {} and {}", out.display(), log.display());
    Ok(())
}

/// Feature files to run on, with their video ids, in name order.
fn feature_inputs(path: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    if path.is_file() {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Failure::User(format!("bad feature file name {}", path.display())))?;
        return Ok(vec![(id.to_string(), path.to_path_buf())]);
    }
    let dir = path.join("features");
    let entries =
        std::fs::read_dir(&dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry
            .map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?
            .path();
        if p.extension().is_some_and(|x| x == "tdft") {
            if let Some(id) = p.file_stem().and_then(|s| s.to_str()) {
                files.push((id.to_string(), p.clone()));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn run_detect(ctx: &Context, a: DetectArgs) -> Outcome {
    let input = require(a.data.or(ctx.config.test_data.clone()), "--data")?;
    let out = require(a.out.or(ctx.config.output.clone()), "--out")?;
    let model = Model::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let mut dets = Vec::new();
    let inputs = feature_inputs(&input)?;
    for (id, path) in &inputs {
        let f = FeatureFile::load(path)?;
        dets.extend(detect(&model, &f.features, id)?);
    }
    save_detections(&out, &dets)?;
    println!(
        "wrote {} detections for {} videos to {}",
        dets.len(),
        inputs.len(),
        out.display()
    );
    Ok(())
}

fn eval(_ctx: &Context, a: EvalArgs) -> Outcome {
    let ann_path = if a.annotations.is_dir() {
        a.annotations.join("annotations.json")
    } else {
        a.annotations
    };
    let gt = AnnotationFile::load(&ann_path)?;
    let dets = load_detections(&a.detections)?;
    let report = mean_ap(&dets, &gt, &DEFAULT_THRESHOLDS);
    if let Some(p) = &a.out {
        report.save(p)?;
    }
    for (t, ap) in report.thresholds.iter().zip(&report.map) {
        println!("mAP@{t:.1}  {ap:.4}");
    }
    println!("average mAP {:.4}", report.average_map);
    Ok(())
}

fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Outcome {
    let start = Instant::now();
    let report = run_suite(ctx.seed(a.seed), ctx.exec)?;
    for c in &report.cases {
        println!(
            "{:<14} {:>5} entries  max rel error {:.3e}  {}",
            c.name,
            c.report.entries_checked,
            c.report.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = report.max_rel_error();
    println!(
        "worst relative error {worst:.3e} (tolerance {TOLERANCE:.0e}) in {:.2}s",
        start.elapsed().as_secs_f64()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::User("gradient check failed".into()))
    }
}

fn rank(ctx: &Context, a: RankArgs) -> Outcome {
    let out = require(a.out.or(ctx.config.output.clone()), "--out")?;
    let seed = ctx.seed(a.seed);
    let angles = verify_angle_contraction(a.trials, (2, 32), (2, 16), seed, ctx.exec)?;
    let settings = ProfileSettings {
        trials: a.profile_trials,
        seed,
        ..Default::default()
    };
    let profiles = run_profiles(&settings, ctx.exec)?;
    std::fs::create_dir_all(&out).map_err(|e| Failure::User(format!("{}: {e}", out.display())))?;
    write_atomic(&out.join("angles.csv"), angles.to_csv().as_bytes())?;
    write_atomic(&out.join("profile.csv"), profiles.to_csv().as_bytes())?;
    println!(
        "angle contraction: {} of {} checks passed, worst margin {:.3e}",
        angles.passed(),
        angles.records.len(),
        angles.worst_margin
    );
    println!(
        "profiles: attention non-decreasing in {}/{} trials, SGP below attention at depth {} in {}/{}",
        profiles.attention_monotone_trials(),
        a.profile_trials,
        settings.depth,
        profiles.sgp_below_trials(),
        a.profile_trials
    );
    if angles.violations > 0 {
        return Err(Failure::User(format!(
            "{} angle contraction violations",
            angles.violations
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let ctx = Context::new(&cli)?;
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Detect(a) => run_detect(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::Rank(a) => rank(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
