use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rearpose::evalmetrics::visibility_report;
use rearpose::geometry::RigParams;
use rearpose::harness::{
    ablate, dataset_root, evaluate, evaluate_ground_truth, parse_over, read_header, report, train, write_eval,
    ExperimentConfig, Scale, TrainOptions, ViewSubset, DATA_ROOT_ENV,
};
use rearpose::synthio::{generate_dataset, Dataset, DatasetConfig, RenderParams, Split};
use rearpose::Error;

/// Front-rear camera distances of the visibility sweep, metres.
const VISIBILITY_SWEEP: [f64; 3] = [0.32, 0.37, 0.42];

#[derive(Parser)]
#[command(name = "rearpose", version, about = "Multi-view egocentric 3D pose estimation with front and rear fisheye cameras")]
struct Cli {
    /// Small models and schedules that train on a laptop CPU (default).
    #[arg(long, global = true, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// Full-size models, images and schedules.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; keys left out keep the scale's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// 2-front, 2-front+1-rear-left, 2-front+1-rear-right, 4-view or 2-rear.
    #[arg(long)]
    views: Option<ViewSubset>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the latest matching checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Replace the refiner with the identity.
    #[arg(long)]
    identity_refiner: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its visibility report.
    GenData {
        /// Dataset TOML; keys left out keep the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the three stages.
    Train(RunArgs),
    /// Evaluate a trained checkpoint.
    Evaluate {
        /// Checkpoint directory, e.g. `<run>/final`.
        #[arg(long, required_unless_present = "ground_truth")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        views: Option<ViewSubset>,
        /// Report directory; defaults to `<checkpoint>/../eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Train and evaluate the full model and its ablations.
    Ablate(RunArgs),
    /// Render tables and plot series from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Dataset whose visibility report to include.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn scale(cli: &Cli) -> Scale {
    if cli.paper_scale {
        Scale::Paper
    } else {
        Scale::Desk
    }
}

fn experiment(cli: &Cli, a: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&a.config, a.seed) {
        (Some(path), seed) => ExperimentConfig::load(path, scale(cli), seed)?,
        (None, Some(seed)) => ExperimentConfig::base(scale(cli), seed),
        (None, None) => return Err(Failure::Usage("give --seed or a --config that sets one".into())),
    };
    if let Some(v) = a.views {
        cfg.views = v;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if a.identity_refiner {
        cfg.training.identity_refiner = true;
    }
    Ok(cfg.resolved()?)
}

fn dataset_config(cli: &Cli, path: Option<&Path>) -> Result<DatasetConfig, Failure> {
    let base = match scale(cli) {
        Scale::Desk => DatasetConfig::default(),
        Scale::Paper => DatasetConfig {
            rig: RigParams { image_size: [256, 256], ..RigParams::default() },
            render: RenderParams { heatmap_size: [64, 64], sigma: 2.0, ..RenderParams::default() },
            ..DatasetConfig::default()
        },
    };
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))?;
    Ok(parse_over(&base, &text)?)
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData { config, seed, out } => {
            let dc = dataset_config(cli, config.as_deref())?;
            let m = generate_dataset(&dc, *seed, out)?;
            let ds = Dataset::open(out, Some(&m.rig_hash))?;
            let vis = visibility_report(&ds, Split::Test, &VISIBILITY_SWEEP)?;
            write(&out.join("visibility.json"), &vis.to_json())?;
            write(&out.join("visibility.txt"), &vis.to_text())?;
            let frames: Vec<String> = Split::ALL.iter().map(|&s| format!("{} {}", s.name(), m.records(s).len())).collect();
            println!("wrote {} ({})", out.display(), frames.join(", "));
            print!("{}", vis.to_text());
        }
        Command::Train(a) => {
            let cfg = experiment(cli, a)?;
            let opts = TrainOptions { resume: a.resume, progress: !a.quiet, ..TrainOptions::default() };
            let outcome = train(&cfg, &opts)?;
            let dir = outcome.final_checkpoint.expect("training ran to completion");
            let ds = Dataset::open(&dataset_root(&cfg), None)?;
            let ev = evaluate(&dir, &ds, Split::Test, Some(cfg.views))?;
            let r = write_eval(&outcome.out.join("eval"), Split::Test.name(), &ev)?;
            print!("{}", r.to_text());
        }
        Command::Evaluate { checkpoint, dataset, split, views, out, ground_truth } => {
            let (ev, default_out) = if *ground_truth {
                let root = dataset
                    .clone()
                    .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                    .ok_or_else(|| Failure::Usage("--ground-truth needs --dataset".into()))?;
                let ds = Dataset::open(&root, None)?;
                (evaluate_ground_truth(&ds, *split, views.unwrap_or(ViewSubset::FourView))?, root.join("eval-gt"))
            } else {
                let ck = checkpoint.clone().expect("required by clap");
                let header = read_header(&ck)?;
                let root = dataset.clone().unwrap_or_else(|| dataset_root(&header.config));
                let ds = Dataset::open(&root, None)?;
                let parent = ck.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
                (evaluate(&ck, &ds, *split, *views)?, parent.join("eval"))
            };
            let r = write_eval(out.as_deref().unwrap_or(&default_out), split.name(), &ev)?;
            print!("{}", r.to_text());
        }
        Command::Ablate(a) => {
            let cfg = experiment(cli, a)?;
            let opts = TrainOptions { resume: a.resume, progress: !a.quiet, ..TrainOptions::default() };
            print!("{}", ablate(&cfg, &opts)?.to_text());
        }
        Command::Report { runs, dataset, out } => {
            print!("{}", report(runs, dataset.as_deref(), out)?);
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string()),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => fail(e.kind(), e.to_string()),
        Err(Failure::Usage(m)) => fail("usage", m),
    }
}
