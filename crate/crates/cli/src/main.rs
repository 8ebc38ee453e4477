use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcl_core::checkpoint::{checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint};
use mcl_core::config::{Precision, RunConfig};
use mcl_core::data::{generate_synthetic, read_recording, write_recording};
use mcl_core::eval::write_report;
use mcl_core::numerics::Real;
use mcl_core::pipeline::{
    continue_training, delay_maps_csv, effective_config, evaluate_checkpoint, fit_classifier, initial_checkpoint,
    predict_recording, prepare_data, window_delay_maps, TrainMode,
};
use mcl_core::selection::Strategy;
use mcl_core::{Error, Result};

/// Multiple choice learning for LSTM sequence-prediction ensembles.
#[derive(Parser)]
#[command(name = "mcl", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-pattern recording.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ensemble (or a single-model baseline) on a recording.
    Train(TrainArgs),
    /// Fit the selection classifier of a trained checkpoint.
    TrainClassifier {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Classifier settings; defaults to the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate selection strategies on the test episode and write reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "oracle,recon,classifier,average")]
        strategies: String,
        #[arg(long)]
        report: PathBuf,
        /// Extra single-model checkpoint reported as its own curve (`name=path`).
        #[arg(long = "baseline", value_name = "NAME=PATH")]
        baselines: Vec<String>,
    },
    /// Predict future frames for every window of a recording.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "recon")]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-window delay maps as CSV.
    DelayMap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window length, stride and maximum lag; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip diversity pretraining.
    #[arg(long, conflicts_with_all = ["single", "wide", "independent"])]
    no_pretrain: bool,
    /// Train every member on every sample (the averaging baseline).
    #[arg(long, conflicts_with_all = ["single", "wide"])]
    independent: bool,
    /// Train one model of the configured width.
    #[arg(long, conflicts_with = "wide")]
    single: bool,
    /// Train one model k times as wide as the configured width.
    #[arg(long, value_name = "K")]
    wide: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append one JSON line per epoch to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            write_recording(&out, &generate_synthetic(&cfg.data)?)
        }
        Command::Train(args) => {
            let cfg = RunConfig::load(&args.config)?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &args),
                Precision::F64 => train::<f64>(&cfg, &args),
            }
        }
        Command::TrainClassifier { ckpt, data, out, config } => match checkpoint_precision(&ckpt)? {
            "f32" => train_classifier::<f32>(&ckpt, &data, &out, config.as_deref()),
            _ => train_classifier::<f64>(&ckpt, &data, &out, config.as_deref()),
        },
        Command::Eval {
            ckpt,
            data,
            strategies,
            report,
            baselines,
        } => {
            let strategies = Strategy::parse_list(&strategies)?;
            match checkpoint_precision(&ckpt)? {
                "f32" => eval::<f32>(&ckpt, &data, &strategies, &report, &baselines),
                _ => eval::<f64>(&ckpt, &data, &strategies, &report, &baselines),
            }
        }
        Command::Predict {
            ckpt,
            data,
            strategy,
            out,
        } => {
            let strategy = Strategy::parse(&strategy)?;
            match checkpoint_precision(&ckpt)? {
                "f32" => predict::<f32>(&ckpt, &data, strategy, &out),
                _ => predict::<f64>(&ckpt, &data, strategy, &out),
            }
        }
        Command::DelayMap { data, out, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let rec = read_recording(&data)?;
            let maps = window_delay_maps(&cfg, &rec)?;
            fs::write(&out, delay_maps_csv(&maps, rec.meta.sampling_rate)).map_err(|e| io_err(&out, e))
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn stored_config<T: Real>(ckpt: &Checkpoint<T>) -> Result<RunConfig> {
    RunConfig::parse(&ckpt.config)
}

fn train<T: Real>(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mode = if args.no_pretrain {
        TrainMode::NoPretrain
    } else if args.independent {
        TrainMode::Independent
    } else if args.single {
        TrainMode::Single
    } else if let Some(k) = args.wide {
        TrainMode::Wide(k)
    } else {
        TrainMode::Ensemble
    };
    let cfg = effective_config(cfg, mode)?;
    let data = prepare_data(&cfg, &read_recording(&args.data)?)?;
    let start = match &args.resume {
        Some(path) => {
            let ckpt: Checkpoint<T> = load_checkpoint(path)?;
            if ckpt.ensemble.len() != cfg.members || ckpt.arch() != cfg.arch || ckpt.spec() != cfg.sequence_spec()? {
                return Err(Error::Config(format!(
                    "{} does not match the configured model (members, width or window)",
                    path.display()
                )));
            }
            ckpt
        }
        None => initial_checkpoint(&cfg, &data.split.train)?,
    };
    let mut log_file = match &args.log {
        Some(p) => Some(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| io_err(p, e))?,
        ),
        None => None,
    };
    let mut log_error = None;
    let ckpt = continue_training(start, &cfg, &data, |r| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}  assignments {:?}{}",
            r.epoch,
            r.train_loss,
            r.val_oracle_loss,
            r.assignments,
            if r.improved { "  *" } else { "" }
        );
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", r.to_json_line()) {
                log_error.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (log_error, &args.log) {
        return Err(io_err(p, e));
    }
    save_checkpoint(&args.out, &ckpt)
}

fn train_classifier<T: Real>(ckpt_path: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut ckpt: Checkpoint<T> = load_checkpoint(ckpt_path)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => stored_config(&ckpt)?,
    };
    let data = prepare_data(&cfg, &read_recording(data)?)?;
    let (clf, log) = fit_classifier(&ckpt, &cfg, &data)?;
    for e in &log {
        eprintln!(
            "classifier epoch {:>3}  loss {:.6}  train acc {:.4}  val acc {:.4}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
        );
    }
    ckpt.classifier = Some(clf);
    save_checkpoint(out, &ckpt)
}

fn eval<T: Real>(ckpt_path: &Path, data: &Path, strategies: &[Strategy], report: &Path, baselines: &[String]) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(ckpt_path)?;
    let cfg = stored_config(&ckpt)?;
    let data = prepare_data(&cfg, &read_recording(data)?)?;
    let mut extra = Vec::new();
    for b in baselines {
        let (name, path) = b
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--baseline expects NAME=PATH, got {b:?}")))?;
        let other: Checkpoint<T> = load_checkpoint(Path::new(path))?;
        if other.spec() != ckpt.spec() {
            return Err(Error::Config(format!("baseline {name} uses a different window layout")));
        }
        extra.push((name.to_owned(), other.inference_members().to_vec()));
    }
    let r = evaluate_checkpoint(&ckpt, &data, strategies, &extra)?;
    write_report(report, &r)
}

fn predict<T: Real>(ckpt_path: &Path, data: &Path, strategy: Strategy, out: &Path) -> Result<()> {
    let ckpt: Checkpoint<T> = load_checkpoint(ckpt_path)?;
    let cfg = stored_config(&ckpt)?;
    let rec = predict_recording(&ckpt, &cfg, &read_recording(data)?, strategy)?;
    write_recording(out, &rec)
}
