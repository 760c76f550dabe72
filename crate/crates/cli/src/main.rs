use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tppkit::dataio::{Dataset, DEFAULT_MAX_LEN};
use tppkit::hawkes::{simulate_dataset, Preset};
use tppkit::harness::{run_probe, Checkpoint, TrainConfig, Trainer};
use tppkit::likelihood::DEFAULT_MARGIN;
use tppkit::{Error, Result, Task};

/// Environment variable that overrides the seed of a training config.
const SEED_ENV: &str = "TPPKIT_SEED";

#[derive(Parser)]
#[command(name = "tppkit", version, about = "Neural temporal point process toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a multivariate Hawkes dataset from a preset.
    SimulateHawkes {
        #[arg(long)]
        preset: Preset,
        #[arg(long, default_value_t = 2048)]
        sequences: usize,
        #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [0.0, 100.0], allow_negative_numbers = true)]
        window: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Truncate a dataset and split it into train/val/test files.
    PrepareData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model with early stopping on the validation file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a conditional Poisson baseline with the configured model.
    Probe {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-mark intensities on a uniform time grid as CSV.
    DumpIntensity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence_index: usize,
        #[arg(long, default_value_t = 1000)]
        grid: usize,
        /// Dataset holding the sequence; defaults to the validation file the
        /// checkpoint was trained with.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention coefficients as CSV.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence_index: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        config.seed = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")))?;
    }
    Ok(config)
}

/// Data files a training run read, written next to its checkpoint.
#[derive(Serialize, Deserialize)]
struct Sources {
    train: PathBuf,
    val: PathBuf,
}

const SOURCES_FILE: &str = "sources.json";

fn sequence_source(checkpoint: &Path, data: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(d) = data {
        return Ok(d);
    }
    let path = checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(SOURCES_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let sources: Sources = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sources.val)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SimulateHawkes {
            preset,
            sequences,
            window,
            seed,
            out,
        } => {
            let params = preset.params();
            let window = [window[0], window[1]];
            if !(window[0] < window[1]) {
                return Err(Error::Config(format!("window [{}, {}] is empty", window[0], window[1])));
            }
            let seqs = simulate_dataset(&params, sequences, window, seed)?;
            let data = Dataset::new(params.num_marks(), Task::MultiClass, seqs)?;
            log::info!("simulated {} sequences with {} events", data.len(), data.num_events());
            write_text(&out, &data.to_json())
        }
        Command::PrepareData {
            input,
            fold,
            max_len,
            seed,
            out_dir,
        } => {
            let data = Dataset::load(&input)?.truncate(max_len)?;
            let splits = data.make_splits(fold, seed)?;
            let stats = splits.train.stats()?;
            create_dir(&out_dir)?;
            splits.train.save(&out_dir.join("train.tpp.json"))?;
            splits.val.save(&out_dir.join("val.tpp.json"))?;
            splits.test.save(&out_dir.join("test.tpp.json"))?;
            write_json(&out_dir.join("stats.json"), &stats)
        }
        Command::Train {
            config,
            train,
            val,
            out_dir,
        } => {
            let config = load_config(&config)?;
            let sources = Sources {
                train: absolute(&train)?,
                val: absolute(&val)?,
            };
            let train = Dataset::load(&train)?;
            let val = Dataset::load(&val)?;
            let outcome = Trainer::new(config, &train, &val)?.run()?;
            create_dir(&out_dir)?;
            outcome.checkpoint.save(&out_dir.join("checkpoint.json"))?;
            write_text(&out_dir.join("run_log.jsonl"), &outcome.log.to_jsonl())?;
            let timings: String = outcome
                .wall_seconds
                .iter()
                .enumerate()
                .map(|(i, s)| format!("{{\"epoch\":{},\"wall_seconds\":{s}}}\n", i + 1))
                .collect();
            write_text(&out_dir.join("timings.jsonl"), &timings)?;
            write_json(&out_dir.join(SOURCES_FILE), &sources)?;
            match outcome.failure {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Evaluate { checkpoint, data, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let report = ckpt.evaluate(&Dataset::load(&data)?)?;
            write_json(&out, &report)
        }
        Command::Probe {
            data_dir,
            config,
            margin,
            out,
        } => {
            let config = load_config(&config)?;
            let train = Dataset::load(&data_dir.join("train.tpp.json"))?;
            let val = Dataset::load(&data_dir.join("val.tpp.json"))?;
            let test = Dataset::load(&data_dir.join("test.tpp.json"))?;
            let report = run_probe(&config, &train, &val, &test, margin)?;
            println!("{}", serde_json::to_string(&report.verdict).expect("verdict serializes").trim_matches('"'));
            write_json(&out, &report)
        }
        Command::DumpIntensity {
            checkpoint,
            sequence_index,
            grid,
            data,
            out,
        } => {
            let data_path = sequence_source(&checkpoint, data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let csv = ckpt.intensity_csv(&Dataset::load(&data_path)?, sequence_index, grid)?;
            write_text(&out, &csv)
        }
        Command::DumpAttention {
            checkpoint,
            sequence_index,
            data,
            out,
        } => {
            let data_path = sequence_source(&checkpoint, data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let csv = ckpt.attention_csv(&Dataset::load(&data_path)?, sequence_index)?;
            write_text(&out, &csv)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
