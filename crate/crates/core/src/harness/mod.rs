//! Training, checkpoints, run logs and the inspection dumps behind the
//! command-line tool.

mod optim;
mod train;

use std::fmt::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::ad::{Graph, ParamStore};
use crate::dataio::Dataset;
use crate::decoders::{DecoderKind, QueryTime};
use crate::encoders::{EncoderKind, Pooling};
use crate::likelihood::{self, mc_stream, EventSequence, MetricsReport, ProbeReport, Task};
use crate::model::{ModelConfig, TppModel};
use crate::nn::ForwardCtx;
use crate::{Error, Result};

pub use optim::{noam_lr, Adam};
pub use train::{BatchResult, TrainOutcome, Trainer};

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    #[serde(default = "defaults::hidden_size")]
    pub hidden_size: usize,
    #[serde(default = "defaults::one")]
    pub layers: usize,
    #[serde(default = "defaults::one")]
    pub heads: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub query_time: QueryTime,
    #[serde(default = "defaults::mixtures")]
    pub mixtures: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "defaults::warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    /// Monte Carlo samples per interval while training.
    #[serde(default = "defaults::mc_samples")]
    pub mc_samples: usize,
    /// Monte Carlo samples per interval for validation and evaluation.
    #[serde(default = "defaults::eval_mc_samples")]
    pub eval_mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the task of the training file.
    #[serde(default)]
    pub task: Option<Task>,
}

mod defaults {
    pub fn hidden_size() -> usize {
        8
    }
    pub fn one() -> usize {
        1
    }
    pub fn mixtures() -> usize {
        8
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn peak_lr() -> f64 {
        0.01
    }
    pub fn warmup_epochs() -> usize {
        10
    }
    pub fn patience() -> usize {
        100
    }
    pub fn max_epochs() -> usize {
        200
    }
    pub fn mc_samples() -> usize {
        10
    }
    pub fn eval_mc_samples() -> usize {
        100
    }
}

impl TrainConfig {
    /// A configuration with every optional field at its default.
    pub fn new(encoder: EncoderKind, decoder: DecoderKind) -> Self {
        serde_json::from_value(serde_json::json!({ "encoder": encoder, "decoder": decoder }))
            .expect("defaults deserialize")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_string(),
            source,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mixtures", self.mixtures),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("mc_samples", self.mc_samples),
            ("eval_mc_samples", self.eval_mc_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !self.hidden_size.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden_size ({})",
                self.heads, self.hidden_size
            )));
        }
        if self.encoder == EncoderKind::Gru && self.layers != 1 {
            return Err(Error::Config("the GRU encoder has exactly one layer".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            decoder: self.decoder,
            hidden_size: self.hidden_size,
            layers: self.layers,
            heads: self.heads,
            pooling: self.pooling,
            query_time: self.query_time,
            mixtures: self.mixtures,
        }
    }

    /// The task to train for on `data`, checking any explicit setting.
    pub fn task_for(&self, data: &Dataset) -> Result<Task> {
        match self.task {
            Some(t) if t != data.task => Err(Error::Config(format!(
                "config task {t:?} does not match dataset task {:?}",
                data.task
            ))),
            _ => Ok(data.task),
        }
    }
}

/// A trained model with everything needed to rebuild and evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_marks: usize,
    pub task: Task,
    pub beta_hat: f64,
    /// Epoch whose parameters these are; 0 is the initialisation.
    pub epoch: usize,
    pub best_val_nll_per_time: f64,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Rebuilds the model and checks that the stored parameters fit it.
    pub fn model(&self) -> Result<TppModel> {
        let mut layout = ParamStore::new(self.params.seed());
        let model = TppModel::new(&mut layout, self.config.model(), self.num_marks, self.task, self.beta_hat)?;
        if layout.len() != self.params.len() {
            return Err(Error::invalid(
                "params",
                format!("expected {} tensors, found {}", layout.len(), self.params.len()),
            ));
        }
        for ((want, w), (have, h)) in layout.iter().zip(self.params.iter()) {
            if want != have || w.value.shape() != h.value.shape() || w.trainable != h.trainable {
                return Err(Error::invalid(format!("params.{have}"), format!("does not match layout entry {want}")));
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoints always serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = parse(&read(path)?, path)?;
        c.config.validate()?;
        c.model()?;
        Ok(c)
    }

    /// Metrics on `data` with the evaluation sample count and stream.
    pub fn evaluate(&self, data: &Dataset) -> Result<MetricsReport> {
        self.check_data(data)?;
        let model = self.model()?;
        likelihood::evaluate(
            &model,
            &self.params,
            &data.sequences,
            self.task,
            self.config.eval_mc_samples,
            self.config.seed,
        )
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.num_marks != self.num_marks {
            return Err(Error::invalid(
                "num_marks",
                format!("checkpoint has {} marks, dataset has {}", self.num_marks, data.num_marks),
            ));
        }
        if data.task != self.task {
            return Err(Error::invalid(
                "task",
                format!("checkpoint is {:?}, dataset is {:?}", self.task, data.task),
            ));
        }
        Ok(())
    }

    fn sequence<'a>(&self, data: &'a Dataset, index: usize) -> Result<&'a EventSequence> {
        self.check_data(data)?;
        data.sequences.get(index).ok_or_else(|| {
            Error::invalid("sequence-index", format!("{index} out of range for {} sequences", data.len()))
        })
    }

    /// Per-mark intensity on `points` evenly spaced times covering the
    /// window of sequence `index`, as CSV with a `time` column.
    pub fn intensity_csv(&self, data: &Dataset, index: usize, points: usize) -> Result<String> {
        let seq = self.sequence(data, index)?;
        if points < 2 {
            return Err(Error::Config("grid needs at least 2 points".into()));
        }
        let model = self.model()?;
        let times: Vec<f64> = (0..points)
            .map(|i| {
                if i + 1 == points {
                    seq.end()
                } else {
                    seq.start() + seq.duration() * i as f64 / (points - 1) as f64
                }
            })
            .collect();
        let mut ctx = ForwardCtx::eval(mc_stream(self.config.seed, u64::MAX, index as u64), self.config.eval_mc_samples);
        let lambda = model.intensity_at(&self.params, &mut ctx, seq, &times)?;
        let mut out = String::from("time");
        for m in 0..self.num_marks {
            write!(out, ",mark_{m}").unwrap();
        }
        out.push('\n');
        for (r, t) in times.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for v in lambda.row_slice(r) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Attention coefficients of sequence `index` in long CSV form.
    ///
    /// Encoder rows index events for both query and key. Decoder rows use
    /// the interval closed by each event (the last one ends the window) as
    /// query and the history slot as key, slot 0 being the start token.
    pub fn attention_csv(&self, data: &Dataset, index: usize) -> Result<String> {
        let seq = self.sequence(data, index)?;
        let model = self.model()?;
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval(mc_stream(self.config.seed, u64::MAX, index as u64), self.config.eval_mc_samples);
        let encoded = model.forward(&mut g, &self.params, seq)?.encoded;
        let decoder = if model.decoder().kind().has_attention() {
            model.decoder_attention(&mut g, &self.params, &mut ctx, seq)?
        } else {
            Vec::new()
        };
        if encoded.attention.is_empty() && decoder.is_empty() {
            return Err(Error::Config(format!("{} has no attention layers", self.config.model().name())));
        }
        let mut out = String::from("source,layer,head,query,key,weight\n");
        let mut emit = |source: &str, layer: usize, head: usize, t: &crate::Tensor| {
            for q in 0..t.rows() {
                for (k, w) in t.row_slice(q).iter().enumerate() {
                    writeln!(out, "{source},{layer},{head},{q},{k},{w}").unwrap();
                }
            }
        };
        for (layer, heads) in encoded.attention.iter().enumerate() {
            for (h, &a) in heads.iter().enumerate() {
                emit("encoder", layer, h, g.value(a));
            }
        }
        for (h, &a) in decoder.iter().enumerate() {
            emit("decoder", 0, h, g.value(a));
        }
        Ok(out)
    }
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogLine {
    Epoch(EpochRecord),
    Final(FinalRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll_per_time: f64,
    pub val_nll_per_time: f64,
    pub best_val_nll_per_time: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val_metrics: MetricsReport,
}

/// Append-only per-epoch log. Wall-clock times are kept apart so that the
/// log itself is a pure function of config, seed and data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    lines: Vec<LogLine>,
}

impl RunLog {
    pub fn push(&mut self, line: LogLine) {
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.lines.iter().filter_map(|l| match l {
            LogLine::Epoch(e) => Some(e),
            LogLine::Final(_) => None,
        })
    }

    pub fn final_record(&self) -> Option<&FinalRecord> {
        self.lines.iter().rev().find_map(|l| match l {
            LogLine::Final(f) => Some(f),
            LogLine::Epoch(_) => None,
        })
    }

    /// JSON lines, one per entry.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).expect("log lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    path: format!("line {}", i + 1),
                    source,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { lines })
    }
}

/// Trains a conditional Poisson baseline and the configured model on the
/// same splits and compares them on `test`.
pub fn run_probe(config: &TrainConfig, train: &Dataset, val: &Dataset, test: &Dataset, margin: f64) -> Result<ProbeReport> {
    let mut cp_config = config.clone();
    cp_config.decoder = DecoderKind::Cp;
    let fit = |c: &TrainConfig| -> Result<MetricsReport> {
        let outcome = Trainer::new(c.clone(), train, val)?.run()?;
        if let Some(e) = outcome.failure {
            return Err(e);
        }
        outcome.checkpoint.evaluate(test)
    };
    let cp = fit(&cp_config)?;
    let model = fit(config)?;
    likelihood::probe_verdict(&cp, &model, margin)
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}
