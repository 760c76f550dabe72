use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optim::{noam_lr, Adam};
use super::{Checkpoint, EpochRecord, FinalRecord, LogLine, RunLog, TrainConfig};
use crate::ad::{Gradients, Graph, ParamStore, Tensor};
use crate::dataio::Dataset;
use crate::encoders::estimate_beta;
use crate::likelihood::{self, mc_stream, sequence_loglik, SequenceModel, Task};
use crate::model::TppModel;
use crate::monotonic::{apply_stat_updates, EMA_RATE};
use crate::nn::ForwardCtx;
use crate::{Error, Result};

/// Result of a finished (or aborted) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch seen.
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    /// Wall-clock seconds per logged epoch.
    pub wall_seconds: Vec<f64>,
    /// Set when training stopped on a numerical failure.
    pub failure: Option<Error>,
}

/// Mean loss of one batch with its gradients and queued statistic updates.
#[derive(Clone, Debug)]
pub struct BatchResult {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// Sum over the batch of `-loglik / (w+ - w-)`.
    pub nll_per_time_sum: f64,
    pub grads: Gradients,
    pub stat_updates: Vec<(String, Tensor)>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    task: Task,
    model: TppModel,
    store: ParamStore,
    adam: Adam,
    train: &'a Dataset,
    val: &'a Dataset,
    beta_hat: f64,
    warmup_steps: u64,
}

/// Loss, loss per unit time, gradients and normalisation statistics of one sequence.
type SequenceResult = (f64, f64, Gradients, Vec<(String, Tensor)>);

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let task = config.task_for(train)?;
        if val.task != task || val.num_marks != train.num_marks {
            return Err(Error::invalid(
                "val",
                format!(
                    "validation data ({} marks, {:?}) does not match training data ({} marks, {:?})",
                    val.num_marks, val.task, train.num_marks, task
                ),
            ));
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("sequences", "training and validation sets must be non-empty"));
        }
        let beta_hat = estimate_beta(&train.sequences)?;
        let mut store = ParamStore::new(config.seed);
        let model = TppModel::new(&mut store, config.model(), train.num_marks, task, beta_hat)?;
        let batches = train.len().div_ceil(config.batch_size) as u64;
        let warmup_steps = (config.warmup_epochs as u64 * batches).max(1);
        Ok(Self {
            config,
            task,
            model,
            store,
            adam: Adam::default(),
            train,
            val,
            beta_hat,
            warmup_steps,
        })
    }

    pub fn model(&self) -> &TppModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    /// Loss and gradients of the training sequences at `indices`, using the
    /// Monte Carlo streams of `epoch`. Sequences are evaluated in parallel
    /// and reduced in the order given.
    pub fn batch(&self, indices: &[usize], epoch: u64) -> Result<BatchResult> {
        if indices.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let per_seq: Vec<SequenceResult> = indices
            .par_iter()
            .map(|&i| {
                let seq = &self.train.sequences[i];
                let mut ctx = ForwardCtx::train(mc_stream(self.config.seed, epoch, i as u64), self.config.mc_samples);
                let mut g = Graph::new();
                let terms = self.model.interval_terms(&mut g, &self.store, &mut ctx, seq)?;
                let ll = sequence_loglik(&mut g, &terms, seq, self.task)?;
                let nll = g.neg(ll)?;
                let value = g.value(nll).item();
                let grads = g.backward(nll)?;
                Ok((value, value / seq.duration(), grads, ctx.stat_updates))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut per_time = 0.0;
        let mut grads = Gradients::default();
        let mut stat_updates = Vec::new();
        for (l, lt, gr, st) in per_seq {
            loss += l;
            per_time += lt;
            grads.accumulate(&gr);
            stat_updates.extend(st);
        }
        let n = indices.len() as f64;
        grads.scale(1.0 / n);
        Ok(BatchResult {
            loss: loss / n,
            nll_per_time_sum: per_time,
            grads,
            stat_updates,
        })
    }

    /// One optimiser step on `indices`; returns the pre-step batch result.
    pub fn step(&mut self, indices: &[usize], epoch: u64) -> Result<BatchResult> {
        let b = self.batch(indices, epoch)?;
        if !b.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
        }
        let lr = noam_lr(self.adam.steps() + 1, self.warmup_steps, self.config.peak_lr);
        self.adam.step(&mut self.store, &b.grads, lr)?;
        apply_stat_updates(&mut self.store, &b.stat_updates, EMA_RATE)?;
        Ok(b)
    }

    fn validate(&self) -> Result<likelihood::MetricsReport> {
        likelihood::evaluate(
            &self.model,
            &self.store,
            &self.val.sequences,
            self.task,
            self.config.eval_mc_samples,
            self.config.seed,
        )
    }

    fn checkpoint(&self, epoch: usize, best: f64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_marks: self.train.num_marks,
            task: self.task,
            beta_hat: self.beta_hat,
            epoch,
            best_val_nll_per_time: best,
            params: self.store.clone(),
        }
    }

    /// Trains with early stopping on validation NLL/time. Numerical failures
    /// end the run and are reported in the outcome alongside the best
    /// checkpoint so far; other errors are returned directly.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let initial = self.validate()?;
        if !initial.nll_per_time.is_finite() {
            return Err(Error::Numerical("non-finite validation NLL at initialisation".into()));
        }
        let mut best = self.checkpoint(0, initial.nll_per_time);
        let mut best_metrics = initial;
        let mut log = RunLog::default();
        let mut wall_seconds = Vec::new();
        let mut failure = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(self.config.seed);

        for epoch in 1..=self.config.max_epochs {
            let started = Instant::now();
            order.shuffle(&mut shuffle);
            let mut per_time = 0.0;
            let mut lr = 0.0;
            let mut failed = false;
            for chunk in order.clone().chunks(self.config.batch_size) {
                lr = noam_lr(self.adam.steps() + 1, self.warmup_steps, self.config.peak_lr);
                match self.step(chunk, epoch as u64) {
                    Ok(b) => per_time += b.nll_per_time_sum,
                    Err(e) if e.exit_code() == 3 => {
                        failure = Some(e);
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if failed {
                break;
            }
            let metrics = match self.validate() {
                Ok(m) if m.nll_per_time.is_finite() => m,
                Ok(_) => {
                    failure = Some(Error::Numerical(format!("non-finite validation NLL at epoch {epoch}")));
                    break;
                }
                Err(e) if e.exit_code() == 3 => {
                    failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            };
            let val = metrics.nll_per_time;
            if val < best.best_val_nll_per_time {
                best = self.checkpoint(epoch, val);
                best_metrics = metrics;
                since_best = 0;
            } else {
                since_best += 1;
            }
            log.push(LogLine::Epoch(EpochRecord {
                epoch,
                train_nll_per_time: per_time / self.train.len() as f64,
                val_nll_per_time: val,
                best_val_nll_per_time: best.best_val_nll_per_time,
                lr,
            }));
            wall_seconds.push(started.elapsed().as_secs_f64());
            log::info!(
                "epoch {epoch}: val NLL/time {val:.6} (best {:.6} at {})",
                best.best_val_nll_per_time,
                best.epoch
            );
            if since_best >= self.config.patience {
                stopped_early = true;
                break;
            }
        }
        log.push(LogLine::Final(FinalRecord {
            best_epoch: best.epoch,
            stopped_early,
            val_metrics: best_metrics,
        }));
        Ok(TrainOutcome {
            checkpoint: best,
            log,
            wall_seconds,
            failure,
        })
    }
}
