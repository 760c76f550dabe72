//! Encoder plus decoder as one sequence model.

use serde::{Deserialize, Serialize};

use crate::ad::{Graph, ParamStore, Tensor, Var};
use crate::decoders::{Decoder, DecoderKind, DecoderSpec, Memory, QueryTime};
use crate::encoders::{Encoded, EncoderKind, EncoderSpec, HistoryEncoder, Pooling};
use crate::likelihood::{EventSequence, IntervalTerms, SequenceModel, Task};
use crate::nn::ForwardCtx;
use crate::{Error, Result};

/// Architecture choices; everything needed to rebuild the parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub hidden_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub pooling: Pooling,
    pub query_time: QueryTime,
    pub mixtures: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderKind, decoder: DecoderKind, hidden_size: usize) -> Self {
        Self {
            encoder,
            decoder,
            hidden_size,
            layers: 1,
            heads: 1,
            pooling: Pooling::Mean,
            query_time: QueryTime::Relative,
            mixtures: 8,
        }
    }

    pub fn name(&self) -> String {
        let enc = match self.encoder {
            EncoderKind::Gru => "GRU",
            EncoderKind::Sa => "SA",
        };
        format!("{enc}-{}", self.decoder.name().to_uppercase())
    }
}

#[derive(Clone, Debug)]
pub struct TppModel {
    config: ModelConfig,
    num_marks: usize,
    task: Task,
    encoder: HistoryEncoder,
    decoder: Decoder,
}

/// Everything computed for one sequence, kept for inspection.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub memory: Memory,
}

impl TppModel {
    /// Registers all parameters in `store`, in a fixed order.
    pub fn new(store: &mut ParamStore, config: ModelConfig, num_marks: usize, task: Task, beta_hat: f64) -> Result<Self> {
        if config.hidden_size == 0 || config.layers == 0 || config.heads == 0 {
            return Err(Error::Config("hidden_size, layers and heads must be positive".into()));
        }
        let encoder = HistoryEncoder::new(
            store,
            EncoderSpec {
                kind: config.encoder,
                num_marks,
                d_model: config.hidden_size,
                heads: config.heads,
                layers: config.layers,
                pooling: config.pooling,
            },
            beta_hat,
        )?;
        let decoder = Decoder::new(
            store,
            DecoderSpec {
                kind: config.decoder,
                num_marks,
                d_model: config.hidden_size,
                heads: config.heads,
                task,
                query_time: config.query_time,
                beta_hat,
                mixtures: config.mixtures,
            },
        )?;
        Ok(Self {
            config,
            num_marks,
            task,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn encoder(&self) -> &HistoryEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn beta_hat(&self) -> f64 {
        self.encoder.beta_hat()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence) -> Result<Forward> {
        let encoded = self.encoder.encode(g, store, seq)?;
        let memory = self.decoder.memory(g, store, encoded.z, seq)?;
        Ok(Forward { encoded, memory })
    }

    /// Interval index and elapsed time for each absolute query time. A time
    /// equal to an event time belongs to the interval that event closes.
    pub fn locate(seq: &EventSequence, times: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut intervals = Vec::with_capacity(times.len());
        let mut taus = Vec::with_capacity(times.len());
        for (i, &t) in times.iter().enumerate() {
            if !(t >= seq.start() && t <= seq.end()) {
                return Err(Error::invalid(
                    format!("times[{i}]"),
                    format!("{t} outside window [{}, {}]", seq.start(), seq.end()),
                ));
            }
            let k = seq.events.partition_point(|e| e.time < t);
            let prev = if k == 0 { seq.start() } else { seq.events[k - 1].time };
            intervals.push(k);
            taus.push(t - prev);
        }
        Ok((intervals, taus))
    }

    /// Per-mark intensity at each of `times`, one row per time.
    pub fn intensity_at(
        &self,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        seq: &EventSequence,
        times: &[f64],
    ) -> Result<Tensor> {
        if times.is_empty() {
            return Ok(Tensor::zeros(0, self.num_marks));
        }
        let (intervals, taus) = Self::locate(seq, times)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, store, seq)?;
        let out = self.decoder.decode(&mut g, store, ctx, &fwd.memory, &intervals, &taus)?;
        Ok(g.value(out.lambda).clone())
    }

    /// Decoder attention at each event time, one matrix per head
    /// (events x history rows, the first row being the sequence start).
    pub fn decoder_attention(&self, g: &mut Graph, store: &ParamStore, ctx: &mut ForwardCtx, seq: &EventSequence) -> Result<Vec<Var>> {
        let fwd = self.forward(g, store, seq)?;
        let (intervals, taus) = interval_queries(seq);
        let out = self.decoder.decode(g, store, ctx, &fwd.memory, &intervals, &taus)?;
        Ok(out.attention)
    }
}

/// One query per interval, at its right end: each event, then `w+`.
pub fn interval_queries(seq: &EventSequence) -> (Vec<usize>, Vec<f64>) {
    let n = seq.len();
    let mut taus = Vec::with_capacity(n + 1);
    let mut prev = seq.start();
    for k in 0..=n {
        let end = if k < n { seq.events[k].time } else { seq.end() };
        taus.push(end - prev);
        prev = end;
    }
    ((0..=n).collect(), taus)
}

impl SequenceModel for TppModel {
    fn num_marks(&self) -> usize {
        self.num_marks
    }

    fn interval_terms(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        seq: &EventSequence,
    ) -> Result<IntervalTerms> {
        let fwd = self.forward(g, store, seq)?;
        let (intervals, taus) = interval_queries(seq);
        let out = self.decoder.decode(g, store, ctx, &fwd.memory, &intervals, &taus)?;
        let lambda = g.gather_rows(out.lambda, (0..seq.len()).collect())?;
        Ok(IntervalTerms {
            lambda,
            big_lambda: out.big_lambda,
        })
    }
}
