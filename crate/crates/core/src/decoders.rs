//! Decoders: per-mark intensity `lambda` and cumulative intensity `Lambda`
//! at query times, given the encoded history.
//!
//! Every query is a pair `(interval k, tau)`. Interval `k` starts at the
//! previous event `t_prev = t_{k-1}` (or the window start for `k = 0`) and
//! sees the history `Z_ext[0..=k]`, where row 0 of `Z_ext` is a learnable
//! beginning-of-sequence vector and row `j + 1` is event `j`. The query time
//! is `t_prev + tau`; `lambda` is evaluated there and `Lambda` integrates
//! over `(t_prev, t_prev + tau]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Graph, ParamStore, Tensor, Var};
use crate::encoders::{attention, temporal_embedding, AttnActivation, MultiHead};
use crate::likelihood::{EventSequence, Task};
use crate::monotonic::{
    EmaLayerNorm, Gumbel, MonotonicMlp, MonotonicOutput, ParametricTemporal, PositiveLinear, EMA_RATE,
};
use crate::nn::{softplus_inverse, ForwardCtx, LayerNorm, Linear, Mlp, ScaledSoftplus};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Cp,
    Rmtpp,
    Lnm,
    MlpMc,
    MlpCm,
    AttnMc,
    AttnCm,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 7] = [
        DecoderKind::Cp,
        DecoderKind::Rmtpp,
        DecoderKind::Lnm,
        DecoderKind::MlpMc,
        DecoderKind::MlpCm,
        DecoderKind::AttnMc,
        DecoderKind::AttnCm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Cp => "cp",
            DecoderKind::Rmtpp => "rmtpp",
            DecoderKind::Lnm => "lnm",
            DecoderKind::MlpMc => "mlp-mc",
            DecoderKind::MlpCm => "mlp-cm",
            DecoderKind::AttnMc => "attn-mc",
            DecoderKind::AttnCm => "attn-cm",
        }
    }

    /// Cumulative decoders get `lambda` by differentiating `Lambda` in time.
    pub fn is_cumulative(self) -> bool {
        matches!(self, DecoderKind::MlpCm | DecoderKind::AttnCm)
    }

    pub fn is_monte_carlo(self) -> bool {
        matches!(self, DecoderKind::MlpMc | DecoderKind::AttnMc)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, DecoderKind::AttnMc | DecoderKind::AttnCm)
    }
}

/// What the time representation of a query is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryTime {
    /// Time since the previous event.
    #[default]
    Relative,
    /// Absolute time.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub num_marks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub task: Task,
    pub query_time: QueryTime,
    pub beta_hat: f64,
    /// Mixture components of the log-normal decoder.
    pub mixtures: usize,
}

/// Rows: one per query. `attention` holds one coefficient matrix per head
/// (queries x history rows) for the attention decoders.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub lambda: Var,
    pub big_lambda: Var,
    pub attention: Vec<Var>,
}

/// The decoder's view of one encoded sequence.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `(N + 1) x d`: the beginning-of-sequence row, then one row per event.
    pub z: Var,
    /// Start of each interval: the window start, then each event time.
    pub t_prev: Vec<f64>,
}

impl Memory {
    pub fn intervals(&self) -> usize {
        self.t_prev.len()
    }
}

/// Evenly stratified points in `(0, tau)`: the `j`-th lies in
/// `[j tau / n, (j + 1) tau / n)`, at a uniform offset when `rng` is given
/// and at the midpoint otherwise.
pub fn stratified_points(tau: f64, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let step = tau / n as f64;
    match rng {
        Some(rng) => (0..n).map(|j| step * (j as f64 + rng.random::<f64>())).collect(),
        None => (0..n).map(|j| step * (j as f64 + 0.5)).collect(),
    }
}

/// Stratified Monte Carlo estimate of `int_a^b f(u) du` for a vector-valued
/// `f`.
pub fn mc_integrate<F>(mut f: F, a: f64, b: f64, n: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<f64>>
where
    F: FnMut(f64) -> Vec<f64>,
{
    if n == 0 {
        return Err(Error::Config("at least one Monte Carlo sample is required".into()));
    }
    if b < a {
        return Err(Error::invalid("t", format!("query time {b} precedes {a}")));
    }
    let tau = b - a;
    let mut acc: Vec<f64> = Vec::new();
    for u in stratified_points(tau, n, rng) {
        let v = f(a + u);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (s, x) in acc.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok(acc.into_iter().map(|s| s * tau / n as f64).collect())
}

/// Closed-form RMTPP terms for one mark: `lambda = exp(c + w tau)` and its
/// integral from 0 to `tau`.
pub fn rmtpp_closed_form(c: f64, w: f64, tau: f64) -> (f64, f64) {
    let lambda = (c + w * tau).exp();
    let big = if w.abs() < RMTPP_MIN_DECAY {
        c.exp() * (tau + 0.5 * w * tau * tau)
    } else {
        c.exp() * (w * tau).exp_m1() / w
    };
    (lambda, big)
}

const RMTPP_MIN_DECAY: f64 = 1e-12;

/// Log-normal mixture density of the inter-event time.
pub fn lnm_density(weights: &[f64], mu: &[f64], sigma: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::invalid("tau", format!("log-normal density needs tau > 0, got {tau}")));
    }
    let lt = tau.ln();
    Ok(weights
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((w, m), s)| {
            let z = (lt - m) / s;
            w * (-0.5 * z * z).exp() / (tau * s * (2.0 * std::f64::consts::PI).sqrt())
        })
        .sum())
}

/// Survival function `1 - sum_k w_k Phi((ln tau - mu_k) / sigma_k)`.
pub fn lnm_survival(weights: &[f64], mu: &[f64], sigma: &[f64], tau: f64) -> f64 {
    if tau <= 0.0 {
        return 1.0;
    }
    let lt = tau.ln();
    weights
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((w, m), s)| w * crate::ad::log_ndtr(-(lt - m) / s).exp())
        .sum()
}

/// Smallest inter-event time the log-normal decoder evaluates; keeps
/// `log tau` finite for an event sitting exactly on the window start.
const LNM_MIN_TAU: f64 = 1e-30;

/// Learnable Poisson term mixed into a decoder:
/// `lambda_total = a1 mu + a2 lambda` with `(a1, a2) = softmax(logits)`.
#[derive(Clone, Debug)]
pub struct BaseIntensity {
    raw_mu: String,
    logits: String,
}

/// Initial mixing logits; the mixture starts mostly Poisson.
pub const BASE_LOGITS: [f64; 2] = [3.0, 0.0];

impl BaseIntensity {
    pub fn new(store: &mut ParamStore, prefix: &str, num_marks: usize, initial_rate: f64) -> Result<Self> {
        if !(initial_rate.is_finite() && initial_rate > 0.0) {
            return Err(Error::Config(format!("initial rate must be positive, got {initial_rate}")));
        }
        let raw_mu = format!("{prefix}.raw_mu");
        let logits = format!("{prefix}.logits");
        store.insert(&raw_mu, Tensor::full(1, num_marks, softplus_inverse(initial_rate)))?;
        store.insert(&logits, Tensor::row(&BASE_LOGITS))?;
        Ok(Self { raw_mu, logits })
    }

    pub fn raw_mu_name(&self) -> &str {
        &self.raw_mu
    }

    pub fn logits_name(&self) -> &str {
        &self.logits
    }

    /// `(a1, a2, mu)` as graph nodes.
    pub fn components(&self, g: &mut Graph, store: &ParamStore) -> Result<(Var, Var, Var)> {
        let logits = g.param(store, &self.logits)?;
        let alpha = g.softmax(logits)?;
        let a1 = g.slice_cols(alpha, 0, 1)?;
        let a2 = g.slice_cols(alpha, 1, 2)?;
        let raw = g.param(store, &self.raw_mu)?;
        let mu = g.softplus(raw)?;
        Ok((a1, a2, mu))
    }

    pub fn mix(&self, g: &mut Graph, store: &ParamStore, out: DecoderOutput, taus: &[f64]) -> Result<DecoderOutput> {
        let (a1, a2, mu) = self.components(g, store)?;
        let rate = g.mul(mu, a1)?;
        let l = g.mul(out.lambda, a2)?;
        let lambda = g.add(l, rate)?;
        let tau = g.constant(Tensor::column(taus));
        let poisson = g.mul(tau, rate)?;
        let big = g.mul(out.big_lambda, a2)?;
        let big_lambda = g.add(big, poisson)?;
        Ok(DecoderOutput {
            lambda,
            big_lambda,
            attention: out.attention,
        })
    }
}

/// Two-layer MLP `d -> d -> M` followed by a scaled softplus.
#[derive(Clone, Debug)]
struct PositiveHead {
    mlp: Mlp,
    act: ScaledSoftplus,
}

impl PositiveHead {
    fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, marks: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), &[input, hidden, marks])?,
            act: ScaledSoftplus::new(store, &format!("{prefix}.act"), marks)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.mlp.forward(g, store, x)?;
        self.act.forward(g, store, h)
    }
}

/// Query-to-history attention block with the same pre-norm layout as the
/// self-attention encoder.
#[derive(Clone, Debug)]
struct CrossAttention {
    ln_attn: LayerNorm,
    attn: MultiHead,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{prefix}.ln_attn"), d)?,
            attn: MultiHead::new(store, &format!("{prefix}.attn"), d, heads)?,
            ln_ff: LayerNorm::new(store, &format!("{prefix}.ln_ff"), d)?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), d, d)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), d, d)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        memory: Var,
        mask: &Arc<Vec<bool>>,
    ) -> Result<(Var, Vec<Var>)> {
        let qn = self.ln_attn.forward(g, store, q)?;
        let (a, coeffs) = self.attn.forward(g, store, qn, memory, mask)?;
        let q1 = g.add(a, q)?;
        let z = self.ln_ff.forward(g, store, q1)?;
        let z = self.ff1.forward(g, store, z)?;
        let z = g.relu(z)?;
        let z = self.ff2.forward(g, store, z)?;
        Ok((g.add(z, q1)?, coeffs))
    }
}

#[derive(Clone, Debug)]
struct MonotoneHead {
    q: PositiveLinear,
    k: Linear,
    v: Linear,
}

/// Cross attention built from monotone parts: positive query and output
/// projections, non-negative keys and values, sigmoid coefficients, EMA
/// layer norms and a Gumbel feed-forward. Non-decreasing in the query.
#[derive(Clone, Debug)]
struct MonotoneAttention {
    ln_attn: EmaLayerNorm,
    heads: Vec<MonotoneHead>,
    out: PositiveLinear,
    ln_ff: EmaLayerNorm,
    ff1: PositiveLinear,
    act: Gumbel,
    ff2: PositiveLinear,
}

impl MonotoneAttention {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide d_model {d}")));
        }
        let dk = d / heads;
        let heads = (0..heads)
            .map(|h| {
                Ok(MonotoneHead {
                    q: PositiveLinear::unbiased(store, &format!("{prefix}.head{h}.q"), d, dk)?,
                    k: Linear::new(store, &format!("{prefix}.head{h}.k"), d, dk)?,
                    v: Linear::new(store, &format!("{prefix}.head{h}.v"), d, dk)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            ln_attn: EmaLayerNorm::new(store, &format!("{prefix}.ln_attn"), d, EMA_RATE)?,
            heads,
            out: PositiveLinear::unbiased(store, &format!("{prefix}.out"), d, d)?,
            ln_ff: EmaLayerNorm::new(store, &format!("{prefix}.ln_ff"), d, EMA_RATE)?,
            ff1: PositiveLinear::new(store, &format!("{prefix}.ff1"), d, d)?,
            act: Gumbel::new(store, &format!("{prefix}.ff_act"), d)?,
            ff2: PositiveLinear::new(store, &format!("{prefix}.ff2"), d, d)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        q: Var,
        memory: Var,
        mask: &Arc<Vec<bool>>,
    ) -> Result<(Var, Vec<Var>)> {
        let qn = self.ln_attn.forward(g, store, q, ctx)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut coeffs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let qh = h.q.forward(g, store, qn)?;
            let k = h.k.forward(g, store, memory)?;
            let k = g.softplus(k)?;
            let v = h.v.forward(g, store, memory)?;
            let v = g.softplus(v)?;
            let (o, a) = attention(g, qh, k, v, AttnActivation::Sigmoid, mask)?;
            outs.push(o);
            coeffs.push(a);
        }
        let cat = g.concat_cols(&outs)?;
        let a = self.out.forward(g, store, cat)?;
        let q1 = g.add(a, q)?;
        let z = self.ln_ff.forward(g, store, q1, ctx)?;
        let z = self.ff1.forward(g, store, z)?;
        let z = self.act.forward(g, store, z)?;
        let z = self.ff2.forward(g, store, z)?;
        Ok((g.add(z, q1)?, coeffs))
    }
}

#[derive(Clone, Debug)]
struct Lnm {
    weights: Linear,
    log_sigma: Linear,
    mu: Linear,
    marks: Linear,
}

#[derive(Clone, Debug)]
enum Body {
    Cp(PositiveHead),
    Rmtpp { c: Linear, w: String },
    Lnm(Lnm),
    MlpMc(PositiveHead),
    MlpCm { temporal: ParametricTemporal, mlp: MonotonicMlp },
    AttnMc { block: CrossAttention, head: PositiveHead },
    AttnCm { temporal: ParametricTemporal, block: MonotoneAttention, mlp: MonotonicMlp },
}

/// Any of the seven decoders, plus the beginning-of-sequence vector and the
/// base intensity (absent for CP).
#[derive(Clone, Debug)]
pub struct Decoder {
    spec: DecoderSpec,
    bos: String,
    body: Body,
    base: Option<BaseIntensity>,
}

/// Tangents below this are treated as a broken monotonicity guarantee.
const TANGENT_TOLERANCE: f64 = -1e-12;

impl Decoder {
    pub fn new(store: &mut ParamStore, spec: DecoderSpec) -> Result<Self> {
        let d = spec.d_model;
        let m = spec.num_marks;
        if d == 0 || !d.is_multiple_of(2) || m == 0 {
            return Err(Error::Config(format!("invalid decoder dimensions d_model={d}, marks={m}")));
        }
        if !(spec.beta_hat.is_finite() && spec.beta_hat > 0.0) {
            return Err(Error::Config(format!("beta_hat must be positive, got {}", spec.beta_hat)));
        }
        let bos = "dec.bos".to_string();
        store.insert_glorot(&bos, 1, d)?;
        let body = match spec.kind {
            DecoderKind::Cp => Body::Cp(PositiveHead::new(store, "dec.cp", d, d, m)?),
            DecoderKind::Rmtpp => {
                let w = "dec.rmtpp.w".to_string();
                store.insert(&w, Tensor::scalar(-0.1))?;
                Body::Rmtpp {
                    c: Linear::new(store, "dec.rmtpp.c", d, m)?,
                    w,
                }
            }
            DecoderKind::Lnm => {
                if spec.mixtures == 0 {
                    return Err(Error::Config("the log-normal mixture needs at least one component".into()));
                }
                let k = spec.mixtures;
                Body::Lnm(Lnm {
                    weights: Linear::new(store, "dec.lnm.weights", d, k)?,
                    log_sigma: Linear::new(store, "dec.lnm.log_sigma", d, k)?,
                    mu: Linear::new(store, "dec.lnm.mu", d, k)?,
                    marks: Linear::new(store, "dec.lnm.marks", d, m)?,
                })
            }
            DecoderKind::MlpMc => Body::MlpMc(PositiveHead::new(store, "dec.mlp_mc", 2 * d, d, m)?),
            DecoderKind::MlpCm => Body::MlpCm {
                temporal: ParametricTemporal::new(store, "dec.mlp_cm.temporal", d)?,
                mlp: MonotonicMlp::new(store, "dec.mlp_cm.mlp", &[2 * d, d, m], MonotonicOutput::GumbelSoftplus)?,
            },
            DecoderKind::AttnMc => Body::AttnMc {
                block: CrossAttention::new(store, "dec.attn_mc.block", d, spec.heads)?,
                head: PositiveHead::new(store, "dec.attn_mc", d, d, m)?,
            },
            DecoderKind::AttnCm => Body::AttnCm {
                temporal: ParametricTemporal::new(store, "dec.attn_cm.temporal", d)?,
                block: MonotoneAttention::new(store, "dec.attn_cm.block", d, spec.heads)?,
                mlp: MonotonicMlp::new(store, "dec.attn_cm.mlp", &[d, d, m], MonotonicOutput::GumbelSoftplus)?,
            },
        };
        let base = if spec.kind == DecoderKind::Cp {
            None
        } else {
            let rate = 1.0 / (spec.beta_hat * m as f64);
            Some(BaseIntensity::new(store, "dec.base", m, rate)?)
        };
        Ok(Self { spec, bos, body, base })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn kind(&self) -> DecoderKind {
        self.spec.kind
    }

    pub fn base(&self) -> Option<&BaseIntensity> {
        self.base.as_ref()
    }

    pub fn bos_name(&self) -> &str {
        &self.bos
    }

    /// Prepends the beginning-of-sequence row to the encoder output.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, z: Var, seq: &EventSequence) -> Result<Memory> {
        if g.shape(z)[0] != seq.len() {
            return Err(Error::Config(format!(
                "{} encoder rows for {} events",
                g.shape(z)[0],
                seq.len()
            )));
        }
        let bos = g.param(store, &self.bos)?;
        let z = if seq.is_empty() { bos } else { g.concat_rows(&[bos, z])? };
        let mut t_prev = Vec::with_capacity(seq.len() + 1);
        t_prev.push(seq.start());
        t_prev.extend(seq.events.iter().map(|e| e.time));
        Ok(Memory { z, t_prev })
    }

    /// Evaluates the queries `(intervals[i], taus[i])`, base intensity
    /// included.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        mem: &Memory,
        intervals: &[usize],
        taus: &[f64],
    ) -> Result<DecoderOutput> {
        if intervals.len() != taus.len() {
            return Err(Error::Config(format!(
                "{} intervals for {} query times",
                intervals.len(),
                taus.len()
            )));
        }
        if intervals.is_empty() {
            return Err(Error::Config("no decoder queries".into()));
        }
        if let Some(&k) = intervals.iter().find(|&&k| k >= mem.intervals()) {
            return Err(Error::Config(format!("interval {k} out of range 0..{}", mem.intervals())));
        }
        if let Some(i) = taus.iter().position(|&t| !(t >= 0.0 && t.is_finite())) {
            return Err(Error::invalid(
                format!("queries[{i}]"),
                format!("query time precedes the previous event (tau = {})", taus[i]),
            ));
        }
        let out = self.decode_body(g, store, ctx, mem, intervals, taus)?;
        match &self.base {
            Some(base) => base.mix(g, store, out, taus),
            None => Ok(out),
        }
    }

    fn query_values(&self, mem: &Memory, intervals: &[usize], taus: &[f64]) -> Vec<f64> {
        match self.spec.query_time {
            QueryTime::Relative => taus.to_vec(),
            QueryTime::Absolute => intervals.iter().zip(taus).map(|(&k, &t)| mem.t_prev[k] + t).collect(),
        }
    }

    fn lower_values(&self, mem: &Memory, intervals: &[usize]) -> Vec<f64> {
        match self.spec.query_time {
            QueryTime::Relative => vec![0.0; intervals.len()],
            QueryTime::Absolute => intervals.iter().map(|&k| mem.t_prev[k]).collect(),
        }
    }

    fn history_mask(&self, mem: &Memory, intervals: &[usize]) -> Arc<Vec<bool>> {
        let n = mem.intervals();
        let mut mask = vec![false; intervals.len() * n];
        for (r, &k) in intervals.iter().enumerate() {
            for j in 0..=k {
                mask[r * n + j] = true;
            }
        }
        Arc::new(mask)
    }

    fn decode_body(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        mem: &Memory,
        intervals: &[usize],
        taus: &[f64],
    ) -> Result<DecoderOutput> {
        match &self.body {
            Body::Cp(head) => {
                let z = g.gather_rows(mem.z, intervals.to_vec())?;
                let lambda = head.forward(g, store, z)?;
                let tau = g.constant(Tensor::column(taus));
                let big_lambda = g.mul(lambda, tau)?;
                Ok(DecoderOutput {
                    lambda,
                    big_lambda,
                    attention: Vec::new(),
                })
            }
            Body::Rmtpp { c, w } => {
                let z = g.gather_rows(mem.z, intervals.to_vec())?;
                let c = c.forward(g, store, z)?;
                let w_val = store.value(w)?.item();
                let w = g.param(store, w)?;
                let tau = g.constant(Tensor::column(taus));
                let wt = g.mul(tau, w)?;
                let arg = g.add(c, wt)?;
                let lambda = g.exp(arg)?;
                let ec = g.exp(c)?;
                let factor = if w_val.abs() < RMTPP_MIN_DECAY {
                    // tau + w tau^2 / 2
                    let half = g.mul_scalar(wt, 0.5)?;
                    let one = g.add_scalar(half, 1.0)?;
                    g.mul(tau, one)?
                } else {
                    let e = g.expm1(wt)?;
                    g.div(e, w)?
                };
                let big_lambda = g.mul(ec, factor)?;
                Ok(DecoderOutput {
                    lambda,
                    big_lambda,
                    attention: Vec::new(),
                })
            }
            Body::Lnm(lnm) => self.lnm_decode(g, store, lnm, mem, intervals, taus),
            Body::MlpMc(head) => self.mc_decode(g, ctx, mem, intervals, taus, |g, rows, xs| {
                let q = g.constant(temporal_embedding(xs, self.spec.d_model, self.spec.beta_hat)?);
                let z = g.gather_rows(mem.z, rows.to_vec())?;
                let x = g.concat_cols(&[q, z])?;
                Ok((head.forward(g, store, x)?, Vec::new()))
            }),
            Body::AttnMc { block, head } => self.mc_decode(g, ctx, mem, intervals, taus, |g, rows, xs| {
                let q = g.constant(temporal_embedding(xs, self.spec.d_model, self.spec.beta_hat)?);
                let mask = self.history_mask(mem, rows);
                let (h, coeffs) = block.forward(g, store, q, mem.z, &mask)?;
                Ok((head.forward(g, store, h)?, coeffs))
            }),
            Body::MlpCm { temporal, mlp } => self.cm_decode(g, ctx, mem, intervals, taus, |g, _ctx, rows, t| {
                let q = temporal.forward(g, store, t)?;
                let z = g.gather_rows(mem.z, rows.to_vec())?;
                let x = g.concat_cols(&[q, z])?;
                Ok((mlp.forward(g, store, x)?, Vec::new()))
            }),
            Body::AttnCm { temporal, block, mlp } => self.cm_decode(g, ctx, mem, intervals, taus, |g, ctx, rows, t| {
                let q = temporal.forward(g, store, t)?;
                let mask = self.history_mask(mem, rows);
                let (h, coeffs) = block.forward(g, store, ctx, q, mem.z, &mask)?;
                Ok((mlp.forward(g, store, h)?, coeffs))
            }),
        }
    }

    /// `lambda` at the query points plus a stratified Monte Carlo estimate
    /// of `Lambda`, sharing one forward pass and one set of sample times
    /// across marks.
    fn mc_decode<F>(
        &self,
        g: &mut Graph,
        ctx: &ForwardCtx,
        mem: &Memory,
        intervals: &[usize],
        taus: &[f64],
        lambda_at: F,
    ) -> Result<DecoderOutput>
    where
        F: Fn(&mut Graph, &[usize], &[f64]) -> Result<(Var, Vec<Var>)>,
    {
        let n = ctx.mc_samples;
        if n == 0 {
            return Err(Error::Config("at least one Monte Carlo sample is required".into()));
        }
        let q = intervals.len();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.mc_seed);
        let mut rows = intervals.to_vec();
        let mut sample_taus = taus.to_vec();
        for (&k, &tau) in intervals.iter().zip(taus) {
            for u in stratified_points(tau, n, Some(&mut rng)) {
                rows.push(k);
                sample_taus.push(u);
            }
        }
        let xs = self.query_values(mem, &rows, &sample_taus);
        let (all, coeffs) = lambda_at(g, &rows, &xs)?;
        let lambda = g.gather_rows(all, (0..q).collect())?;
        let samples = g.gather_rows(all, (q..rows.len()).collect())?;
        let sums = g.row_group_sum(samples, n)?;
        let scale: Vec<f64> = taus.iter().map(|t| t / n as f64).collect();
        let scale = g.constant(Tensor::column(&scale));
        let big_lambda = g.mul(sums, scale)?;
        let attention = coeffs
            .into_iter()
            .map(|c| g.gather_rows(c, (0..q).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(DecoderOutput {
            lambda,
            big_lambda,
            attention,
        })
    }

    /// `Lambda = G(t) - G(t_prev)` with `lambda` read off the time tangent
    /// of `G(t)`. Both ends go through one forward pass.
    fn cm_decode<F>(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        mem: &Memory,
        intervals: &[usize],
        taus: &[f64],
        cumulative: F,
    ) -> Result<DecoderOutput>
    where
        F: Fn(&mut Graph, &mut ForwardCtx, &[usize], Var) -> Result<(Var, Vec<Var>)>,
    {
        let q = intervals.len();
        let mut xs = self.query_values(mem, intervals, taus);
        xs.extend(self.lower_values(mem, intervals));
        let mut rows = intervals.to_vec();
        rows.extend_from_slice(intervals);
        let t = g.constant(Tensor::column(&xs));
        let t = g.seed_time_tangent(t)?;
        let (big_g, coeffs) = cumulative(g, ctx, &rows, t)?;
        let upper = g.gather_rows(big_g, (0..q).collect())?;
        let lower = g.gather_rows(big_g, (q..2 * q).collect())?;
        let big_lambda = g.sub(upper, lower)?;
        let lambda = match g.tangent(upper) {
            Some(l) => l,
            None => g.constant(Tensor::zeros(q, self.spec.num_marks)),
        };
        if let Some(bad) = g.value(lambda).data().iter().find(|&&v| v < TANGENT_TOLERANCE) {
            return Err(Error::Numerical(format!(
                "cumulative decoder produced a negative intensity {bad}"
            )));
        }
        let lambda = g.clamp_min(lambda, 0.0)?;
        let big_lambda = g.clamp_min(big_lambda, 0.0)?;
        let attention = coeffs
            .into_iter()
            .map(|c| g.gather_rows(c, (0..q).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(DecoderOutput {
            lambda,
            big_lambda,
            attention,
        })
    }

    /// Mixture density and survival of the inter-event time, spread over
    /// marks by `rho`: `lambda_m = rho_m pbar / S` so that
    /// `lambda_m exp(-Lambda) = pbar rho_m`, and `Lambda_m = -log S rho_m /
    /// sum(rho)` so the marks share the survival term.
    fn lnm_decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lnm: &Lnm,
        mem: &Memory,
        intervals: &[usize],
        taus: &[f64],
    ) -> Result<DecoderOutput> {
        let z = g.gather_rows(mem.z, intervals.to_vec())?;
        let logits = lnm.weights.forward(g, store, z)?;
        let lse = g.logsumexp_rows(logits)?;
        let log_w = g.sub(logits, lse)?;
        let log_sigma = lnm.log_sigma.forward(g, store, z)?;
        let mu = lnm.mu.forward(g, store, z)?;

        let log_tau: Vec<f64> = taus.iter().map(|t| t.max(LNM_MIN_TAU).ln()).collect();
        let lt = g.constant(Tensor::column(&log_tau));
        let neg_ls = g.neg(log_sigma)?;
        let inv_sigma = g.exp(neg_ls)?;
        let diff = g.sub(lt, mu)?;
        let zk = g.mul(diff, inv_sigma)?;
        let zsq = g.mul(zk, zk)?;
        let half = g.mul_scalar(zsq, -0.5)?;
        let norm = g.sub(half, log_sigma)?;
        let norm = g.sub(norm, lt)?;
        let log_n = g.add_scalar(norm, -0.5 * (2.0 * std::f64::consts::PI).ln())?;
        let terms = g.add(log_w, log_n)?;
        let log_p = g.logsumexp_rows(terms)?;
        let neg_z = g.neg(zk)?;
        let log_tail = g.log_ndtr(neg_z)?;
        let surv_terms = g.add(log_w, log_tail)?;
        let log_s = g.logsumexp_rows(surv_terms)?;

        let mark_logits = lnm.marks.forward(g, store, z)?;
        let log_rho = match self.spec.task {
            Task::MultiClass => {
                let lse = g.logsumexp_rows(mark_logits)?;
                g.sub(mark_logits, lse)?
            }
            Task::MultiLabel => {
                // log sigmoid(x) = -softplus(-x)
                let neg = g.neg(mark_logits)?;
                let sp = g.softplus(neg)?;
                g.neg(sp)?
            }
        };
        let hazard = g.sub(log_p, log_s)?;
        let log_lambda = g.add(log_rho, hazard)?;
        let lambda = g.exp(log_lambda)?;

        let rho = g.exp(log_rho)?;
        let total = g.sum_rows(rho)?;
        let share = g.div(rho, total)?;
        let cumulative = g.neg(log_s)?;
        let cumulative = g.clamp_min(cumulative, 0.0)?;
        // No time has elapsed on rows with tau = 0, whatever the floor gives.
        let elapsed: Vec<f64> = taus.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect();
        let elapsed = g.constant(Tensor::column(&elapsed));
        let cumulative = g.mul(cumulative, elapsed)?;
        let big_lambda = g.mul(share, cumulative)?;
        Ok(DecoderOutput {
            lambda,
            big_lambda,
            attention: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Event;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(kind: DecoderKind) -> DecoderSpec {
        DecoderSpec {
            kind,
            num_marks: 2,
            d_model: 4,
            heads: 2,
            task: Task::MultiClass,
            query_time: QueryTime::Relative,
            beta_hat: 1.5,
            mixtures: 3,
        }
    }

    fn memory(g: &mut Graph, store: &ParamStore, dec: &Decoder, seq: &EventSequence) -> Memory {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..seq.len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = g.constant(Tensor::new([seq.len(), 4], z).unwrap());
        dec.memory(g, store, z, seq).unwrap()
    }

    fn sequence() -> EventSequence {
        EventSequence::new(
            [0.0, 10.0],
            vec![Event::new(1.0, vec![0]), Event::new(2.5, vec![1]), Event::new(6.0, vec![0])],
        )
    }

    /// Adaptive Simpson quadrature.
    fn quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        step(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    fn eval_one(dec: &Decoder, store: &ParamStore, seq: &EventSequence, k: usize, tau: f64, samples: usize) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let mem = memory(&mut g, store, dec, seq);
        let mut ctx = ForwardCtx::eval(3, samples);
        let out = dec.decode(&mut g, store, &mut ctx, &mem, &[k], &[tau]).unwrap();
        (g.value(out.lambda).data().to_vec(), g.value(out.big_lambda).data().to_vec())
    }

    #[test]
    fn cp_is_time_independent() {
        let mut store = ParamStore::new(1);
        let dec = Decoder::new(&mut store, spec(DecoderKind::Cp)).unwrap();
        assert!(dec.base().is_none());
        let seq = sequence();
        let (l1, b1) = eval_one(&dec, &store, &seq, 2, 0.5, 1);
        let (l2, b2) = eval_one(&dec, &store, &seq, 2, 3.0, 1);
        assert_eq!(l1, l2);
        for m in 0..2 {
            assert!((b1[m] - 0.5 * l1[m]).abs() < 1e-15);
            assert!((b2[m] - 3.0 * l1[m]).abs() < 1e-15);
        }
        let (_, b0) = eval_one(&dec, &store, &seq, 1, 0.0, 1);
        assert_eq!(b0, vec![0.0, 0.0]);
    }

    #[test]
    fn rmtpp_closed_form_examples() {
        let (l, big) = rmtpp_closed_form(0.0, 1.0, 1.0);
        assert!((l - std::f64::consts::E).abs() < 1e-15);
        assert!((big - (std::f64::consts::E - 1.0)).abs() < 1e-15);
        let (_, big) = rmtpp_closed_form(0.0, 0.0, 2.0);
        assert_eq!(big, 2.0);
        for (c, w, tau) in [(0.3, -0.7, 2.0), (-1.0, 0.4, 3.5), (0.0, 1e-13, 1.0)] {
            let (_, big) = rmtpp_closed_form(c, w, tau);
            let q = quad(&|u| rmtpp_closed_form(c, w, u).0, 0.0, tau, 1e-14);
            assert!((big - q).abs() <= 1e-8 * q.abs(), "{c} {w} {tau}: {big} vs {q}");
        }
    }

    #[test]
    fn closed_form_decoders_match_quadrature() {
        for kind in [DecoderKind::Cp, DecoderKind::Rmtpp] {
            let mut store = ParamStore::new(4);
            let dec = Decoder::new(&mut store, spec(kind)).unwrap();
            let seq = sequence();
            let (_, big) = eval_one(&dec, &store, &seq, 2, 2.7, 1);
            for m in 0..2 {
                let f = |u: f64| eval_one(&dec, &store, &seq, 2, u, 1).0[m];
                let q = quad(&f, 0.0, 2.7, 1e-13);
                assert!((big[m] - q).abs() <= 1e-8 * q, "{kind:?} mark {m}: {} vs {q}", big[m]);
            }
        }
    }

    #[test]
    fn lnm_examples() {
        let p = lnm_density(&[1.0], &[0.0], &[1.0], 1.0).unwrap();
        assert!((p - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!(lnm_density(&[1.0], &[0.0], &[1.0], 0.0).is_err());
        let (w, mu, sigma) = ([0.2, 0.5, 0.3], [-0.5, 0.3, 1.2], [0.4, 1.0, 0.7]);
        // Substituting tau = e^x turns the density into a normal mixture in x.
        let total = quad(&|x: f64| lnm_density(&w, &mu, &sigma, x.exp()).unwrap() * x.exp(), -12.0, 12.0, 1e-12);
        assert!((total - 1.0).abs() < 1e-6);
        let tau: f64 = 2.2;
        let cdf = quad(&|x: f64| lnm_density(&w, &mu, &sigma, x.exp()).unwrap() * x.exp(), -12.0, tau.ln(), 1e-12);
        assert!((lnm_survival(&w, &mu, &sigma, tau) - (1.0 - cdf)).abs() < 1e-8);
    }

    #[test]
    fn lnm_decoder_density() {
        let mut store = ParamStore::new(2);
        let mut s = spec(DecoderKind::Lnm);
        s.num_marks = 4;
        let dec = Decoder::new(&mut store, s).unwrap();
        // Uniform marks, base intensity switched off.
        store.value_mut("dec.lnm.marks.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        *store.value_mut("dec.base.logits").unwrap() = Tensor::row(&[-1e3, 0.0]);
        let seq = sequence();
        let (lambda, big) = eval_one(&dec, &store, &seq, 1, 0.8, 1);
        let total: f64 = big.iter().sum();
        for m in 0..4 {
            let p = lambda[m] * (-total).exp();
            let density = (p * 4.0).ln();
            // Reconstruct the mixture from the heads by hand.
            let mut g = Graph::new();
            let mem = memory(&mut g, &store, &dec, &seq);
            let z = g.value(mem.z).row_slice(1).to_vec();
            let head = |name: &str| -> Vec<f64> {
                let w = store.value(&format!("dec.lnm.{name}.weight")).unwrap();
                let b = store.value(&format!("dec.lnm.{name}.bias")).unwrap();
                (0..3).map(|k| b.get(0, k) + (0..4).map(|i| z[i] * w.get(i, k)).sum::<f64>()).collect()
            };
            let logits = head("weights");
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / denom).collect();
            let sigma: Vec<f64> = head("log_sigma").iter().map(|v| v.exp()).collect();
            let want = lnm_density(&w, &head("mu"), &sigma, 0.8).unwrap();
            assert!((density - want.ln()).abs() < 1e-9, "{density} vs {}", want.ln());
            let surv = lnm_survival(&w, &head("mu"), &sigma, 0.8);
            assert!((total + surv.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn mc_integrator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 7, 50] {
            let v = mc_integrate(|_| vec![2.0], 0.0, 3.0, n, Some(&mut rng)).unwrap();
            assert!((v[0] - 6.0).abs() < 1e-12);
            let v = mc_integrate(|u| vec![u], 0.0, 2.0, n, None).unwrap();
            assert!((v[0] - 2.0).abs() < 1e-12);
        }
        assert!(mc_integrate(|_| vec![1.0], 0.0, 1.0, 0, None).is_err());
    }

    #[test]
    fn base_intensity_mixing() {
        let mut store = ParamStore::new(0);
        let base = BaseIntensity::new(&mut store, "b", 2, 0.3).unwrap();
        let mut g = Graph::new();
        let (a1, a2, mu) = base.components(&mut g, &store).unwrap();
        let (a1, a2) = (g.value(a1).item(), g.value(a2).item());
        assert!((a1 - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!((a2 - 0.047_425_873_177_566_78).abs() < 1e-12);
        assert!((a1 + a2 - 1.0).abs() < 1e-15);
        assert!(g.value(mu).data().iter().all(|m| (m - 0.3).abs() < 1e-12));

        let zero = g.constant(Tensor::zeros(2, 2));
        let out = DecoderOutput {
            lambda: zero,
            big_lambda: zero,
            attention: Vec::new(),
        };
        let mixed = base.mix(&mut g, &store, out, &[1.0, 2.0]).unwrap();
        for v in g.value(mixed.lambda).data() {
            assert!((v - a1 * 0.3).abs() < 1e-12);
        }
        assert!((g.value(mixed.big_lambda).get(1, 0) - 2.0 * a1 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn attention_decoders_only_see_the_past() {
        for kind in [DecoderKind::AttnMc, DecoderKind::AttnCm] {
            let mut store = ParamStore::new(6);
            let dec = Decoder::new(&mut store, spec(kind)).unwrap();
            let seq = sequence();
            let mut g = Graph::new();
            let mem = memory(&mut g, &store, &dec, &seq);
            let mut ctx = ForwardCtx::eval(0, 4);
            let out = dec.decode(&mut g, &store, &mut ctx, &mem, &[0, 1, 2, 3], &[0.5, 1.0, 1.0, 2.0]).unwrap();
            assert_eq!(out.attention.len(), 2);
            for head in &out.attention {
                let a = g.value(*head);
                for k in 0..4 {
                    for j in (k + 1)..4 {
                        assert_eq!(a.get(k, j), 0.0);
                    }
                    assert!(a.get(k, 0) > 0.0);
                }
            }
        }
    }

    #[test]
    fn attn_mc_single_key() {
        // With only the BOS row visible the softmax weight is one, so the
        // block output is fixed by the BOS value projection.
        let mut store = ParamStore::new(8);
        let dec = Decoder::new(&mut store, spec(DecoderKind::AttnMc)).unwrap();
        let seq = EventSequence::new([0.0, 5.0], Vec::new());
        let mut g = Graph::new();
        let empty = g_const_empty(&mut g);
        let mem = dec.memory(&mut g, &store, empty, &seq).unwrap();
        let mut ctx = ForwardCtx::eval(0, 2);
        let out = dec.decode(&mut g, &store, &mut ctx, &mem, &[0], &[1.3]).unwrap();
        let got = g.value(out.lambda).data().to_vec();

        let d = 4;
        let bos = store.value("dec.bos").unwrap().data().to_vec();
        let ln = |x: &[f64], prefix: &str| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let gain = store.value(&format!("{prefix}.gain")).unwrap();
            let off = store.value(&format!("{prefix}.offset")).unwrap();
            (0..d).map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * gain.get(0, i) + off.get(0, i)).collect()
        };
        let affine = |x: &[f64], name: &str, bias: bool| -> Vec<f64> {
            let w = store.value(&format!("{name}.weight")).unwrap();
            (0..w.cols())
                .map(|j| {
                    let b = if bias { store.value(&format!("{name}.bias")).unwrap().get(0, j) } else { 0.0 };
                    b + x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>()
                })
                .collect()
        };
        let q = temporal_embedding(&[1.3], d, 1.5).unwrap().data().to_vec();
        let mut cat = Vec::new();
        for h in 0..2 {
            cat.extend(affine(&bos, &format!("dec.attn_mc.block.attn.head{h}.v"), false));
        }
        let a = affine(&cat, "dec.attn_mc.block.attn.out", false);
        let q1: Vec<f64> = a.iter().zip(&q).map(|(x, y)| x + y).collect();
        let z = ln(&q1, "dec.attn_mc.block.ln_ff");
        let z: Vec<f64> = affine(&z, "dec.attn_mc.block.ff1", true).iter().map(|v| v.max(0.0)).collect();
        let z = affine(&z, "dec.attn_mc.block.ff2", true);
        let h: Vec<f64> = z.iter().zip(&q1).map(|(x, y)| x + y).collect();
        let h1: Vec<f64> = affine(&h, "dec.attn_mc.mlp.0", true).iter().map(|v| v.max(0.0)).collect();
        let out = affine(&h1, "dec.attn_mc.mlp.1", true);
        let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let s = sp(store.value("dec.attn_mc.act.raw_scale").unwrap().get(0, 0)) + 1e-6;
        let (a1, a2) = (3f64.exp() / (1.0 + 3f64.exp()), 1.0 / (1.0 + 3f64.exp()));
        let mu = sp(store.value("dec.base.raw_mu").unwrap().get(0, 0));
        for m in 0..2 {
            let want = a1 * mu + a2 * s * sp(out[m] / s);
            assert!((got[m] - want).abs() < 1e-12, "{} vs {want}", got[m]);
        }
    }

    fn g_const_empty(g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(0, 4))
    }

    #[test]
    fn cumulative_decoders_vanish_at_the_previous_event() {
        for kind in [DecoderKind::MlpCm, DecoderKind::AttnCm, DecoderKind::MlpMc, DecoderKind::Lnm] {
            let mut store = ParamStore::new(3);
            let dec = Decoder::new(&mut store, spec(kind)).unwrap();
            let (_, big) = eval_one(&dec, &store, &sequence(), 2, 0.0, 5);
            assert_eq!(big, vec![0.0, 0.0], "{kind:?}");
        }
    }

    #[test]
    fn rejects_bad_queries() {
        let mut store = ParamStore::new(3);
        let dec = Decoder::new(&mut store, spec(DecoderKind::Cp)).unwrap();
        let seq = sequence();
        let mut g = Graph::new();
        let mem = memory(&mut g, &store, &dec, &seq);
        let mut ctx = ForwardCtx::eval(0, 1);
        assert!(dec.decode(&mut g, &store, &mut ctx, &mem, &[0], &[-1.0]).is_err());
        assert!(dec.decode(&mut g, &store, &mut ctx, &mem, &[4], &[1.0]).is_err());
    }

    #[test]
    fn mlp_mc_monotone_within_noise() {
        let mut store = ParamStore::new(12);
        let dec = Decoder::new(&mut store, spec(DecoderKind::MlpMc)).unwrap();
        let seq = sequence();
        // Spread of repeated estimates gives the noise scale.
        let draws = |tau: f64| -> (f64, f64) {
            let vals: Vec<f64> = (0..30)
                .map(|s| {
                    let mut g = Graph::new();
                    let mem = memory(&mut g, &store, &dec, &seq);
                    let mut ctx = ForwardCtx::eval(s, 20);
                    let out = dec.decode(&mut g, &store, &mut ctx, &mem, &[1], &[tau]).unwrap();
                    g.value(out.big_lambda).data()[0]
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
            (mean, sd)
        };
        let mut prev = (0.0, 0.0);
        for tau in [0.2, 0.7, 1.5, 3.0] {
            let (m, sd) = draws(tau);
            assert!(m >= prev.0 - 3.0 * (sd + prev.1), "{tau}: {m} < {}", prev.0);
            prev = (m, sd);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cm_tangent_matches_fd(seed in 0u64..1000, k in 0usize..4, tau in 0.05f64..4.0, attn in proptest::bool::ANY) {
            let kind = if attn { DecoderKind::AttnCm } else { DecoderKind::MlpCm };
            let mut store = ParamStore::new(seed);
            let dec = Decoder::new(&mut store, spec(kind)).unwrap();
            let seq = sequence();
            let h = 1e-5;
            let (lambda, _) = eval_one(&dec, &store, &seq, k, tau, 1);
            let (_, up) = eval_one(&dec, &store, &seq, k, tau + h, 1);
            let (_, down) = eval_one(&dec, &store, &seq, k, tau - h, 1);
            for m in 0..2 {
                let fd = (up[m] - down[m]) / (2.0 * h);
                prop_assert!((lambda[m] - fd).abs() <= 1e-5 * lambda[m].abs().max(1e-3), "{} vs {fd}", lambda[m]);
            }
        }

        #[test]
        fn lambda_is_non_negative(seed in 0u64..1000, kind_ix in 0usize..7, k in 0usize..4, tau in 0.0f64..5.0) {
            let kind = DecoderKind::ALL[kind_ix];
            let mut store = ParamStore::new(seed);
            let dec = Decoder::new(&mut store, spec(kind)).unwrap();
            let (lambda, big) = eval_one(&dec, &store, &sequence(), k, tau, 4);
            prop_assert!(lambda.iter().chain(&big).all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
