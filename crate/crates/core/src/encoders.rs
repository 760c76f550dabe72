//! History encoders: label embedding plus continuous-time encoding, fed to a
//! GRU or a pre-norm self-attention stack.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ad::{Graph, ParamStore, Tensor, Var};
use crate::likelihood::EventSequence;
use crate::nn::{LayerNorm, Linear};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Gru,
    Sa,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Learnable per-mark embeddings pooled over each event's label set.
#[derive(Clone, Debug)]
pub struct LabelEmbedding {
    table: String,
    num_marks: usize,
    pooling: Pooling,
}

impl LabelEmbedding {
    pub fn new(store: &mut ParamStore, prefix: &str, num_marks: usize, dim: usize, pooling: Pooling) -> Result<Self> {
        if num_marks == 0 {
            return Err(Error::Config("at least one mark is required".into()));
        }
        let table = format!("{prefix}.table");
        store.insert_glorot(&table, num_marks, dim)?;
        Ok(Self {
            table,
            num_marks,
            pooling,
        })
    }

    pub fn table_name(&self) -> &str {
        &self.table
    }

    /// One pooled row per label set.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, label_sets: &[&[usize]]) -> Result<Var> {
        for (i, labels) in label_sets.iter().enumerate() {
            if labels.is_empty() {
                return Err(Error::invalid(format!("events[{i}].labels"), "empty mark set"));
            }
            if let Some(&m) = labels.iter().find(|&&m| m >= self.num_marks) {
                return Err(Error::invalid(
                    format!("events[{i}].labels"),
                    format!("mark {m} >= {}", self.num_marks),
                ));
            }
        }
        let table = g.param(store, &self.table)?;
        if label_sets.iter().all(|l| l.len() == 1) {
            return Ok(g.gather_rows(table, label_sets.iter().map(|l| l[0]).collect())?);
        }
        match self.pooling {
            Pooling::Mean => {
                let mut pool = Tensor::zeros(label_sets.len(), self.num_marks);
                for (i, labels) in label_sets.iter().enumerate() {
                    for &m in labels.iter() {
                        pool.set(i, m, 1.0 / labels.len() as f64);
                    }
                }
                let pool = g.constant(pool);
                Ok(g.matmul(pool, table)?)
            }
            Pooling::Max => {
                let mut rows = Vec::with_capacity(label_sets.len());
                for labels in label_sets {
                    let picked = g.gather_rows(table, labels.to_vec())?;
                    rows.push(g.max_over_rows(picked)?);
                }
                Ok(g.concat_rows(&rows)?)
            }
        }
    }
}

/// Sinusoidal encoding of continuous times, one row per time:
/// columns `2k, 2k+1` hold `sin(a_k t), cos(a_k t)` with
/// `a_k = 10000^(-2k/d) / beta_hat`.
pub fn temporal_embedding(times: &[f64], d_model: usize, beta_hat: f64) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("d_model must be even and positive, got {d_model}")));
    }
    if !(beta_hat.is_finite() && beta_hat > 0.0) {
        return Err(Error::Config(format!("beta_hat must be positive, got {beta_hat}")));
    }
    let rates = temporal_rates(d_model, beta_hat);
    let mut out = Tensor::zeros(times.len(), d_model);
    for (i, &t) in times.iter().enumerate() {
        for (k, a) in rates.iter().enumerate() {
            let (s, c) = (a * t).sin_cos();
            out.set(i, 2 * k, s);
            out.set(i, 2 * k + 1, c);
        }
    }
    Ok(out)
}

pub fn temporal_rates(d_model: usize, beta_hat: f64) -> Vec<f64> {
    (0..d_model / 2)
        .map(|k| 10000f64.powf(-2.0 * k as f64 / d_model as f64) / beta_hat)
        .collect()
}

/// Mean over sequences of `(w+ - w-) / N`, skipping sequences without
/// events, for which the ratio is undefined.
pub fn estimate_beta(train: &[EventSequence]) -> Result<f64> {
    let ratios: Vec<f64> = train
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.duration() / s.len() as f64)
        .collect();
    if ratios.is_empty() {
        return Err(Error::invalid(
            "sequences",
            "cannot estimate beta without a sequence that has events",
        ));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnActivation {
    Softmax,
    Sigmoid,
}

/// Scaled dot-product attention. `mask[i * keys + j]` says whether query
/// `i` may see key `j`; hidden keys get weight zero under either activation.
/// Returns the outputs and the coefficient matrix.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    activation: AttnActivation,
    mask: &Arc<Vec<bool>>,
) -> Result<(Var, Var)> {
    let [nq, dk] = g.shape(q);
    let [nk, dk2] = g.shape(k);
    if dk != dk2 || g.shape(v)[0] != nk {
        return Err(Error::Numerical(format!(
            "attention shapes: q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    if mask.len() != nq * nk {
        return Err(Error::Config("attention mask has the wrong size".into()));
    }
    let kt = g.transpose(k)?;
    let e = g.matmul(q, kt)?;
    let e = g.mul_scalar(e, 1.0 / (dk as f64).sqrt())?;
    let alpha = match activation {
        AttnActivation::Softmax => g.masked_softmax(e, mask.clone())?,
        AttnActivation::Sigmoid => {
            let s = g.sigmoid(e)?;
            let m = Tensor::new([nq, nk], mask.iter().map(|&b| f64::from(u8::from(b))).collect())?;
            let m = g.constant(m);
            g.mul(s, m)?
        }
    };
    let out = g.matmul(alpha, v)?;
    Ok((out, alpha))
}

/// Event `i` sees itself and every event strictly earlier in time.
pub fn causal_mask(times: &[f64]) -> Arc<Vec<bool>> {
    let n = times.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = j == i || times[j] < times[i];
        }
    }
    Arc::new(m)
}

#[derive(Clone, Debug)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
}

/// Multi-head attention with per-head projections and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHead {
    heads: Vec<Head>,
    out: Linear,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "{num_heads} heads do not divide d_model {d_model}"
            )));
        }
        let dk = d_model / num_heads;
        let heads = (0..num_heads)
            .map(|h| {
                Ok(Head {
                    q: Linear::unbiased(store, &format!("{prefix}.head{h}.q"), d_model, dk)?,
                    k: Linear::unbiased(store, &format!("{prefix}.head{h}.k"), d_model, dk)?,
                    v: Linear::unbiased(store, &format!("{prefix}.head{h}.v"), d_model, dk)?,
                })
            })
            .collect::<Result<_>>()?;
        let out = Linear::unbiased(store, &format!("{prefix}.out"), d_model, d_model)?;
        Ok(Self { heads, out })
    }

    /// Returns the combined output and each head's coefficients.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
        mask: &Arc<Vec<bool>>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut coeffs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = h.q.forward(g, store, queries)?;
            let k = h.k.forward(g, store, memory)?;
            let v = h.v.forward(g, store, memory)?;
            let (o, a) = attention(g, q, k, v, AttnActivation::Softmax, mask)?;
            outs.push(o);
            coeffs.push(a);
        }
        let cat = g.concat_cols(&outs)?;
        Ok((self.out.forward(g, store, cat)?, coeffs))
    }
}

/// GRU over the event encodings, `h_0 = 0`.
#[derive(Clone, Debug)]
pub struct GruEncoder {
    /// Input projections for the reset, update and new gates, side by side.
    input: Linear,
    /// Hidden projections for the same three gates.
    hidden: Linear,
    hidden_size: usize,
}

impl GruEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, input_size: usize, hidden_size: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &format!("{prefix}.input"), input_size, 3 * hidden_size)?,
            hidden: Linear::new(store, &format!("{prefix}.hidden"), hidden_size, 3 * hidden_size)?,
            hidden_size,
        })
    }

    /// `xs` has one row per event; returns one hidden state per row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: Var) -> Result<Var> {
        let n = g.shape(xs)[0];
        let h_dim = self.hidden_size;
        let gates_x = self.input.forward(g, store, xs)?;
        let mut h = g.constant(Tensor::zeros(1, h_dim));
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let gx = g.gather_rows(gates_x, vec![i])?;
            let gh = self.hidden.forward(g, store, h)?;
            let rx = g.slice_cols(gx, 0, h_dim)?;
            let rh = g.slice_cols(gh, 0, h_dim)?;
            let r = g.add(rx, rh)?;
            let r = g.sigmoid(r)?;
            let zx = g.slice_cols(gx, h_dim, 2 * h_dim)?;
            let zh = g.slice_cols(gh, h_dim, 2 * h_dim)?;
            let z = g.add(zx, zh)?;
            let z = g.sigmoid(z)?;
            let nx = g.slice_cols(gx, 2 * h_dim, 3 * h_dim)?;
            let nh = g.slice_cols(gh, 2 * h_dim, 3 * h_dim)?;
            let rn = g.mul(r, nh)?;
            let nn = g.add(nx, rn)?;
            let nn = g.tanh(nn)?;
            // (1 - z) n + z h  ==  n + z (h - n)
            let d = g.sub(h, nn)?;
            let zd = g.mul(z, d)?;
            h = g.add(nn, zd)?;
            states.push(h);
        }
        Ok(g.concat_rows(&states)?)
    }
}

#[derive(Clone, Debug)]
struct SaBlock {
    ln_attn: LayerNorm,
    attn: MultiHead,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm self-attention stack.
#[derive(Clone, Debug)]
pub struct SaEncoder {
    blocks: Vec<SaBlock>,
}

impl SaEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, num_heads: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("the encoder needs at least one layer".into()));
        }
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(SaBlock {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d_model)?,
                    attn: MultiHead::new(store, &format!("{p}.attn"), d_model, num_heads)?,
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d_model)?,
                    ff1: Linear::new(store, &format!("{p}.ff1"), d_model, d_model)?,
                    ff2: Linear::new(store, &format!("{p}.ff2"), d_model, d_model)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Returns the representations and, per layer, each head's coefficients.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xs: Var, times: &[f64]) -> Result<(Var, Vec<Vec<Var>>)> {
        if g.shape(xs)[0] != times.len() {
            return Err(Error::Config(format!(
                "{} inputs for {} times",
                g.shape(xs)[0],
                times.len()
            )));
        }
        let mask = causal_mask(times);
        let mut x = xs;
        let mut coeffs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let q = b.ln_attn.forward(g, store, x)?;
            let (a, c) = b.attn.forward(g, store, q, q, &mask)?;
            let q = g.add(a, x)?;
            let z = b.ln_ff.forward(g, store, q)?;
            let z = b.ff1.forward(g, store, z)?;
            let z = g.relu(z)?;
            let z = b.ff2.forward(g, store, z)?;
            x = g.add(z, q)?;
            coeffs.push(c);
        }
        Ok((x, coeffs))
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Gru(GruEncoder),
    Sa(SaEncoder),
}

/// Encoder output: one representation per event, plus the self-attention
/// coefficients when the backbone has them.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `N x d_model`; zero rows for an empty sequence.
    pub z: Var,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub num_marks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub pooling: Pooling,
}

/// Label embedding, temporal encoding and backbone.
#[derive(Clone, Debug)]
pub struct HistoryEncoder {
    embedding: LabelEmbedding,
    backbone: Backbone,
    d_model: usize,
    beta_hat: f64,
}

impl HistoryEncoder {
    pub fn new(store: &mut ParamStore, spec: EncoderSpec, beta_hat: f64) -> Result<Self> {
        if spec.d_model == 0 || !spec.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even and positive, got {}", spec.d_model)));
        }
        let embedding = LabelEmbedding::new(store, "enc.embedding", spec.num_marks, spec.d_model, spec.pooling)?;
        let backbone = match spec.kind {
            EncoderKind::Gru => {
                if spec.layers != 1 {
                    return Err(Error::Config("the GRU encoder has a single layer".into()));
                }
                Backbone::Gru(GruEncoder::new(store, "enc.gru", spec.d_model, spec.d_model)?)
            }
            EncoderKind::Sa => Backbone::Sa(SaEncoder::new(store, "enc.sa", spec.d_model, spec.heads, spec.layers)?),
        };
        Ok(Self {
            embedding,
            backbone,
            d_model: spec.d_model,
            beta_hat,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn beta_hat(&self) -> f64 {
        self.beta_hat
    }

    pub fn embedding(&self) -> &LabelEmbedding {
        &self.embedding
    }

    /// `x_i = v_i sqrt(d) + Temporal(t_i)`, one row per event.
    pub fn inputs(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence) -> Result<Var> {
        let labels: Vec<&[usize]> = seq.events.iter().map(|e| e.labels.as_slice()).collect();
        let v = self.embedding.embed(g, store, &labels)?;
        let v = g.mul_scalar(v, (self.d_model as f64).sqrt())?;
        let te = g.constant(temporal_embedding(&seq.times(), self.d_model, self.beta_hat)?);
        Ok(g.add(v, te)?)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seq: &EventSequence) -> Result<Encoded> {
        if seq.is_empty() {
            return Ok(Encoded {
                z: g.constant(Tensor::zeros(0, self.d_model)),
                attention: Vec::new(),
            });
        }
        let xs = self.inputs(g, store, seq)?;
        match &self.backbone {
            Backbone::Gru(gru) => Ok(Encoded {
                z: gru.forward(g, store, xs)?,
                attention: Vec::new(),
            }),
            Backbone::Sa(sa) => {
                let (z, attention) = sa.forward(g, store, xs, &seq.times())?;
                Ok(Encoded { z, attention })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Event;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn store_with_table(rows: &[Vec<f64>], pooling: Pooling) -> (ParamStore, LabelEmbedding) {
        let mut store = ParamStore::new(0);
        let emb = LabelEmbedding::new(&mut store, "e", rows.len(), rows[0].len(), pooling).unwrap();
        *store.value_mut(emb.table_name()).unwrap() = Tensor::from_rows(rows).unwrap();
        (store, emb)
    }

    #[test]
    fn label_pooling() {
        let rows = vec![vec![1.0, 3.0], vec![3.0, 1.0], vec![5.0, 6.0]];
        for pooling in [Pooling::Mean, Pooling::Max] {
            let (store, emb) = store_with_table(&rows, pooling);
            let mut g = Graph::new();
            let v = emb.embed(&mut g, &store, &[&[2], &[0, 1]]).unwrap();
            assert_eq!(g.value(v).row_slice(0), &[5.0, 6.0]);
            let want = if pooling == Pooling::Mean { [2.0, 2.0] } else { [3.0, 3.0] };
            assert_eq!(g.value(v).row_slice(1), &want);
        }
        let (store, emb) = store_with_table(&rows, Pooling::Mean);
        let mut g = Graph::new();
        assert!(emb.embed(&mut g, &store, &[&[]]).is_err());
        assert!(emb.embed(&mut g, &store, &[&[3]]).is_err());
    }

    #[test]
    fn temporal_embedding_basics() {
        let e = temporal_embedding(&[0.0], 6, 2.5).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(temporal_embedding(&[0.0], 5, 1.0).is_err());
        // With unit beta the encoding is the positional one at integer times.
        let d = 8;
        let e = temporal_embedding(&[7.0], d, 1.0).unwrap();
        for k in 0..d / 2 {
            let w = 1.0 / 10000f64.powf(2.0 * k as f64 / d as f64);
            assert!(close(e.get(0, 2 * k), (7.0 * w).sin(), 1e-15));
            assert!(close(e.get(0, 2 * k + 1), (7.0 * w).cos(), 1e-15));
        }
    }

    #[test]
    fn beta_estimate() {
        let s = |hi: f64, n: usize| {
            EventSequence::new([0.0, hi], (0..n).map(|i| Event::new(i as f64 * 0.1, vec![0])).collect())
        };
        assert!(close(estimate_beta(&[s(10.0, 5), s(20.0, 4)]).unwrap(), 3.5, 1e-15));
        assert_eq!(estimate_beta(&[s(1.0, 1)]).unwrap(), 1.0);
        assert!(estimate_beta(&[]).is_err());
        assert!(estimate_beta(&[s(1.0, 0)]).is_err());
        assert_eq!(estimate_beta(&[s(1.0, 0), s(6.0, 2)]).unwrap(), 3.0);
    }

    #[test]
    fn temporal_encode_example() {
        let mut store = ParamStore::new(0);
        let spec = EncoderSpec {
            kind: EncoderKind::Gru,
            num_marks: 1,
            d_model: 4,
            heads: 1,
            layers: 1,
            pooling: Pooling::Mean,
        };
        let enc = HistoryEncoder::new(&mut store, spec, 1.0).unwrap();
        *store.value_mut(enc.embedding().table_name()).unwrap() = Tensor::full(1, 4, 1.0);
        let seq = EventSequence::new([0.0, 1.0], vec![Event::new(0.0, vec![0])]);
        let mut g = Graph::new();
        let x = enc.inputs(&mut g, &store, &seq).unwrap();
        assert_eq!(g.value(x).data(), &[2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(&[1.0, -2.0]));
        let k = g.constant(Tensor::row(&[0.3, 0.4]));
        let v = g.constant(Tensor::row(&[7.0, -1.0]));
        let (o, a) = attention(&mut g, q, k, v, AttnActivation::Softmax, &Arc::new(vec![true])).unwrap();
        assert_eq!(g.value(o).data(), &[7.0, -1.0]);
        assert_eq!(g.value(a).item(), 1.0);

        let q = g.constant(Tensor::row(&[0.0, 0.0]));
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let (_, a) = attention(&mut g, q, k, v, AttnActivation::Sigmoid, &Arc::new(vec![true, false])).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 0.0]);

        // Logits (0, ln 3) through one-dimensional keys.
        let q = g.constant(Tensor::scalar(1.0));
        let k = g.constant(Tensor::column(&[0.0, 3f64.ln()]));
        let v = g.constant(Tensor::column(&[1.0, 2.0]));
        let (_, a) = attention(&mut g, q, k, v, AttnActivation::Softmax, &Arc::new(vec![true, true])).unwrap();
        assert!(close(g.value(a).get(0, 0), 0.25, 1e-15));
        assert!(close(g.value(a).get(0, 1), 0.75, 1e-15));
    }

    #[test]
    fn zero_gru_stays_zero() {
        let mut store = ParamStore::new(0);
        let gru = GruEncoder::new(&mut store, "gru", 3, 4).unwrap();
        for name in store.trainable_names() {
            let t = store.value_mut(&name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let xs = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, 0.5]]).unwrap());
        let h = gru.forward(&mut g, &store, xs).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    /// Straight-line GRU with the weight blocks split out by hand.
    fn gru_reference(store: &ParamStore, xs: &[Vec<f64>], h_dim: usize) -> Vec<Vec<f64>> {
        let wi = store.value("gru.input.weight").unwrap();
        let bi = store.value("gru.input.bias").unwrap();
        let wh = store.value("gru.hidden.weight").unwrap();
        let bh = store.value("gru.hidden.bias").unwrap();
        let affine = |w: &Tensor, b: &Tensor, x: &[f64], block: usize, j: usize| {
            let col = block * h_dim + j;
            b.get(0, col) + x.iter().enumerate().map(|(i, v)| v * w.get(i, col)).sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; h_dim];
        let mut out = Vec::new();
        for x in xs {
            let mut next = vec![0.0; h_dim];
            for j in 0..h_dim {
                let r = sig(affine(wi, bi, x, 0, j) + affine(wh, bh, &h, 0, j));
                let z = sig(affine(wi, bi, x, 1, j) + affine(wh, bh, &h, 1, j));
                let n = (affine(wi, bi, x, 2, j) + r * affine(wh, bh, &h, 2, j)).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn gru_matches_reference() {
        let mut store = ParamStore::new(5);
        let gru = GruEncoder::new(&mut store, "gru", 3, 4).unwrap();
        for name in store.trainable_names() {
            let mut rng = store.rng_for(&format!("{name}/bias"));
            use rand::Rng;
            for v in store.value_mut(&name).unwrap().data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let xs = vec![vec![0.1, -1.0, 2.0], vec![1.5, 0.2, -0.3], vec![-0.7, 0.9, 0.4]];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&xs).unwrap());
        let h = gru.forward(&mut g, &store, x).unwrap();
        let want = gru_reference(&store, &xs, 4);
        for (i, row) in want.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!(close(g.value(h).get(i, j), v, 1e-14));
            }
        }
    }

    fn random_sequence(times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::new(
            [0.0, 20.0],
            times.iter().zip(marks).map(|(&t, &m)| Event::new(t, vec![m])).collect(),
        )
    }

    fn encoder(kind: EncoderKind) -> (ParamStore, HistoryEncoder) {
        let mut store = ParamStore::new(9);
        let spec = EncoderSpec {
            kind,
            num_marks: 3,
            d_model: 8,
            heads: 2,
            layers: 1,
            pooling: Pooling::Mean,
        };
        let enc = HistoryEncoder::new(&mut store, spec, 1.3).unwrap();
        (store, enc)
    }

    #[test]
    fn sa_coefficients() {
        let (store, enc) = encoder(EncoderKind::Sa);
        let seq = random_sequence(&[1.0], &[0]);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &store, &seq).unwrap();
        assert_eq!(g.value(out.attention[0][0]).item(), 1.0);

        let seq = random_sequence(&[1.0, 2.0, 4.5, 7.0], &[0, 2, 1, 1]);
        let out = enc.encode(&mut g, &store, &seq).unwrap();
        for head in &out.attention[0] {
            let a = g.value(*head);
            for i in 0..4 {
                assert!(close(a.row_slice(i).iter().sum::<f64>(), 1.0, 1e-12));
                for j in (i + 1)..4 {
                    assert_eq!(a.get(i, j), 0.0);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn encoders_are_causal(
            gaps in proptest::collection::vec(0.05f64..2.0, 5),
            marks in proptest::collection::vec(0usize..3, 5),
            cut in 1usize..5,
            new_mark in 0usize..3,
            shift in 0.01f64..3.0,
        ) {
            let times: Vec<f64> = gaps.iter().scan(0.0, |t, g| { *t += g; Some(*t) }).collect();
            let base = random_sequence(&times, &marks);
            let mut changed = base.clone();
            for e in changed.events.iter_mut().skip(cut) {
                e.time += shift;
                e.labels = vec![new_mark];
            }
            changed.window[1] += shift;
            for kind in [EncoderKind::Gru, EncoderKind::Sa] {
                let (store, enc) = encoder(kind);
                let mut g = Graph::new();
                let a = enc.encode(&mut g, &store, &base).unwrap();
                let b = enc.encode(&mut g, &store, &changed).unwrap();
                for i in 0..cut {
                    prop_assert_eq!(g.value(a.z).row_slice(i), g.value(b.z).row_slice(i));
                }
            }
        }

        #[test]
        fn temporal_embedding_rotates(t in -50.0f64..50.0, s in -50.0f64..50.0, beta in 0.1f64..10.0) {
            let d = 8;
            let et = temporal_embedding(&[t], d, beta).unwrap();
            let es = temporal_embedding(&[s], d, beta).unwrap();
            for (k, a) in temporal_rates(d, beta).iter().enumerate() {
                let (sin, cos) = (a * (t - s)).sin_cos();
                let (x, y) = (es.get(0, 2 * k), es.get(0, 2 * k + 1));
                // [sin(a t), cos(a t)] = R(t - s) [sin(a s), cos(a s)]
                prop_assert!(close(et.get(0, 2 * k), cos * x + sin * y, 1e-10));
                prop_assert!(close(et.get(0, 2 * k + 1), -sin * x + cos * y, 1e-10));
            }
            prop_assert!(et.data().iter().all(|v| v.abs() <= 1.0));
        }
    }
}
