//! Unconstrained layers shared by encoders and decoders.

use crate::ad::{Graph, ParamStore, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the mode, the Monte Carlo stream, and any running
/// statistic updates queued by layers during the pass.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    /// Seed of the Monte Carlo stream for this forward pass.
    pub mc_seed: u64,
    /// Number of Monte Carlo samples per interval.
    pub mc_samples: usize,
    /// `(buffer name, batch statistic)` pairs; applied by the trainer after
    /// the pass, never during it.
    pub stat_updates: Vec<(String, Tensor)>,
}

impl ForwardCtx {
    pub fn eval(mc_seed: u64, mc_samples: usize) -> Self {
        Self {
            mode: Mode::Eval,
            mc_seed,
            mc_samples,
            stat_updates: Vec::new(),
        }
    }

    pub fn train(mc_seed: u64, mc_samples: usize) -> Self {
        Self {
            mode: Mode::Train,
            ..Self::eval(mc_seed, mc_samples)
        }
    }
}

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert_glorot(&weight, in_dim, out_dim)?;
        store.insert(&bias, Tensor::zeros(1, out_dim))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// A plain projection `x W`.
    pub fn unbiased(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        store.insert_glorot(&weight, in_dim, out_dim)?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

/// Row-wise layer normalisation with learnable gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: String,
    offset: String,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let offset = format!("{prefix}.offset");
        store.insert(&gain, Tensor::full(1, dim, 1.0))?;
        store.insert(&offset, Tensor::zeros(1, dim))?;
        Ok(Self { gain, offset })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mean = g.mean_rows(x)?;
        let c = g.sub(x, mean)?;
        let sq = g.mul(c, c)?;
        let var = g.mean_rows(sq)?;
        let var = g.add_scalar(var, LN_EPS)?;
        let inv = g.powf(var, -0.5)?;
        let n = g.mul(c, inv)?;
        let gain = g.param(store, &self.gain)?;
        let offset = g.param(store, &self.offset)?;
        let y = g.mul(n, gain)?;
        Ok(g.add(y, offset)?)
    }
}

/// Dense network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h)?;
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }
}

/// Inverse of softplus, used to initialise parameters stored pre-softplus.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Positive scale `softplus(raw) + 1e-6` read from a raw parameter.
pub(crate) fn positive_scale(g: &mut Graph, store: &ParamStore, raw: &str) -> Result<Var> {
    let r = g.param(store, raw)?;
    let s = g.softplus(r)?;
    Ok(g.add_scalar(s, 1e-6)?)
}

/// Scaled softplus `s * log(1 + exp(x / s))` with a learnable positive `s`
/// per output column.
#[derive(Clone, Debug)]
pub struct ScaledSoftplus {
    raw_scale: String,
}

impl ScaledSoftplus {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let raw_scale = format!("{prefix}.raw_scale");
        store.insert(&raw_scale, Tensor::full(1, dim, softplus_inverse(1.0 - 1e-6)))?;
        Ok(Self { raw_scale })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = positive_scale(g, store, &self.raw_scale)?;
        let xs = g.div(x, s)?;
        let sp = g.softplus(xs)?;
        Ok(g.mul(sp, s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_softplus_unit_scale_is_softplus() {
        let mut store = ParamStore::new(0);
        let act = ScaledSoftplus::new(&mut store, "act", 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 3.0]));
        let y = act.forward(&mut g, &store, x).unwrap();
        let y = g.value(y);
        assert!((y.get(0, 0) - 2f64.ln()).abs() < 1e-9);
        assert!((y.get(0, 1) - (1.0 + 3f64.exp()).ln()).abs() < 1e-8);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut store = ParamStore::new(0);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 5.0, 10.0]]).unwrap());
        let y = ln.forward(&mut g, &store, x).unwrap();
        for r in 0..2 {
            let row = g.value(y).row_slice(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 7.0, 40.0] {
            let x = softplus_inverse(y);
            let back = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
            assert!((back - y).abs() < 1e-12 * y.max(1.0));
        }
    }
}
