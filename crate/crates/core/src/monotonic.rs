//! Blocks whose outputs are non-decreasing in every input coordinate.
//!
//! Composing them (positive projections, Gumbel-type activations, EMA layer
//! norm) keeps the whole network monotone, which is what cumulative
//! intensity decoders rely on.

use crate::ad::{Graph, ParamStore, Tensor, Var};
use crate::nn::{positive_scale, softplus_inverse, ForwardCtx, Mode};
use crate::{Error, Result};

/// Lower bound applied to positive weights in the forward pass.
pub const POSITIVE_EPS: f64 = 1e-30;

/// Default EMA rate for running layer-norm statistics.
pub const EMA_RATE: f64 = 0.1;

/// `x max(V, eps) + b`. The clamp passes gradients straight through.
#[derive(Clone, Debug)]
pub struct PositiveLinear {
    raw_weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PositiveLinear {
    /// Raw weights start at the absolute value of a Glorot draw so no entry
    /// begins clamped.
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bias = format!("{prefix}.bias");
        let mut layer = Self::unbiased(store, prefix, in_dim, out_dim)?;
        store.insert(&bias, Tensor::zeros(1, out_dim))?;
        layer.bias = Some(bias);
        Ok(layer)
    }

    /// `x max(V, eps)` with no offset.
    pub fn unbiased(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let raw_weight = format!("{prefix}.raw_weight");
        let w = store.glorot(&raw_weight, in_dim, out_dim).map(f64::abs);
        store.insert(&raw_weight, w)?;
        Ok(Self {
            raw_weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn weight(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let v = g.param(store, &self.raw_weight)?;
        Ok(g.clamp_min_st(v, POSITIVE_EPS)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = self.weight(g, store)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn raw_weight_name(&self) -> &str {
        &self.raw_weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

/// Adaptive Gumbel activation `1 - (1 + s e^x)^(-1/s)` with one `s` per
/// column, `s = softplus(raw) + 1e-6`.
#[derive(Clone, Debug)]
pub struct Gumbel {
    raw_s: String,
}

/// `(1 + s e^x)^(-1/s)` is evaluated as `exp(-psp(x, s))`, where
/// `psp(x, s) = log(1 + s e^x) / s` is computed through a shifted softplus,
/// so no intermediate overflows.
fn gumbel_var(g: &mut Graph, x: Var, s: Var) -> Result<(Var, Var)> {
    let psp = g.param_softplus(x, s)?;
    let neg = g.neg(psp)?;
    let e = g.expm1(neg)?;
    let out = g.neg(e)?;
    Ok((out, psp))
}

impl Gumbel {
    /// Starts at `s = 1`, where the activation is the logistic sigmoid.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let raw_s = format!("{prefix}.raw_s");
        store.insert(&raw_s, Tensor::full(1, dim, softplus_inverse(1.0 - 1e-6)))?;
        Ok(Self { raw_s })
    }

    pub fn s(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        positive_scale(g, store, &self.raw_s)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = self.s(g, store)?;
        Ok(gumbel_var(g, x, s)?.0)
    }

    pub fn raw_s_name(&self) -> &str {
        &self.raw_s
    }
}

/// `gumbel(x) * (1 + psp(x))` sharing one `s` for both factors. Positive,
/// non-decreasing and unbounded above.
#[derive(Clone, Debug)]
pub struct GumbelSoftplus {
    raw_s: String,
}

impl GumbelSoftplus {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let raw_s = format!("{prefix}.raw_s");
        store.insert(&raw_s, Tensor::full(1, dim, softplus_inverse(1.0 - 1e-6)))?;
        Ok(Self { raw_s })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = positive_scale(g, store, &self.raw_s)?;
        let (gum, psp) = gumbel_var(g, x, s)?;
        let one_plus = g.add_scalar(psp, 1.0)?;
        Ok(g.mul(gum, one_plus)?)
    }

    pub fn raw_s_name(&self) -> &str {
        &self.raw_s
    }
}

/// Scalar Gumbel activation.
pub fn gumbel(x: f64, s: f64) -> f64 {
    -(-log1p_s_exp(x, s) / s).exp_m1()
}

/// `log(1 + s e^x)` without overflow.
fn log1p_s_exp(x: f64, s: f64) -> f64 {
    let y = x + s.ln();
    if y > 0.0 {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

/// `e^x (1 + s e^x)^(-(s+1)/s)`.
pub fn gumbel_derivative(x: f64, s: f64) -> f64 {
    (x - (s + 1.0) / s * log1p_s_exp(x, s)).exp()
}

/// `e^x (1 - e^x) (1 + s e^x)^(-(2s+1)/s)`.
pub fn gumbel_second_derivative(x: f64, s: f64) -> f64 {
    -x.exp_m1() * (x - (2.0 * s + 1.0) / s * log1p_s_exp(x, s)).exp()
}

/// Peak of the first derivative, attained at `x = 0`: `(1 + s)^(-(s+1)/s)`.
///
/// At `s = 1` this is the sigmoid's 1/4, and it rises to `1/e` as `s -> 0`.
pub fn gumbel_max_derivative(s: f64) -> f64 {
    (-(s + 1.0) / s * s.ln_1p()).exp()
}

/// Layer normalisation with running statistics used as constants, so the
/// map stays affine and entrywise non-decreasing.
#[derive(Clone, Debug)]
pub struct EmaLayerNorm {
    raw_gain: String,
    offset: String,
    running_mean: String,
    running_std: String,
    pub rate: f64,
}

/// Added to the batch variance before taking the square root, so a single
/// row cannot drive the running std to zero.
const EMA_VAR_EPS: f64 = 1e-5;

impl EmaLayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config(format!("EMA rate must lie in (0, 1), got {rate}")));
        }
        let s = Self {
            raw_gain: format!("{prefix}.raw_gain"),
            offset: format!("{prefix}.offset"),
            running_mean: format!("{prefix}.running_mean"),
            running_std: format!("{prefix}.running_std"),
            rate,
        };
        store.insert(&s.raw_gain, Tensor::full(1, dim, 1.0))?;
        store.insert(&s.offset, Tensor::zeros(1, dim))?;
        store.insert_buffer(&s.running_mean, Tensor::zeros(1, dim))?;
        store.insert_buffer(&s.running_std, Tensor::full(1, dim, 1.0))?;
        Ok(s)
    }

    /// In train mode the per-feature batch statistics of `x` are queued on
    /// `ctx`; they only take effect through [`apply_stat_updates`].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let std = store.value(&self.running_std)?;
        if std.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical(format!("{} has a non-positive entry", self.running_std)));
        }
        let mean = g.param(store, &self.running_mean)?;
        let std = g.param(store, &self.running_std)?;
        let raw_gain = g.param(store, &self.raw_gain)?;
        let gain = g.clamp_min_st(raw_gain, POSITIVE_EPS)?;
        let offset = g.param(store, &self.offset)?;
        let c = g.sub(x, mean)?;
        let n = g.div(c, std)?;
        let y = g.mul(n, gain)?;
        let y = g.add(y, offset)?;

        if ctx.mode == Mode::Train {
            let xv = g.value(x);
            let [rows, cols] = xv.shape();
            let mut mu = vec![0.0; cols];
            for r in 0..rows {
                for (m, v) in mu.iter_mut().zip(xv.row_slice(r)) {
                    *m += v / rows as f64;
                }
            }
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for ((s, v), m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mu) {
                    *s += (v - m).powi(2) / rows as f64;
                }
            }
            let sd: Vec<f64> = var.iter().map(|v| (v + EMA_VAR_EPS).sqrt()).collect();
            ctx.stat_updates.push((self.running_mean.clone(), Tensor::row(&mu)));
            ctx.stat_updates.push((self.running_std.clone(), Tensor::row(&sd)));
        }
        Ok(y)
    }

    pub fn running_mean_name(&self) -> &str {
        &self.running_mean
    }

    pub fn running_std_name(&self) -> &str {
        &self.running_std
    }
}

/// Applies queued running-statistic updates in order:
/// `stat <- (1 - rate) * stat + rate * batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[(String, Tensor)], rate: f64) -> Result<()> {
    for (name, batch) in updates {
        let cur = store.value_mut(name)?;
        if cur.shape() != batch.shape() {
            return Err(Error::Numerical(format!("statistic {name} changed shape")));
        }
        for (c, b) in cur.data_mut().iter_mut().zip(batch.data()) {
            *c = (1.0 - rate) * *c + rate * b;
        }
    }
    Ok(())
}

/// Final activation of a [`MonotonicMlp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MonotonicOutput {
    Linear,
    Gumbel,
    GumbelSoftplus,
}

#[derive(Clone, Debug)]
enum OutputAct {
    Linear,
    Gumbel(Gumbel),
    GumbelSoftplus(GumbelSoftplus),
}

/// Positive projections with Gumbel activations between them.
#[derive(Clone, Debug)]
pub struct MonotonicMlp {
    layers: Vec<PositiveLinear>,
    hidden: Vec<Gumbel>,
    output: OutputAct,
}

impl MonotonicMlp {
    /// `dims` lists every width, input first.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], output: MonotonicOutput) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("a monotonic MLP needs at least one layer".into()));
        }
        let mut layers = Vec::new();
        let mut hidden = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(PositiveLinear::new(store, &format!("{prefix}.{i}"), w[0], w[1])?);
            if i + 2 < dims.len() {
                hidden.push(Gumbel::new(store, &format!("{prefix}.{i}.act"), w[1])?);
            }
        }
        let last = *dims.last().expect("checked above");
        let output = match output {
            MonotonicOutput::Linear => OutputAct::Linear,
            MonotonicOutput::Gumbel => OutputAct::Gumbel(Gumbel::new(store, &format!("{prefix}.out"), last)?),
            MonotonicOutput::GumbelSoftplus => {
                OutputAct::GumbelSoftplus(GumbelSoftplus::new(store, &format!("{prefix}.out"), last)?)
            }
        };
        Ok(Self { layers, hidden, output })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if let Some(act) = self.hidden.get(i) {
                h = act.forward(g, store, h)?;
            }
        }
        match &self.output {
            OutputAct::Linear => Ok(h),
            OutputAct::Gumbel(a) => a.forward(g, store, h),
            OutputAct::GumbelSoftplus(a) => a.forward(g, store, h),
        }
    }

    pub fn layers(&self) -> &[PositiveLinear] {
        &self.layers
    }
}

/// Learnable monotone time encoding `t -> R^d`: a two-layer monotonic MLP
/// with Gumbel activations.
#[derive(Clone, Debug)]
pub struct ParametricTemporal {
    mlp: MonotonicMlp,
}

impl ParametricTemporal {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize) -> Result<Self> {
        let mlp = MonotonicMlp::new(store, prefix, &[1, d_model, d_model], MonotonicOutput::Gumbel)?;
        Ok(Self { mlp })
    }

    /// `t` is a column of times; returns one row per time.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t: Var) -> Result<Var> {
        self.mlp.forward(g, store, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn positive_linear_clamps_forward_only() {
        let mut store = ParamStore::new(0);
        let layer = PositiveLinear::new(&mut store, "pl", 2, 1).unwrap();
        *store.value_mut(layer.raw_weight_name()).unwrap() = Tensor::column(&[-5.0, 0.5]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0]));
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).item(), 1e-30 + 1.0);
        let grads = g.backward(y).unwrap();
        // Straight-through: the clamped entry still receives x_0 = 1.
        assert_eq!(grads.get("pl.raw_weight").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn gumbel_at_unit_s_is_sigmoid() {
        for i in -400..=400 {
            let x = f64::from(i) * 0.1;
            assert!((gumbel(x, 1.0) - sigmoid(x)).abs() < 1e-12, "x={x}");
        }
        assert!((gumbel(0.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gumbel_graph_matches_scalar() {
        let mut store = ParamStore::new(0);
        let act = Gumbel::new(&mut store, "g", 3).unwrap();
        *store.value_mut(act.raw_s_name()).unwrap() = Tensor::row(&[softplus_inverse(0.01), 0.0, softplus_inverse(10.0)]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-3.0, 0.5, 800.0]));
        let y = act.forward(&mut g, &store, x).unwrap();
        let s = [0.01 + 1e-6, 2f64.ln() + 1e-6, 10.0 + 1e-6];
        for (j, (&xv, &sv)) in [-3.0, 0.5, 800.0].iter().zip(&s).enumerate() {
            let want = gumbel(xv, sv);
            assert!((g.value(y).get(0, j) - want).abs() < 1e-12);
        }
        assert_eq!(g.value(y).get(0, 2), 1.0);
    }

    #[test]
    fn gumbel_peak_derivative() {
        assert!((gumbel_max_derivative(1.0) - 0.25).abs() < 1e-15);
        for s in [1e-3, 0.1, 0.5, 1.0, 3.0, 10.0] {
            let peak = gumbel_derivative(0.0, s);
            assert!((peak - gumbel_max_derivative(s)).abs() < 1e-12);
            // A dense scan never beats the value at zero.
            let scan = (-20000..=20000)
                .map(|i| gumbel_derivative(f64::from(i) * 1e-3, s))
                .fold(0.0, f64::max);
            assert!(scan <= peak + 1e-15);
            assert!(peak <= (-1.0f64).exp() + 1e-9);
        }
    }

    #[test]
    fn gumbel_curvature_changes_sign_at_zero() {
        for s in [1e-3, 0.1, 1.0, 10.0] {
            for i in 1..200 {
                let x = f64::from(i) * 0.05;
                assert!(gumbel_second_derivative(-x, s) > 0.0);
                // Far right the value underflows for small s, so only the sign
                // is checked there.
                let right = gumbel_second_derivative(x, s);
                assert!(right <= 0.0);
                if x <= 2.0 {
                    assert!(right < 0.0);
                }
            }
            assert_eq!(gumbel_second_derivative(0.0, s), 0.0);
        }
    }

    #[test]
    fn gumbel_derivatives_match_finite_differences() {
        let h = 1e-5;
        for s in [0.05, 1.0, 4.0] {
            for x in [-4.0, -0.3, 0.0, 0.7, 5.0] {
                let fd1 = (gumbel(x + h, s) - gumbel(x - h, s)) / (2.0 * h);
                assert!((fd1 - gumbel_derivative(x, s)).abs() < 1e-8);
                let fd2 = (gumbel_derivative(x + h, s) - gumbel_derivative(x - h, s)) / (2.0 * h);
                assert!((fd2 - gumbel_second_derivative(x, s)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn gumbel_softplus_limits() {
        let mut store = ParamStore::new(0);
        let act = GumbelSoftplus::new(&mut store, "gs", 3).unwrap();
        *store.value_mut(act.raw_s_name()).unwrap() = Tensor::full(1, 3, softplus_inverse(1.0 - 1e-6));
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[40.0, -50.0, 1e4]));
        let y = act.forward(&mut g, &store, x).unwrap();
        let y = g.value(y);
        // gumbel(40) (1 + log(1 + e^40)) at s = 1, evaluated in high precision.
        assert!((y.get(0, 0) - 41.0).abs() < 1e-12);
        assert!(y.get(0, 1) > 0.0 && y.get(0, 1) < 1e-21);
        assert!((y.get(0, 2) - 10001.0).abs() < 1e-8);
    }

    #[test]
    fn ema_layer_norm_behaviour() {
        let mut store = ParamStore::new(0);
        let ln = EmaLayerNorm::new(&mut store, "ln", 2, EMA_RATE).unwrap();
        let input = Tensor::from_rows(&[vec![9.0, -1.0], vec![11.0, 3.0]]).unwrap();

        let mut ctx = ForwardCtx::eval(0, 1);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y1 = ln.forward(&mut g, &store, x, &mut ctx).unwrap();
        let y2 = ln.forward(&mut g, &store, x, &mut ctx).unwrap();
        assert_eq!(g.value(y1), &input);
        assert_eq!(g.value(y1), g.value(y2));
        assert!(ctx.stat_updates.is_empty());

        let mut ctx = ForwardCtx::train(0, 1);
        let y = ln.forward(&mut g, &store, x, &mut ctx).unwrap();
        // The pass itself used the stored statistics.
        assert_eq!(g.value(y), &input);
        apply_stat_updates(&mut store, &ctx.stat_updates, EMA_RATE).unwrap();
        let m = store.value(ln.running_mean_name()).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.1).abs() < 1e-15);
        let sd = store.value(ln.running_std_name()).unwrap();
        assert!((sd.get(0, 1) - (0.9 + 0.1 * (4.0f64 + 1e-5).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn ema_layer_norm_rejects_bad_std() {
        let mut store = ParamStore::new(0);
        let ln = EmaLayerNorm::new(&mut store, "ln", 1, EMA_RATE).unwrap();
        *store.value_mut(ln.running_std_name()).unwrap() = Tensor::scalar(0.0);
        let mut g = Graph::new();
        let x = g.scalar(1.0);
        assert!(ln.forward(&mut g, &store, x, &mut ForwardCtx::eval(0, 1)).is_err());
    }

    fn random_mlp(seed: u64) -> (ParamStore, MonotonicMlp) {
        let mut store = ParamStore::new(seed);
        let mlp = MonotonicMlp::new(&mut store, "m", &[1, 6, 3], MonotonicOutput::GumbelSoftplus).unwrap();
        // Perturb everything, including negative raw weights and biases.
        let names: Vec<String> = store.trainable_names();
        for name in names {
            let mut rng = store.rng_for(&format!("{name}/perturb"));
            use rand::Rng;
            for v in store.value_mut(&name).unwrap().data_mut() {
                *v += rng.random_range(-1.5..1.5);
            }
        }
        (store, mlp)
    }

    fn eval_mlp(store: &ParamStore, mlp: &MonotonicMlp, ts: &[f64]) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let t = g.constant(Tensor::column(ts));
        let t = g.seed_time_tangent(t).unwrap();
        let y = mlp.forward(&mut g, store, t).unwrap();
        (g.value(y).clone(), g.tangent_value(y))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gumbel_softplus_is_monotone(s in 1e-3f64..10.0, a in -30.0f64..30.0, b in -30.0f64..30.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f = |x: f64| gumbel(x, s) * (1.0 + log1p_s_exp(x, s) / s);
            prop_assert!(f(hi) >= f(lo));
            prop_assert!(f(lo) > 0.0);
        }

        #[test]
        fn gumbel_sup_is_bounded(s in 1e-4f64..20.0, x in -50.0f64..50.0) {
            let d = gumbel_derivative(x, s);
            prop_assert!(d > 0.0 || x.abs() > 30.0);
            prop_assert!(d <= (-1.0f64).exp() + 1e-9);
        }

        #[test]
        fn monotonic_mlp_is_monotone(seed in 0u64..10_000, t0 in -3.0f64..3.0, dt in 0.0f64..3.0) {
            let (store, mlp) = random_mlp(seed);
            let (y, tan) = eval_mlp(&store, &mlp, &[t0, t0 + dt]);
            for j in 0..3 {
                prop_assert!(y.get(1, j) >= y.get(0, j));
                prop_assert!(tan.get(0, j) >= 0.0 && tan.get(1, j) >= 0.0);
            }
        }

        #[test]
        fn monotonic_mlp_tangent_matches_fd(seed in 0u64..10_000, t in -2.0f64..2.0) {
            let (store, mlp) = random_mlp(seed);
            let h = 1e-5;
            let (_, tan) = eval_mlp(&store, &mlp, &[t]);
            let (up, _) = eval_mlp(&store, &mlp, &[t + h]);
            let (dn, _) = eval_mlp(&store, &mlp, &[t - h]);
            for j in 0..3 {
                let fd = (up.get(0, j) - dn.get(0, j)) / (2.0 * h);
                let an = tan.get(0, j);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel < 1e-5, "tangent {} fd {}", an, fd);
            }
        }
    }
}
