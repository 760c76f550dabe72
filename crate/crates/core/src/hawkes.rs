//! Multivariate Hawkes process with exponential kernels:
//! `lambda_m(t) = mu_m + sum_n alpha_mn sum_{t_i^n < t} exp(-beta_mn (t - t_i^n))`.
//!
//! Used as a data source and as an exact likelihood oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Graph, ParamStore, Tensor};
use crate::likelihood::{Event, EventSequence, IntervalTerms, SequenceModel};
use crate::nn::ForwardCtx;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Independent,
    Dependent,
}

impl Preset {
    pub fn params(self) -> HawkesParams {
        match self {
            Preset::Independent => HawkesParams {
                mu: vec![0.1, 0.05],
                alpha: vec![vec![0.2, 0.0], vec![0.0, 0.4]],
                beta: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            },
            Preset::Dependent => HawkesParams {
                mu: vec![0.1, 0.05],
                alpha: vec![vec![0.2, 0.1], vec![0.2, 0.3]],
                beta: vec![vec![1.0, 1.0], vec![1.0, 2.0]],
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Preset::Independent),
            "dependent" => Ok(Preset::Dependent),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

impl HawkesParams {
    /// Checks shapes and signs. A spectral radius of `alpha / beta` at or
    /// above one is allowed but logged, since such a process explodes.
    pub fn new(mu: Vec<f64>, alpha: Vec<Vec<f64>>, beta: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self { mu, alpha, beta };
        p.validate()?;
        let rho = p.spectral_radius();
        if rho >= 1.0 {
            log::warn!("Hawkes branching matrix has spectral radius {rho:.4} >= 1; the process is not stationary");
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mu.len();
        if m == 0 {
            return Err(Error::invalid("mu", "at least one mark is required"));
        }
        if let Some(i) = self.mu.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("mu[{i}]"), "must be positive"));
        }
        for (name, mat, strict) in [("alpha", &self.alpha, false), ("beta", &self.beta, true)] {
            if mat.len() != m || mat.iter().any(|r| r.len() != m) {
                return Err(Error::invalid(name, format!("must be {m} x {m}")));
            }
            for (i, row) in mat.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
                    if !ok {
                        return Err(Error::invalid(format!("{name}[{i}][{j}]"), format!("bad value {v}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_marks(&self) -> usize {
        self.mu.len()
    }

    /// Spectral radius of the branching matrix `alpha / beta`, through
    /// `||A^(2^k)||^(1 / 2^k)` with renormalisation at each squaring.
    pub fn spectral_radius(&self) -> f64 {
        let m = self.num_marks();
        let mut a: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| self.alpha[i][j] / self.beta[i][j]).collect())
            .collect();
        let mut log_scale = 0.0;
        let mut power = 1.0;
        for _ in 0..60 {
            let norm = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if norm == 0.0 {
                return 0.0;
            }
            for v in a.iter_mut().flatten() {
                *v /= norm;
            }
            log_scale += norm.ln() / power;
            let sq: Vec<Vec<f64>> = (0..m)
                .map(|i| (0..m).map(|j| (0..m).map(|k| a[i][k] * a[k][j]).sum()).collect())
                .collect();
            a = sq;
            power *= 2.0;
        }
        let norm = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if norm == 0.0 {
            return 0.0;
        }
        (log_scale + norm.ln() / power).exp()
    }

    /// Intensity at `t` given every event of `history` strictly before `t`.
    pub fn intensity(&self, history: &[Event], t: f64) -> Vec<f64> {
        let mut out = self.mu.clone();
        for e in history.iter().take_while(|e| e.time < t) {
            for &n in &e.labels {
                for (m, o) in out.iter_mut().enumerate() {
                    let a = self.alpha[m][n];
                    if a != 0.0 {
                        *o += a * (-self.beta[m][n] * (t - e.time)).exp();
                    }
                }
            }
        }
        out
    }

    /// `int_a^b lambda_m(u) du` using the events of `history` before `b`.
    pub fn compensator(&self, history: &[Event], a: f64, b: f64) -> Result<Vec<f64>> {
        if a > b {
            return Err(Error::invalid("interval", format!("start {a} after end {b}")));
        }
        let mut out: Vec<f64> = self.mu.iter().map(|m| m * (b - a)).collect();
        for e in history.iter().take_while(|e| e.time < b) {
            for &n in &e.labels {
                for (m, o) in out.iter_mut().enumerate() {
                    let al = self.alpha[m][n];
                    if al != 0.0 {
                        let be = self.beta[m][n];
                        let from = (-be * (a - e.time).max(0.0)).exp();
                        let to = (-be * (b - e.time)).exp();
                        *o += al / be * (from - to);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Ogata thinning on `window`. The dominating rate is the total
    /// intensity just after the latest candidate, which bounds the
    /// intensity until the next accepted event.
    pub fn simulate(&self, window: [f64; 2], rng: &mut ChaCha8Rng) -> Result<EventSequence> {
        let [lo, hi] = window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid("window", format!("invalid window [{lo}, {hi}]")));
        }
        let m = self.num_marks();
        // excite[m][n]: sum over mark-n events of exp(-beta_mn (t - t_i)).
        let mut excite = vec![vec![0.0; m]; m];
        let mut t = lo;
        let mut events = Vec::new();
        let rate = |excite: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..m)
                .map(|i| self.mu[i] + (0..m).map(|n| self.alpha[i][n] * excite[i][n]).sum::<f64>())
                .collect()
        };
        loop {
            let bound: f64 = rate(&excite).iter().sum();
            let u: f64 = rng.random();
            let step = -(1.0 - u).ln() / bound;
            let next = t + step;
            if next > hi {
                break;
            }
            for (i, row) in excite.iter_mut().enumerate() {
                for (n, v) in row.iter_mut().enumerate() {
                    *v *= (-self.beta[i][n] * step).exp();
                }
            }
            t = next;
            let lam = rate(&excite);
            let total: f64 = lam.iter().sum();
            let accept: f64 = rng.random();
            if accept * bound <= total {
                let mut pick = rng.random::<f64>() * total;
                let mut mark = m - 1;
                for (i, l) in lam.iter().enumerate() {
                    if pick < *l {
                        mark = i;
                        break;
                    }
                    pick -= l;
                }
                for row in excite.iter_mut() {
                    row[mark] += 1.0;
                }
                events.push(Event::new(t, vec![mark]));
            }
        }
        Ok(EventSequence::new(window, events))
    }

    /// `sum_i log lambda_{m_i}(t_i) - sum_m Lambda_m(w-, w+)`.
    pub fn exact_loglik(&self, seq: &EventSequence) -> Result<f64> {
        let mut ll = 0.0;
        for (i, e) in seq.events.iter().enumerate() {
            let lam = self.intensity(&seq.events[..i], e.time);
            for &m in &e.labels {
                if lam[m] <= 0.0 {
                    return Err(Error::Numerical(format!("zero intensity at event {i}")));
                }
                ll += lam[m].ln();
            }
        }
        let comp = self.compensator(&seq.events, seq.start(), seq.end())?;
        Ok(ll - comp.iter().sum::<f64>())
    }

    /// Intensities at the events and compensators over each interval, tail
    /// last.
    pub fn interval_values(&self, seq: &EventSequence) -> Result<(Tensor, Tensor)> {
        let m = self.num_marks();
        let n = seq.len();
        let mut lambda = Tensor::zeros(n, m);
        let mut big = Tensor::zeros(n + 1, m);
        let mut prev = seq.start();
        for k in 0..=n {
            let end = if k < n { seq.events[k].time } else { seq.end() };
            let hist = &seq.events[..k];
            if k < n {
                for (j, v) in self.intensity(hist, end).into_iter().enumerate() {
                    lambda.set(k, j, v);
                }
            }
            for (j, v) in self.compensator(hist, prev, end)?.into_iter().enumerate() {
                big.set(k, j, v);
            }
            prev = end;
        }
        Ok((lambda, big))
    }

    /// Total compensator over each inter-event interval, the first one
    /// starting at the window start. Exp(1) distributed under the model.
    pub fn rescaled_increments(&self, seq: &EventSequence) -> Result<Vec<f64>> {
        let (_, big) = self.interval_values(seq)?;
        Ok((0..seq.len()).map(|k| big.row_slice(k).iter().sum()).collect())
    }
}

/// Seed of sequence `index` in a simulated dataset.
pub fn sequence_seed(master: u64, index: u64) -> u64 {
    master ^ index
}

/// `count` independent sequences, each from its own derived seed.
pub fn simulate_dataset(params: &HawkesParams, count: usize, window: [f64; 2], seed: u64) -> Result<Vec<EventSequence>> {
    params.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(seed, i as u64));
            params.simulate(window, &mut rng)
        })
        .collect()
}

/// One-sample Kolmogorov-Smirnov statistic against Exp(1).
pub fn ks_exponential(samples: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = -(-v).exp_m1();
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value `sqrt(-ln(level / 2) / 2) / sqrt(n)`.
pub fn ks_critical_value(n: usize, level: f64) -> f64 {
    (-(level / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// The exact process wrapped as a model, for likelihood cross-checks.
#[derive(Clone, Debug)]
pub struct HawkesOracle(pub HawkesParams);

impl SequenceModel for HawkesOracle {
    fn num_marks(&self) -> usize {
        self.0.num_marks()
    }

    fn interval_terms(
        &self,
        g: &mut Graph,
        _store: &ParamStore,
        _ctx: &mut ForwardCtx,
        seq: &EventSequence,
    ) -> Result<IntervalTerms> {
        let (lambda, big) = self.0.interval_values(seq)?;
        Ok(IntervalTerms {
            lambda: g.constant(lambda),
            big_lambda: g.constant(big),
        })
    }
}
