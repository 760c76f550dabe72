//! Sequences, exact log-likelihoods and evaluation metrics.
//!
//! A sequence with `N` events has `N + 1` intervals: `(t_{k-1}, t_k]` for
//! `k < N`, with `t_{-1} = w-`, and the event-free tail `(t_N, w+]`.

mod metrics;
mod probe;
mod sequence;

use rayon::prelude::*;

use crate::ad::{Graph, ParamStore, Tensor, Var};
use crate::nn::ForwardCtx;
use crate::{Error, Result};

pub use metrics::{argmax, weighted_f1, weighted_roc_auc, MetricsReport};
pub use probe::{probe_verdict, ProbeReport, Verdict, DEFAULT_MARGIN};
pub use sequence::{Event, EventSequence, Task};

/// Added to intensities before taking logs during training and evaluation.
pub const LOG_FLOOR: f64 = 1e-30;

/// Upper clamp on densities inside the multi-label `log(1 - p)` term.
pub const MAX_LABEL_DENSITY: f64 = 1.0 - 1e-12;

/// Per-interval outputs of a model on one sequence.
#[derive(Clone, Debug)]
pub struct IntervalTerms {
    /// `N x M`: intensity at each event time.
    pub lambda: Var,
    /// `(N + 1) x M`: cumulative intensity over each interval, tail last.
    pub big_lambda: Var,
}

/// Anything that yields intensities and compensators per interval.
pub trait SequenceModel: Sync {
    fn num_marks(&self) -> usize;

    fn interval_terms(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &mut ForwardCtx,
        seq: &EventSequence,
    ) -> Result<IntervalTerms>;
}

/// `p_m = lambda_m exp(-sum_n Lambda_n)`, computed in log space.
pub fn conditional_density(lambda: &[f64], big_lambda: &[f64]) -> Vec<f64> {
    let total: f64 = big_lambda.iter().sum();
    lambda.iter().map(|&l| (l.ln() - total).exp()).collect()
}

fn label_matrix(seq: &EventSequence, num_marks: usize) -> Tensor {
    let mut t = Tensor::zeros(seq.len(), num_marks);
    for (i, e) in seq.events.iter().enumerate() {
        for &m in &e.labels {
            t.set(i, m, 1.0);
        }
    }
    t
}

/// Log-likelihood of `seq` as a graph scalar. Every present label of an
/// event contributes `log lambda_m - sum_n Lambda_n`; the tail contributes
/// `-sum_n Lambda_n`. Multi-label data adds `log(1 - p_m)` for each absent
/// mark, with `p_m` clamped below one.
pub fn sequence_loglik(g: &mut Graph, terms: &IntervalTerms, seq: &EventSequence, task: Task) -> Result<Var> {
    let n = seq.len();
    let [rows, m] = g.shape(terms.big_lambda);
    if rows != n + 1 || g.shape(terms.lambda) != [n, m] {
        return Err(Error::Config(format!(
            "interval terms of shape {:?} and {:?} for {n} events",
            g.shape(terms.lambda),
            [rows, m]
        )));
    }
    let per_interval = g.sum_rows(terms.big_lambda)?;
    let mut counts: Vec<f64> = seq.events.iter().map(|e| e.labels.len() as f64).collect();
    counts.push(1.0);
    let counts = g.constant(Tensor::column(&counts));
    let weighted = g.mul(per_interval, counts)?;
    let compensator = g.sum(weighted)?;
    if n == 0 {
        return Ok(g.neg(compensator)?);
    }

    let labels = label_matrix(seq, m);
    let shifted = g.add_scalar(terms.lambda, LOG_FLOOR)?;
    let log_lambda = g.log(shifted)?;
    let present = g.constant(labels.clone());
    let picked = g.mul(log_lambda, present)?;
    let event_term = g.sum(picked)?;
    let ll = g.sub(event_term, compensator)?;
    match task {
        Task::MultiClass => Ok(ll),
        Task::MultiLabel => {
            let at_events = g.gather_rows(per_interval, (0..n).collect())?;
            let log_p = g.sub(log_lambda, at_events)?;
            let p = g.exp(log_p)?;
            let neg = g.neg(p)?;
            let one_minus = g.add_scalar(neg, 1.0)?;
            let one_minus = g.clamp_min(one_minus, 1.0 - MAX_LABEL_DENSITY)?;
            let log_q = g.log(one_minus)?;
            let absent = g.constant(labels.map(|v| 1.0 - v));
            let picked = g.mul(log_q, absent)?;
            let extra = g.sum(picked)?;
            Ok(g.add(ll, extra)?)
        }
    }
}

/// Plain-value outputs for one sequence.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub loglik: f64,
    /// `N x M` intensities at the events.
    pub lambda: Tensor,
    /// `(N + 1) x M` interval compensators.
    pub big_lambda: Tensor,
}

/// Evaluates one sequence with `ctx` and returns plain values.
pub fn evaluate_sequence<M: SequenceModel + ?Sized>(
    model: &M,
    store: &ParamStore,
    ctx: &mut ForwardCtx,
    seq: &EventSequence,
    task: Task,
) -> Result<SequenceEval> {
    let mut g = Graph::new();
    let terms = model.interval_terms(&mut g, store, ctx, seq)?;
    let ll = sequence_loglik(&mut g, &terms, seq, task)?;
    Ok(SequenceEval {
        loglik: g.value(ll).item(),
        lambda: g.value(terms.lambda).clone(),
        big_lambda: g.value(terms.big_lambda).clone(),
    })
}

/// Seed of the Monte Carlo stream for sequence `index` in `epoch`.
pub fn mc_stream(seed: u64, epoch: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a combined key
    let mut z = seed
        .wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean over sequences of `-loglik / (w+ - w-)`.
pub fn nll_per_time(logliks: &[f64], sequences: &[EventSequence]) -> Result<f64> {
    if logliks.is_empty() || logliks.len() != sequences.len() {
        return Err(Error::Config(format!(
            "{} log-likelihoods for {} sequences",
            logliks.len(),
            sequences.len()
        )));
    }
    let mut total = 0.0;
    for (i, (ll, s)) in logliks.iter().zip(sequences).enumerate() {
        let d = s.duration();
        if d <= 0.0 {
            return Err(Error::invalid(format!("sequences[{i}].window"), "window has zero length"));
        }
        total += -ll / d;
    }
    Ok(total / logliks.len() as f64)
}

/// Full evaluation: NLL/time and the label metric for the task. Sequences
/// are processed in parallel and reduced in order.
pub fn evaluate<M: SequenceModel + ?Sized>(
    model: &M,
    store: &ParamStore,
    sequences: &[EventSequence],
    task: Task,
    mc_samples: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if sequences.is_empty() {
        return Err(Error::invalid("sequences", "nothing to evaluate"));
    }
    let m = model.num_marks();
    let evals: Vec<SequenceEval> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut ctx = ForwardCtx::eval(mc_stream(seed, u64::MAX, i as u64), mc_samples);
            evaluate_sequence(model, store, &mut ctx, s, task)
        })
        .collect::<Result<_>>()?;
    let logliks: Vec<f64> = evals.iter().map(|e| e.loglik).collect();
    let nll = nll_per_time(&logliks, sequences)?;
    let num_events = sequences.iter().map(EventSequence::len).sum();

    let mut report = MetricsReport {
        nll_per_time: nll,
        weighted_f1: None,
        weighted_roc_auc: None,
        num_sequences: sequences.len(),
        num_events,
        per_sequence_loglik: logliks,
    };
    if num_events == 0 {
        return Ok(report);
    }
    match task {
        Task::MultiClass => {
            let mut pred = Vec::with_capacity(num_events);
            let mut truth = Vec::with_capacity(num_events);
            for (e, s) in evals.iter().zip(sequences) {
                for (i, ev) in s.events.iter().enumerate() {
                    pred.push(argmax(e.lambda.row_slice(i)));
                    truth.push(ev.labels[0]);
                }
            }
            report.weighted_f1 = Some(weighted_f1(&pred, &truth, m)?);
        }
        Task::MultiLabel => {
            let mut scores = Vec::with_capacity(num_events);
            let mut truth = Vec::with_capacity(num_events);
            for (e, s) in evals.iter().zip(sequences) {
                for (i, ev) in s.events.iter().enumerate() {
                    let row = e.lambda.row_slice(i);
                    let total: f64 = row.iter().sum();
                    scores.push(row.iter().map(|l| if total > 0.0 { l / total } else { 0.0 }).collect());
                    let mut t = vec![false; m];
                    for &l in &ev.labels {
                        t[l] = true;
                    }
                    truth.push(t);
                }
            }
            // A split where no mark has both classes simply has no AUC.
            report.weighted_roc_auc = weighted_roc_auc(&scores, &truth).ok();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Piecewise-constant intensity per interval, one row per interval.
    struct Constant {
        rates: Vec<Vec<f64>>,
    }

    impl SequenceModel for Constant {
        fn num_marks(&self) -> usize {
            self.rates[0].len()
        }

        fn interval_terms(&self, g: &mut Graph, _: &ParamStore, _: &mut ForwardCtx, seq: &EventSequence) -> Result<IntervalTerms> {
            let m = self.num_marks();
            let mut bounds = vec![seq.start()];
            bounds.extend(seq.times());
            bounds.push(seq.end());
            let rate = |k: usize| &self.rates[k.min(self.rates.len() - 1)];
            let mut lambda = Tensor::zeros(seq.len(), m);
            let mut big = Tensor::zeros(seq.len() + 1, m);
            for k in 0..=seq.len() {
                for j in 0..m {
                    if k < seq.len() {
                        lambda.set(k, j, rate(k)[j]);
                    }
                    big.set(k, j, rate(k)[j] * (bounds[k + 1] - bounds[k]));
                }
            }
            Ok(IntervalTerms {
                lambda: g.constant(lambda),
                big_lambda: g.constant(big),
            })
        }
    }

    fn ll(model: &Constant, seq: &EventSequence, task: Task) -> f64 {
        let mut ctx = ForwardCtx::eval(0, 1);
        evaluate_sequence(model, &ParamStore::new(0), &mut ctx, seq, task).unwrap().loglik
    }

    #[test]
    fn density_examples() {
        let p = conditional_density(&[1.0], &[1.0]);
        assert!((p[0] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(conditional_density(&[0.3, 2.0], &[0.0, 0.0]), vec![0.3, 2.0]);
    }

    #[test]
    fn poisson_examples() {
        let model = Constant {
            rates: vec![vec![0.1, 0.05]],
        };
        let empty = EventSequence::new([0.0, 10.0], Vec::new());
        assert!((ll(&model, &empty, Task::MultiClass) + 1.5).abs() < 1e-14);
        let nll = nll_per_time(&[ll(&model, &empty, Task::MultiClass)], std::slice::from_ref(&empty)).unwrap();
        assert!((nll - 0.15).abs() < 1e-14);
        let twice = nll_per_time(&[-1.5, -1.5], &[empty.clone(), empty.clone()]).unwrap();
        assert_eq!(twice, nll);
        assert!(nll_per_time(&[0.0], &[EventSequence::new([1.0, 1.0], Vec::new())]).is_err());

        let unit = Constant { rates: vec![vec![1.0]] };
        let one = EventSequence::new([0.0, 1.0], vec![Event::new(1.0, vec![0])]);
        assert!((ll(&unit, &one, Task::MultiClass) + 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_mark_multilabel_by_hand() {
        // lambda = [0.5, 0.5], Lambda at the event = [0.5, 0.5], marks {0},
        // tail of length zero.
        let model = Constant {
            rates: vec![vec![0.5, 0.5]],
        };
        let seq = EventSequence::new([0.0, 1.0], vec![Event::new(1.0, vec![0])]);
        let got = ll(&model, &seq, Task::MultiLabel);
        let p = 0.5 * (-1f64).exp();
        let want = p.ln() + (1.0 - p).ln();
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn all_marks_present_reduces_to_event_sum() {
        let model = Constant {
            rates: vec![vec![0.2, 0.7, 0.4]],
        };
        let seq = EventSequence::new([0.0, 3.0], vec![Event::new(0.5, vec![0, 1, 2]), Event::new(2.0, vec![0, 1, 2])]);
        let got = ll(&model, &seq, Task::MultiLabel);
        let total = 1.3;
        let mut want = 0.0;
        for (start, end) in [(0.0, 0.5), (0.5, 2.0)] {
            for r in [0.2f64, 0.7, 0.4] {
                want += r.ln() - total * (end - start);
            }
        }
        want -= total * 1.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn absent_mark_with_tiny_density_contributes_nothing() {
        let model = Constant {
            rates: vec![vec![1.0, 1e-20]],
        };
        let seq = EventSequence::new([0.0, 2.0], vec![Event::new(1.0, vec![0])]);
        let diff = ll(&model, &seq, Task::MultiLabel) - ll(&model, &seq, Task::MultiClass);
        assert!(diff.abs() < 1e-19);
    }

    #[test]
    fn density_above_one_is_clamped() {
        let model = Constant {
            rates: vec![vec![1.0, 50.0]],
        };
        let seq = EventSequence::new([0.0, 0.01], vec![Event::new(0.001, vec![0])]);
        assert!(ll(&model, &seq, Task::MultiLabel).is_finite());
    }

    #[test]
    fn multilabel_minus_multiclass_is_the_absent_term() {
        let model = Constant {
            rates: vec![vec![0.3, 0.2, 0.6], vec![0.1, 0.9, 0.4], vec![0.5, 0.5, 0.5]],
        };
        let seq = EventSequence::new([0.0, 4.0], vec![Event::new(0.4, vec![1]), Event::new(1.9, vec![2])]);
        let diff = ll(&model, &seq, Task::MultiLabel) - ll(&model, &seq, Task::MultiClass);
        let mut want = 0.0;
        let bounds = [0.0, 0.4, 1.9];
        for (i, absent) in [[0usize, 2], [0, 1]].iter().enumerate() {
            let rates = &model.rates[i];
            let big: f64 = rates.iter().sum::<f64>() * (bounds[i + 1] - bounds[i]);
            for &m in absent {
                want += (1.0 - rates[m] * (-big).exp()).ln();
            }
        }
        assert!((diff - want).abs() < 1e-14);
    }

    #[test]
    fn mc_streams_differ() {
        assert_ne!(mc_stream(1, 0, 0), mc_stream(1, 0, 1));
        assert_ne!(mc_stream(1, 0, 0), mc_stream(1, 1, 0));
        assert_eq!(mc_stream(7, 3, 9), mc_stream(7, 3, 9));
    }

    proptest! {
        #[test]
        fn argmax_of_density_matches_intensity(
            lambda in proptest::collection::vec(0.001f64..10.0, 1..6),
            big in proptest::collection::vec(0.0f64..5.0, 6),
        ) {
            let p = conditional_density(&lambda, &big[..lambda.len()]);
            prop_assert_eq!(argmax(&p), argmax(&lambda));
        }

        #[test]
        fn nll_ignores_order(lls in proptest::collection::vec(-50.0f64..0.0, 2..8), shift in 0usize..8) {
            let seqs: Vec<EventSequence> = (0..lls.len())
                .map(|i| EventSequence::new([0.0, 1.0 + i as f64], Vec::new()))
                .collect();
            let a = nll_per_time(&lls, &seqs).unwrap();
            let k = shift % lls.len();
            let mut l2 = lls.clone();
            let mut s2 = seqs.clone();
            l2.rotate_left(k);
            s2.rotate_left(k);
            let b = nll_per_time(&l2, &s2).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
