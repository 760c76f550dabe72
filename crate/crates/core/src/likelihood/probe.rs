use serde::{Deserialize, Serialize};

use super::MetricsReport;
use crate::{Error, Result};

/// Default relative margin of the time-independence probe.
pub const DEFAULT_MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// The full model clearly beats the conditional Poisson baseline.
    Suitable,
    /// The baseline keeps up on both metrics, so event timing carries
    /// little usable signal.
    Suspect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cp_nll_per_time: f64,
    pub model_nll_per_time: f64,
    pub cp_label_metric: f64,
    pub model_label_metric: f64,
    pub margin: f64,
    pub verdict: Verdict,
}

fn label_metric(r: &MetricsReport, who: &str) -> Result<f64> {
    r.weighted_f1
        .or(r.weighted_roc_auc)
        .ok_or_else(|| Error::invalid(who, "report has no label metric"))
}

/// Suspect when the baseline's NLL/time is at most `margin` (relative)
/// above the model's and its label metric at most `margin` below.
pub fn probe_verdict(cp: &MetricsReport, model: &MetricsReport, margin: f64) -> Result<ProbeReport> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    let cp_label = label_metric(cp, "cp")?;
    let model_label = label_metric(model, "model")?;
    let nll_close = cp.nll_per_time <= model.nll_per_time + margin * model.nll_per_time.abs();
    let label_close = cp_label >= model_label - margin * model_label.abs();
    Ok(ProbeReport {
        cp_nll_per_time: cp.nll_per_time,
        model_nll_per_time: model.nll_per_time,
        cp_label_metric: cp_label,
        model_label_metric: model_label,
        margin,
        verdict: if nll_close && label_close {
            Verdict::Suspect
        } else {
            Verdict::Suitable
        },
    })
}
