use super::{AdError, Graph, ParamStore, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Denominator floor, so entries whose gradient is essentially zero are
/// judged on absolute rather than relative error.
const REL_FLOOR: f64 = 1e-4;

/// Checks `backward` against central differences for every trainable entry.
///
/// `f` must be a pure function of the parameters: anything random inside it
/// has to be seeded identically on every call.
pub fn finite_difference_check<F, E>(f: F, params: &ParamStore, step: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<AdError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(AdError::InvalidArgument(format!("step must be positive, got {step}")).into());
    }
    let mut g = Graph::new();
    let root = f(&mut g, params)?;
    let grads = g.backward(root)?;

    let eval = |p: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let r = f(&mut g, p)?;
        Ok(g.value(r).item())
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let mut work = params.clone();
    for name in params.trainable_names() {
        let n = params.value(&name)?.len();
        for i in 0..n {
            let orig = params.value(&name)?.data()[i];
            work.value_mut(&name)?.data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.value_mut(&name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param.clone_from(&name);
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tensor;

    #[test]
    fn quadratic_form() {
        let mut p = ParamStore::new(0);
        p.insert("x", Tensor::row(&[0.3, -1.2, 2.0])).unwrap();
        p.insert(
            "a",
            Tensor::from_rows(&[
                vec![2.0, 0.5, 0.0],
                vec![0.5, 1.0, -0.3],
                vec![0.0, -0.3, 3.0],
            ])
            .unwrap(),
        )
        .unwrap();
        let f = |g: &mut Graph, p: &ParamStore| -> Result<Var, AdError> {
            let x = g.param(p, "x")?;
            let a = g.param(p, "a")?;
            let xa = g.matmul(x, a)?;
            let xt = g.transpose(x)?;
            let q = g.matmul(xa, xt)?;
            Ok(q)
        };
        let r = finite_difference_check(f, &p, 1e-5).unwrap();
        assert_eq!(r.entries_checked, 12);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let p = ParamStore::new(0);
        let f = |g: &mut Graph, _: &ParamStore| -> Result<Var, AdError> { Ok(g.scalar(0.0)) };
        assert!(finite_difference_check(f, &p, 0.0).is_err());
    }
}
