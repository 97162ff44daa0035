//! Central-difference verification of analytic gradients.

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Loss value and (optionally) its analytic parameter gradients.
pub type LossAndGrads = (f64, Vec<(ParamId, Tensor<f64>)>);

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst element.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
}

/// Which elements of each parameter are perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced elements per parameter.
    PerParam(usize),
}

/// Compares analytic gradients against central differences.
///
/// `f(store, want_grads)` evaluates the scalar loss, returning parameter
/// gradients when `want_grads` is set. The relative error of an element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<F>(store: &mut ParamStore<f64>, h: f64, coverage: Coverage, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, bool) -> Result<LossAndGrads>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let (loss, grads) = f(store, true)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at the unperturbed point")));
    }
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (id, g) in grads {
        analytic[id.0] = Some(g);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
    };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        let n = store.value(id).len();
        let indices: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::PerParam(m) if m >= n => (0..n).collect(),
            Coverage::PerParam(m) => (0..m).map(|i| i * n / m).collect(),
        };
        for i in indices {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = f(store, false)?.0;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = f(store, false)?.0;
            store.get_mut(id).value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed {}[{i}]",
                    store.get(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Graph;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::scalar(3.0));
        let report = gradient_check(&mut store, 1e-5, Coverage::All, |s, want| {
            let mut g = Graph::new();
            let t = g.param(s, id);
            let y = g.square(t);
            let y = g.sum(y);
            let gr = g.backward(y, 1.0);
            let grads = gr.param_grads(&g, s);
            if want {
                assert!((grads[0].1.data()[0] - 6.0).abs() < 1e-12);
            }
            Ok((g.scalar(y), grads))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_step_out_of_range_and_nan() {
        let mut store = ParamStore::<f64>::new();
        store.add("t", Tensor::scalar(1.0));
        assert!(gradient_check(&mut store, 1e-2, Coverage::All, |_, _| Ok((0.0, vec![]))).is_err());
        let err = gradient_check(&mut store, 1e-5, Coverage::All, |_, _| Ok((f64::NAN, vec![])));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
