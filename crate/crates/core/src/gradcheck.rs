//! Central finite-difference checks for graphs built over a [`ParamStore`].

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both norms sit below the
    /// rounding floor.
    pub relative_error: f64,
}

/// Multiple of `ε·max(1, |f|) / step`, the rounding noise of one central
/// difference, below which both gradients count as zero. An exactly-zero
/// analytic gradient (a key bias under softmax, say) otherwise gets
/// compared against pure rounding noise; intermediate values larger than
/// `f` push that noise well above `ε·|f| / step`.
pub const NOISE_MULTIPLE: f64 = 1e4;

fn relative_error(a: &[f64], n: &[f64], floor: f64) -> (f64, f64, f64) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let denom = na.max(nn);
    let rel = if denom < floor { 0.0 } else { diff / denom };
    (na, nn, rel)
}

fn evaluate(store: &ParamStore, f: &impl Fn(&mut Graph<'_>) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let root = f(&mut g);
    g.scalar(root)
}

/// Checks every trainable parameter in `ids` (or every trainable parameter
/// in the store when `ids` is empty) against central differences with the
/// given step. `f` must build a `1 x 1` scalar.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    f: impl Fn(&mut Graph<'_>) -> Var,
) -> Vec<GradCheck> {
    let targets: Vec<ParamId> = if ids.is_empty() {
        store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    } else {
        ids.to_vec()
    };
    let (analytic, f0): (Vec<Vec<f64>>, f64) = {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let grads = g.backward(root);
        (targets.iter().map(|&id| grads.param(store, id).into_data()).collect(), g.scalar(root))
    };
    let floor = NOISE_MULTIPLE * f64::EPSILON * f0.abs().max(1.0) / step;
    let mut out = Vec::with_capacity(targets.len());
    for (&id, a) in targets.iter().zip(&analytic) {
        let len = store.value(id).len();
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let plus = evaluate(store, &f);
            store.value_mut(id).data_mut()[k] = orig - step;
            let minus = evaluate(store, &f);
            store.value_mut(id).data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let (analytic_norm, numeric_norm, relative_error) = relative_error(a, &numeric, floor);
        out.push(GradCheck {
            name: store.get(id).name.clone(),
            analytic_norm,
            numeric_norm,
            relative_error,
        });
    }
    out
}

/// Largest relative error in a report, or zero for an empty one.
pub fn max_relative_error(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[0.3, -1.2, 2.0]), ParamGroup::Head, true);
        let checks = check_gradients(&mut store, &[], 1e-4, |g| {
            let v = g.param(x);
            let sq = g.mul(v, v);
            g.sum_all(sq)
        });
        assert!(max_relative_error(&checks) < 1e-8);

        let (_, _, rel) = relative_error(&[1.0, 0.0], &[0.0, 1.0], 1e-10);
        assert!(rel > 1.0);
        let (_, _, rel) = relative_error(&[0.0], &[1.6e-11], 2e-8);
        assert_eq!(rel, 0.0);
        let (_, _, rel) = relative_error(&[0.0], &[1e-6], 2e-8);
        assert_eq!(rel, 1.0);
    }
}
