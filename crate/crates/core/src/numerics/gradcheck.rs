//! Finite-difference verification of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, ParamVars};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// `name[index]` of the entry with the largest relative error.
    pub worst_parameter: String,
    pub checked_entries: usize,
    /// Analytic and numeric gradient at the worst entry.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradientReport {
    pub fn passes(&self, bound: f64) -> bool {
        self.max_relative_error < bound
    }
}

fn evaluate<F>(loss_fn: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'p> Fn(&Tape<'p>, &ParamVars) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = store.register(&tape);
    let out = loss_fn(&tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `loss_fn` against central differences (the
/// fourth-order five-point stencil) for every scalar in `params`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, epsilon: f64) -> Result<GradientReport>
where
    F: for<'p> Fn(&Tape<'p>, &ParamVars) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    let analytic = {
        let tape = Tape::new();
        let vars = params.register(&tape);
        let out = loss_fn(&tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("loss evaluated to {v}")));
        }
        let grads = tape.backward(out);
        vars.gradients(params, grads)
    };

    let mut work = params.clone();
    let mut report = GradientReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        checked_entries: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        for k in 0..n {
            let original = params.get(id).as_slice()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).as_mut_slice()[k] = original + offset;
                evaluate(&loss_fn, &work)
            };
            let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
            let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            work.get_mut(id).as_mut_slice()[k] = original;

            // fourth-order central stencil
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let a = analytic.get(id).as_slice()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked_entries += 1;
            if rel > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = rel;
                report.worst_parameter = format!("{}[{k}]", params.name(id));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::Matrix;
    use rand::SeedableRng;

    #[test]
    fn half_squared_norm_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::row_vector(vec![0.3, -1.2, 2.5, 0.01]));
        let report = grad_check(
            |t, v| {
                let p = v.var(id);
                let sq = t.mul(p, p);
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
        assert_eq!(report.checked_entries, 4);
    }

    #[test]
    fn softmax_cross_entropy_on_random_logits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let id = store.add("logits", Matrix::random_normal(1, 5, 1.0, &mut rng));
        let report = grad_check(
            |t, v| {
                let ls = t.log_softmax_rows(v.var(id));
                Ok(t.sparse_nll(ls, vec![(0, 2, 1.0)]))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_an_evaluation_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::row_vector(vec![0.0]));
        let err = grad_check(
            |t, v| {
                let one = t.constant(Matrix::row_vector(vec![1.0]));
                Ok(t.div(one, v.var(id)))
            },
            &store,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let store = ParamStore::new();
        assert!(grad_check(|t, _| Ok(t.constant(Matrix::zeros(1, 1))), &store, 0.1).is_err());
    }
}
