//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::numkit::ParamStore;

/// Outcome of checking one named parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

/// Per-parameter report from [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

/// Compares the analytic gradients already accumulated in `store` against
/// central differences of `loss`, elementwise, for every parameter.
///
/// The caller runs its own forward/backward to populate the gradients first;
/// `loss` must be a pure function of the parameter values. Relative error is
/// |a − n| / max(1e-8, |a| + |n|).
pub fn finite_diff_check<F>(
    mut loss: F,
    store: &mut ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::config(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let names: Vec<String> = store.names().cloned().collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let n = store.value(&name).values().len();
        let analytic = store.grad(&name).values().to_vec();
        let mut max_rel = 0.0f64;
        let mut worst = 0;
        for i in 0..n {
            let original = store.value(&name).values()[i];
            store.param_mut(&name).value.values_mut()[i] = original + h;
            let f_plus = loss(store);
            store.param_mut(&name).value.values_mut()[i] = original - h;
            let f_minus = loss(store);
            store.param_mut(&name).value.values_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        entries.push(ParamCheck {
            name,
            checked: n,
            max_rel_err: max_rel,
            worst_index: worst,
            passed: max_rel < tol,
        });
    }
    Ok(GradCheckReport { tolerance: tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{cross_entropy, softmax, softmax_cross_entropy_grad, DenseMatrix};

    #[test]
    fn quadratic_gradient_matches() {
        // loss = ½‖θ‖², gradient θ
        let mut store = ParamStore::new();
        store.insert("theta", DenseMatrix::from_values(4, 1, vec![0.3, -1.1, 2.0, 0.7]).unwrap());
        let theta = store.value("theta").values().to_vec();
        for (i, t) in theta.iter().enumerate() {
            store.param_mut("theta").grad.set(i, 0, *t);
        }
        let report = finite_diff_check(
            |s| s.value("theta").values().iter().map(|t| 0.5 * t * t).sum(),
            &mut store,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.all_passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = 2usize;

        let mut store = ParamStore::new();
        store.insert("z", DenseMatrix::from_values(6, 1, logits.clone()).unwrap());
        let q = softmax(&logits).unwrap();
        let grad = softmax_cross_entropy_grad(&q, target);
        for (i, g) in grad.iter().enumerate() {
            store.param_mut("z").grad.set(i, 0, *g);
        }
        let report = finite_diff_check(
            |s| {
                let q = softmax(s.value("z").values()).unwrap();
                cross_entropy(&q, target).unwrap()
            },
            &mut store,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.all_passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn step_outside_range_is_error() {
        let mut store = ParamStore::new();
        store.insert("w", DenseMatrix::zeros(1, 1));
        assert!(finite_diff_check(|_| 0.0, &mut store, 1e-2, 1e-4).is_err());
        assert!(finite_diff_check(|_| 0.0, &mut store, 1e-8, 1e-4).is_err());
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut store = ParamStore::new();
        store.insert("theta", DenseMatrix::from_values(1, 1, vec![1.0]).unwrap());
        store.param_mut("theta").grad.set(0, 0, 5.0); // true gradient is 1.0
        let report = finite_diff_check(
            |s| s.value("theta").values()[0],
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.all_passed());
        assert_eq!(report.failures().count(), 1);
    }
}
