//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a − n| / max(|a| + |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

/// `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h`
/// for every entry of every parameter in `store`.
///
/// `f` must build a fresh scalar on the given graph and be deterministic.
pub fn grad_check<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let grads = g.backward(loss)?;
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(s, &mut g)?;
        Ok(g.value(v).data()[0])
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    for id in store.ids() {
        let analytic = grads.param(id);
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[i]);
            report.entries_checked += 1;
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1]]).unwrap(),
        );
        let b = store.add("b", Tensor::vector(vec![0.1, 0.7]));
        let report = grad_check(
            &store,
            |s, g| {
                let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]])?);
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let y = g.fc(x, wv, bv)?;
                Ok(g.sum(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 6);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught_and_zero_gradient_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.7, -1.3]));
        // the detached factor hides half of the true slope
        let report = grad_check(
            &store,
            |s, g| {
                let wv = g.param(s, w);
                let d = g.detach(wv);
                let y = g.mul(d, wv)?;
                Ok(g.sum(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.3, "{report:?}");

        let report = grad_check(
            &store,
            |s, g| {
                let wv = g.param(s, w);
                let y = g.scale(wv, 0.0);
                Ok(g.sum(y))
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-9) - 5e-10).abs() < 1e-15);
    }
}
