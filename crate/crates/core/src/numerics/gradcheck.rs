//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::{ParamGrads, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub h: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error at this scale.
    pub denom_floor: f64,
    /// Only every `stride`-th coordinate of each parameter is checked.
    pub stride: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            denom_floor: 1e-4,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
    /// Set when the difference quotient fails to converge as `h` shrinks,
    /// which happens at jumps (e.g. an argmax decision flipping).
    pub non_differentiable: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_differentiable && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` for every checked coordinate.
///
/// `loss` must be deterministic given the store: any random draws it makes
/// (dropout masks, Gumbel noise) have to be frozen across calls.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    analytic: &ParamGrads,
    opts: &GradCheckOptions,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
        non_differentiable: false,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for i in (0..n).step_by(opts.stride.max(1)) {
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let fd = central(store, id, i, opts.h, &mut loss)?;
            let err = relative_error(a, fd, opts.denom_floor);
            if err > 10.0 * opts.denom_floor.min(1e-3) {
                // a jump makes the quotient scale like 1/h; a smooth function does not
                let fd_half = central(store, id, i, opts.h / 4.0, &mut loss)?;
                if relative_error(fd, fd_half, opts.denom_floor) > 0.5 {
                    report.non_differentiable = true;
                }
            }
            report.coordinates_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - fd).abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn central<F>(store: &mut ParamStore, id: crate::numerics::ParamId, i: usize, h: f64, loss: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = store.get(id).data()[i];
    store.update(id).data_mut()[i] = orig + h;
    let plus = loss(store)?;
    store.update(id).data_mut()[i] = orig - h;
    let minus = loss(store)?;
    store.update(id).data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::matrix(3, 1, vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        s
    }

    // f(x) = xᵀAx with a fixed non-symmetric A
    fn quad(store: &ParamStore) -> Result<(f64, ParamGrads)> {
        let a = Tensor::from_rows(&[&[2.0, 0.5, 0.0], &[0.1, 1.0, -0.3], &[0.0, 0.2, 3.0]]);
        let mut g = Graph::new();
        let x = g.param(store, store.find("x").unwrap())?;
        let am = g.constant(a);
        let ax = g.matmul(am, x)?;
        let prod = g.mul(ax, x)?;
        let f = g.sum(prod);
        let grads = g.backward(f)?;
        Ok((g.value(f).data()[0], g.param_grads(store, &grads)))
    }

    #[test]
    fn quadratic_form_is_tight() {
        let mut store = quadratic_store();
        let (_, analytic) = quad(&store).unwrap();
        let rep = finite_difference_check(
            &mut store,
            &analytic,
            &GradCheckOptions {
                h: 1e-5,
                ..Default::default()
            },
            |s| quad(s).map(|(f, _)| f),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
        assert!(rep.passed(1e-9));
    }

    #[test]
    fn argmax_jump_is_flagged() {
        // f(θ) = index of max over [θ, 0] as a number; θ sits at the decision boundary
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![0.0])).unwrap();
        let analytic = ParamGrads::empty(1);
        let rep = finite_difference_check(&mut store, &analytic, &GradCheckOptions::default(), |s| {
            let t = s.get(id).data()[0];
            Ok(if t > 0.0 { 0.0 } else { 1.0 })
        })
        .unwrap();
        assert!(rep.non_differentiable);
        assert!(!rep.passed(1e-4));
    }
}
