//! Central finite-difference gradient checks.
//!
//! Error per coordinate is `|analytic - numeric| / max(1, |analytic|)`; the
//! checks report the maximum over all coordinates examined.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions<T> {
    pub epsilon: T,
    /// Coordinates examined per tensor; evenly strided when the tensor is larger.
    pub max_coords: Option<usize>,
    /// Corrupts one adjoint rule in the analytic pass (negative controls).
    pub fault: Option<(OpKind, T)>,
}

impl<T: Real> CheckOptions<T> {
    pub fn new(epsilon: T) -> Self {
        Self {
            epsilon,
            max_coords: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport<T> {
    pub max_error: T,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub coords: usize,
}

fn rel_error<T: Real>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / T::one().max(analytic.abs())
}

fn coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel => {
            let m = m.max(1);
            (0..m).map(|i| i * numel / m).collect()
        }
        _ => (0..numel).collect(),
    }
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> Result<T> {
    let t = g.value(v);
    if t.numel() != 1 {
        return contract("gradient check needs a scalar-valued function");
    }
    Ok(t.item())
}

/// Checks `d f(x) / d x` for a scalar function of one tensor.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, epsilon: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_with(f, x, CheckOptions::new(epsilon))
}

pub fn grad_check_with<T, F>(f: F, x: &Tensor<T>, opts: CheckOptions<T>) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some((kind, factor)) = opts.fault {
        g.inject_adjoint_fault(kind, factor);
    }
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };
    let mut worst = T::zero();
    for i in coords(x.numel(), opts.max_coords) {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (opts.epsilon + opts.epsilon);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks the gradient of a scalar loss with respect to stored parameters.
///
/// `f` binds whatever it needs from the store it is handed; the listed
/// `ids` are perturbed one coordinate at a time.
pub fn grad_check_params<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    f: F,
    opts: CheckOptions<T>,
) -> Result<CheckReport<T>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    if let Some((kind, factor)) = opts.fault {
        g.inject_adjoint_fault(kind, factor);
    }
    let y = f(&mut g, &work)?;
    scalar_of(&g, y)?;
    g.backward(y)?;
    g.accumulate_param_grads(&mut work, T::one());

    let mut report = CheckReport {
        max_error: T::zero(),
        worst: String::new(),
        coords: 0,
    };
    for &id in ids {
        let analytic: Vec<T> = work.grad(id).to_vec();
        let numel = work.value(id).numel();
        for i in coords(numel, opts.max_coords) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.epsilon;
            let mut gp = Graph::new();
            let yp = f(&mut gp, &work)?;
            let fp = scalar_of(&gp, yp)?;
            work.value_mut(id).data_mut()[i] = orig - opts.epsilon;
            let mut gm = Graph::new();
            let ym = f(&mut gm, &work)?;
            let fm = scalar_of(&gm, ym)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (opts.epsilon + opts.epsilon);
            let err = rel_error(analytic[i], numeric);
            report.coords += 1;
            if report.worst.is_empty() || err > report.max_error {
                report.max_error = err;
                report.worst = work.param(id).name.clone();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::<f64>::new(&[2, 3], alloc::vec![0.3, -1.0, 2.0, 4.0, 0.0, -0.5]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fault_is_detected() {
        let x = Tensor::<f64>::new(&[3], alloc::vec![0.3, -1.0, 2.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: Var| {
            let y = g.gelu(v);
            Ok(g.sum(y))
        };
        let ok = grad_check(f, &x, 1e-3).unwrap();
        assert!(ok < 1e-6);
        let mut opts = CheckOptions::new(1e-3);
        opts.fault = Some((OpKind::Gelu, 1.5));
        let bad = grad_check_with(f, &x, opts).unwrap();
        assert!(bad > 1e-2);
    }

    #[test]
    fn strided_coordinates() {
        assert_eq!(coords(10, Some(5)), alloc::vec![0, 2, 4, 6, 8]);
        assert_eq!(coords(3, Some(5)), alloc::vec![0, 1, 2]);
    }
}
