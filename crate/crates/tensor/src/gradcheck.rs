//! Central-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Location and size of the worst disagreement found by [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_relative_error: T,
    /// `(input position, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub elements_checked: usize,
}

fn evaluate<T: Real, F>(f: &F, xs: &[Tensor<T>]) -> Result<T>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar `f(xs)` against central
/// differences for every element of every input.
///
/// The error of one element is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_many<T: Real, F>(f: F, xs: &[Tensor<T>], eps: T) -> Result<GradCheckReport<T>>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if eps <= T::zero() {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: "eps must be positive".into(),
        });
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(out)?;
    for v in &vars {
        let gv = grads.get(*v).expect("param gradient");
        if !gv.is_finite() {
            return Err(TensorError::NonFinite("analytic gradient".into()));
        }
    }

    let two = T::one() + T::one();
    let mut report = GradCheckReport {
        max_relative_error: T::zero(),
        worst: (0, 0),
        elements_checked: 0,
    };
    let mut probe: Vec<Tensor<T>> = xs.to_vec();
    for (pos, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("param gradient");
        for e in 0..xs[pos].numel() {
            let orig = xs[pos].data()[e];
            probe[pos].data_mut()[e] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[pos].data_mut()[e] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[pos].data_mut()[e] = orig;
            let numeric = (plus - minus) / (two * eps);
            let err = (analytic.data()[e] - numeric).abs() / numeric.abs().max(T::one());
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (pos, e);
            }
            report.elements_checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<T: Real, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_relative_error)
}
