//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, TensorId};

/// One named parameter block fed to [`grad_check`].
#[derive(Debug, Clone)]
pub struct CheckParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckParam {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        CheckParam { name: name.into(), shape, values }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// (param name, flat index) of the worst element.
    pub worst: Option<(String, usize)>,
}

/// Compare tape gradients of a scalar function against central differences
/// (f(p+eps) - f(p-eps)) / 2eps, elementwise over every parameter.
///
/// Relative error uses a denominator floor of 1e-4 so FD truncation noise on
/// near-zero gradients does not register as failure.
pub fn grad_check<F>(f: F, params: &[CheckParam], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::input(format!("grad_check eps must be positive, got {eps}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.values.clone(), p.shape.clone(), true))
        .collect::<Result<_>>()?;
    let out = f(&mut tape, &ids)?;
    if tape.data(out).len() != 1 {
        return Err(Error::shape("grad_check function must return a scalar".to_string()));
    }
    if !tape.data(out)[0].is_finite() {
        return Err(Error::numeric("grad_check function produced non-finite value".to_string()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.values.len()]))
        .collect();

    let eval = |perturbed: &[CheckParam]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .map(|p| t.leaf(p.values.clone(), p.shape.clone(), false))
            .collect::<Result<_>>()?;
        let out = f(&mut t, &ids)?;
        Ok(t.data(out)[0])
    };

    let mut work = params.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.values.len() {
            let orig = param.values[i];
            work[pi].values[i] = orig + eps;
            let f_plus = eval(&work)?;
            work[pi].values[i] = orig - eps;
            let f_minus = eval(&work)?;
            work[pi].values[i] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::numeric("non-finite value during finite differencing".to_string()));
            }
            let fd = (f_plus - f_minus) / (2.0 * eps);
            let an = analytic[pi][i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((param.name.clone(), i));
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport { max_rel_err, pass: max_rel_err < tol, checked, worst })
}
