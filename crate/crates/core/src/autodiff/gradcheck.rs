//! Central-difference verification of the reverse-mode gradients.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check: the worst coordinate and its two estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one tensor at every coordinate
/// and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), None, h)?;
    Ok(report.max_rel_error)
}

/// Checks a scalar function of several tensors. `coords` restricts the check
/// to the given `(input, flat index)` pairs; `None` checks everything.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.value(out).item())
    };

    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &(ti, j) in coords {
        let x0 = inputs[ti].data()[j];
        probe[ti].data_mut()[j] = x0 + h;
        let plus = eval(&probe)?;
        probe[ti].data_mut()[j] = x0 - h;
        let minus = eval(&probe)?;
        probe[ti].data_mut()[j] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[ti][j];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.coords_checked == 0 {
            report.max_rel_error = err;
            report.worst = (ti, j);
            report.analytic = a;
            report.numeric = numeric;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}
