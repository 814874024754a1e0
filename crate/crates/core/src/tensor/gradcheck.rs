//! Central finite-difference oracle for reverse-mode gradients (64-bit only).

use rand::seq::index::sample;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Every probed coordinate as `(input, flat index, analytic, numeric)`.
    pub samples: Vec<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    /// Largest error when denominators are floored at `fraction` of the
    /// largest analytic component instead of the fixed absolute floor.
    /// Gradients far below the overall scale sit under the rounding noise
    /// of the difference quotient and are then compared absolutely.
    pub fn max_rel_error_scaled(&self, fraction: f64) -> f64 {
        let scale = self.samples.iter().fold(0.0f64, |m, s| m.max(s.2.abs()));
        let floor = fraction * scale;
        self.samples
            .iter()
            .map(|&(_, _, a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(1e-8))
            .fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks a scalar function of one tensor at every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let report = grad_check_inputs(|_, xs| f(xs[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_error)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?.value();
    if out.len() != 1 {
        return Err(Error::shape(format!("gradcheck function returned {:?}", out.shape())));
    }
    Ok(out.item())
}

/// Checks a scalar function of several tensors. With `sample = Some((k, seed))`
/// at most `k` coordinates per input are probed, chosen deterministically.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    sample_per_input: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        samples: Vec::new(),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match sample_per_input {
            Some((k, seed)) if k < n => {
                let mut r = rng::stream(seed, &format!("gradcheck/{i}"));
                let mut c = sample(&mut r, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            let (xp, xm) = (x0 + h, x0 - h);
            work[i].data_mut()[j] = xp;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[j] = xm;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[j] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck: non-finite output perturbing input {i} at index {j}"
                )));
            }
            // divide by the step actually realized in floating point
            let numeric = (fp - fm) / (xp - xm);
            let a = analytic[i].data()[j];
            let e = relative_error(a, numeric);
            report.coordinates += 1;
            report.samples.push((i, j, a, numeric));
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
