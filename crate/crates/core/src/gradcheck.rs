//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Precision, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Pass threshold on the worst relative error in double precision.
pub const DOUBLE_TOLERANCE: f64 = 1e-4;
/// Relaxed threshold used when forward values are rounded through `f32`.
pub const SINGLE_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub precision: Precision,
    /// Added to every analytic gradient entry. Non-zero only for fault
    /// injection, to prove a broken gradient is caught.
    pub analytic_bias: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            precision: Precision::Double,
            analytic_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// `(input, element)` pairs excluded because their stencil crosses a kink.
    pub skipped: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(x+ε) − f(x−ε)) / 2ε`, elementwise over every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        inputs,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

/// Finite differences always run in double precision; `opts.precision`
/// only affects the analytic pass. Entries whose `±ε` stencil flips the
/// sign of any relu input straddle a kink where the difference quotient is
/// meaningless; they are listed in `skipped` and left out of the maximum.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor], precision: Precision| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::with_precision(precision);
        let vars = ts.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::invalid("grad_check function must return a scalar"));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs, opts.precision)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            let mut d = grads.wrt(&g, v);
            d.iter_mut().for_each(|x| *x += opts.analytic_bias);
            d
        })
        .collect();
    let pattern = eval(inputs, Precision::Double)?.0.relu_pattern();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut skipped = Vec::new();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let (gp, _, op) = eval(&work, Precision::Double)?;
            let plus = gp.value(op).data()[0];
            work[i].data_mut()[j] = orig - opts.eps;
            let (gm, _, om) = eval(&work, Precision::Double)?;
            let minus = gm.value(om).data()[0];
            work[i].data_mut()[j] = orig;
            if gp.relu_pattern() != pattern || gm.relu_pattern() != pattern {
                skipped.push((i, j));
            }
            col.push((plus - minus) / (2.0 * opts.eps));
        }
        numeric.push(col);
    }

    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.iter().zip(n).enumerate() {
            if skipped.contains(&(i, j)) {
                continue;
            }
            let e = relative_error(x, y);
            if e > max_rel_error || worst.is_none() {
                max_rel_error = e;
                worst = Some((i, j));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.5);
        let r = grad_check(|g, v| g.sum_all(v[0]), &[x], DEFAULT_EPS).unwrap();
        assert!(r.analytic[0].iter().all(|&d| d == 1.0));
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::zeros(&[3]);
        assert!(grad_check(|_, v| Ok(v[0]), &[x], DEFAULT_EPS).is_err());
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let opts = GradCheckOptions {
            analytic_bias: 0.01,
            ..Default::default()
        };
        let r = grad_check_with(|g, v| g.sum_all(v[0]), &[x], opts).unwrap();
        assert!(!r.passes(DOUBLE_TOLERANCE));
    }
}
