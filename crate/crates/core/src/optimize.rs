//! Box-constrained quasi-Newton minimization with finite-difference gradients.
//!
//! Projected BFGS: the inverse-Hessian approximation acts on the free
//! variables only, steps are projected onto the box, and step length comes
//! from backtracking on the projected Armijo condition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub projected_gradient: f64,
    pub step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iter: usize,
    /// Relative objective change threshold.
    pub rel_tol: f64,
    /// Projected-gradient infinity-norm threshold.
    pub pg_tol: f64,
    /// A stalled line search still counts as converged below this gradient norm.
    pub stall_pg_tol: f64,
    /// Cap on the infinity norm of a single step.
    pub max_step: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            rel_tol: 1e-8,
            pg_tol: 1e-5,
            stall_pg_tol: 1e-2,
            max_step: 2.0,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    /// True where a one-sided difference was used because `x` sits on a bound.
    pub one_sided: Vec<bool>,
}

impl Gradient {
    pub fn any_one_sided(&self) -> bool {
        self.one_sided.iter().any(|&b| b)
    }
}

/// Finite-difference gradient of `f` at `x`: central differences with step
/// `rel * max(1, |x_i|)`, one-sided when the central stencil would leave the box.
pub fn fd_gradient(
    f: &mut impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    lower: &[f64],
    upper: &[f64],
    rel: f64,
) -> Result<Gradient> {
    let n = x.len();
    let mut values = vec![0.0; n];
    let mut one_sided = vec![false; n];
    let mut fx: Option<f64> = None;
    let mut xp = x.to_vec();
    for i in 0..n {
        let h = rel * x[i].abs().max(1.0);
        let can_up = x[i] + h <= upper[i];
        let can_down = x[i] - h >= lower[i];
        if can_up && can_down {
            xp[i] = x[i] + h;
            let fu = f(&xp)?;
            xp[i] = x[i] - h;
            let fd = f(&xp)?;
            values[i] = (fu - fd) / (2.0 * h);
        } else {
            one_sided[i] = true;
            let f0 = match fx {
                Some(v) => v,
                None => {
                    let v = f(x)?;
                    fx = Some(v);
                    v
                }
            };
            if can_up {
                xp[i] = x[i] + h;
                values[i] = (f(&xp)? - f0) / h;
            } else {
                xp[i] = x[i] - h;
                values[i] = (f0 - f(&xp)?) / h;
            }
        }
        xp[i] = x[i];
    }
    Ok(Gradient { values, one_sided })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| (x[i] - (x[i] - g[i]).clamp(lower[i], upper[i])).abs())
        .fold(0.0, f64::max)
}

/// Minimize `f` over the box `[lower, upper]` starting from `x0`.
///
/// Evaluation errors at trial points are treated as infinitely bad; an error
/// at the starting point is returned.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &OptimizerOptions,
) -> Result<Minimum> {
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut fx = f(&x)?;
    let initial_value = fx;
    let mut trace = Vec::new();
    if n == 0 {
        return Ok(Minimum {
            x,
            value: fx,
            initial_value,
            iterations: 0,
            trace,
        });
    }
    let safe = |f: &mut dyn FnMut(&[f64]) -> Result<f64>, p: &[f64]| -> f64 {
        match f(p) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };
    let mut grad = fd_gradient(&mut f, &x, lower, upper, opts.fd_step)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut resets = 0usize;

    for iter in 1..=opts.max_iter {
        let g = &grad.values;
        let pg = projected_gradient_norm(&x, g, lower, upper);
        let eps = 1e-12;
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] <= lower[i] + eps && g[i] > 0.0) || (x[i] >= upper[i] - eps && g[i] < 0.0)
            })
            .collect();
        let gf = DVector::from_fn(n, |i, _| if active[i] { 0.0 } else { g[i] });
        let mut hf = h.clone();
        for i in 0..n {
            if active[i] {
                hf.row_mut(i).fill(0.0);
                hf.column_mut(i).fill(0.0);
            }
        }
        let mut d = -(&hf * &gf);
        if d.dot(&gf) >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -gf.clone();
        }
        let dmax = d.amax();
        if dmax > opts.max_step {
            d *= opts.max_step / dmax;
        }

        // Projected Armijo backtracking.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
            project(&mut trial, lower, upper);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            let ft = safe(&mut f, &trial);
            if ft <= fx + 1e-4 * decrease && ft.is_finite() && decrease <= 0.0 {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }

        let Some((xn, fnew)) = accepted else {
            if resets == 0 {
                // Retry once from steepest descent before giving up.
                resets += 1;
                h = DMatrix::identity(n, n);
                trace.push(TraceEntry {
                    iteration: iter,
                    value: fx,
                    projected_gradient: pg,
                    step: 0.0,
                    note: Some("line search stalled; curvature reset".into()),
                });
                continue;
            }
            let note = format!("line search stalled at projected gradient {pg:.3e}");
            trace.push(TraceEntry {
                iteration: iter,
                value: fx,
                projected_gradient: pg,
                step: 0.0,
                note: Some(note.clone()),
            });
            if pg < opts.stall_pg_tol {
                return Ok(Minimum {
                    x,
                    value: fx,
                    initial_value,
                    iterations: iter,
                    trace,
                });
            }
            return Err(Error::Optimizer {
                reason: note,
                trace,
            });
        };
        resets = 0;
        let gnew = fd_gradient(&mut f, &xn, lower, upper, opts.fd_step)?;
        let s = DVector::from_fn(n, |i, _| xn[i] - x[i]);
        let yv = DVector::from_fn(n, |i, _| gnew.values[i] - g[i]);
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let rel = (fx - fnew).abs() / fx.abs().max(1.0);
        let step = s.amax();
        x = xn;
        fx = fnew;
        grad = gnew;
        let pg_new = projected_gradient_norm(&x, &grad.values, lower, upper);
        trace.push(TraceEntry {
            iteration: iter,
            value: fx,
            projected_gradient: pg_new,
            step,
            note: grad.any_one_sided().then(|| "one-sided differences at bound".into()),
        });
        if rel < opts.rel_tol && pg_new < opts.pg_tol {
            return Ok(Minimum {
                x,
                value: fx,
                initial_value,
                iterations: iter,
                trace,
            });
        }
    }
    let pg = projected_gradient_norm(&x, &grad.values, lower, upper);
    if pg < opts.stall_pg_tol {
        if let Some(last) = trace.last_mut() {
            last.note = Some(format!(
                "iteration limit reached; accepted at projected gradient {pg:.3e}"
            ));
        }
        return Ok(Minimum {
            x,
            value: fx,
            initial_value,
            iterations: opts.max_iter,
            trace,
        });
    }
    Err(Error::Optimizer {
        reason: format!("iteration limit {} reached", opts.max_iter),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_exact() {
        let mut f = |x: &[f64]| Ok(3.0 * x[0] * x[0] + 2.0 * x[0] * x[1] - x[1] + 7.0);
        let g = fd_gradient(&mut f, &[1.5, -2.0], &[-10.0; 2], &[10.0; 2], 1e-5).unwrap();
        assert!((g.values[0] - (6.0 * 1.5 - 4.0)).abs() < 1e-8);
        assert!((g.values[1] - (3.0 - 1.0)).abs() < 1e-8);
        assert!(!g.any_one_sided());
    }

    #[test]
    fn one_sided_at_bound() {
        let mut f = |x: &[f64]| Ok(x[0] * 2.0 + x[1]);
        let g = fd_gradient(&mut f, &[0.0, 0.5], &[0.0, -1.0], &[1.0, 1.0], 1e-5).unwrap();
        assert_eq!(g.one_sided, vec![true, false]);
        assert!((g.values[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rosenbrock_interior() {
        let f = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let opts = OptimizerOptions {
            max_iter: 500,
            ..Default::default()
        };
        let m = minimize(f, &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], &opts).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-3 && (m.x[1] - 1.0).abs() < 1e-3);
        assert!(m.value <= m.initial_value);
    }

    #[test]
    fn active_bound_solution() {
        let f = |x: &[f64]| Ok((x[0] + 3.0).powi(2) + (x[1] - 0.5).powi(2));
        let m = minimize(f, &[1.0, 1.0], &[-1.0, -1.0], &[2.0, 2.0], &OptimizerOptions::default()).unwrap();
        assert!((m.x[0] + 1.0).abs() < 1e-10);
        assert!((m.x[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn iteration_limit_reports_trace() {
        let f = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let opts = OptimizerOptions {
            max_iter: 2,
            ..Default::default()
        };
        match minimize(f, &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], &opts) {
            Err(Error::Optimizer { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected optimizer error, got {other:?}"),
        }
    }
}
