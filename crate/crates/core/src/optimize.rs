//! Gradient-based optimizers shared by every model.
//!
//! `minimize_deterministic` is a limited-memory BFGS descent with a
//! backtracking Armijo line search. `minimize_stochastic` is Adadelta with a
//! look-ahead momentum term. `check_gradient` compares analytic gradients
//! against central differences.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Value, gradient and the running number of objective evaluations.
#[derive(Clone, Debug)]
pub struct ObjectiveEvaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub eval_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

/// Per-iteration optimizer record. Entry 0 is the starting point.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OptTrace {
    pub iterations: Vec<TraceEntry>,
    /// Seconds since the optimizer started, one per entry.
    pub wall_times: Vec<f64>,
}

impl OptTrace {
    fn push(&mut self, e: TraceEntry, t0: Instant) {
        self.iterations.push(e);
        self.wall_times.push(t0.elapsed().as_secs_f64());
    }

    pub fn values(&self) -> Vec<f64> {
        self.iterations.iter().map(|e| e.value).collect()
    }

    pub fn last_value(&self) -> Option<f64> {
        self.iterations.last().map(|e| e.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptStatus {
    GradientTolerance,
    RelativeImprovement,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub trace: OptTrace,
    pub status: OptStatus,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_f_tol: f64,
    /// Number of stored curvature pairs.
    pub memory: usize,
}

impl Default for DeterministicConfig {
    fn default() -> Self {
        DeterministicConfig {
            max_iters: 100,
            grad_tol: 1e-6,
            rel_f_tol: 1e-9,
            memory: 10,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct Counted<F> {
    f: F,
    count: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> Result<ObjectiveEvaluation> {
        self.count += 1;
        let (value, gradient) = (self.f)(x)?;
        if gradient.len() != x.len() {
            return Err(GpError::DimensionMismatch {
                context: "objective gradient",
                expected: x.len(),
                got: gradient.len(),
            });
        }
        Ok(ObjectiveEvaluation {
            value,
            gradient,
            eval_count: self.count,
        })
    }
}

/// L-BFGS search direction `-H g` by the two-loop recursion.
fn lbfgs_direction(g: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Minimizes `f` from `x0`. The returned value never exceeds `f(x0)`.
pub fn minimize_deterministic<F>(f: F, x0: &[f64], cfg: &DeterministicConfig) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let t0 = Instant::now();
    let mut obj = Counted { f, count: 0 };
    let mut x = x0.to_vec();
    let e = obj.eval(&x)?;
    if !e.value.is_finite() || !all_finite(&e.gradient) {
        return Err(GpError::Numerical(format!(
            "objective is not finite at the starting point (value {})",
            e.value
        )));
    }
    let (mut fx, mut g) = (e.value, e.gradient);
    let mut trace = OptTrace::default();
    trace.push(
        TraceEntry {
            iter: 0,
            value: fx,
            grad_norm: norm(&g),
            step_size: 0.0,
        },
        t0,
    );
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut status = OptStatus::MaxIterations;
    if norm(&g) <= cfg.grad_tol {
        status = OptStatus::GradientTolerance;
    } else {
        let mut iter = 0;
        let mut restarted = false;
        while iter < cfg.max_iters {
            let mut dir = lbfgs_direction(&g, &pairs);
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) || !all_finite(&dir) {
                pairs.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = dot(&g, &dir);
            }
            let mut alpha = if pairs.is_empty() { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
                match obj.eval(&xn) {
                    Ok(en) if en.value.is_finite() && all_finite(&en.gradient) => {
                        if en.value <= fx + ARMIJO_C1 * alpha * slope {
                            accepted = Some((xn, en));
                            break;
                        }
                    }
                    Ok(_) => {}
                    // a numerical failure at a trial point only shortens the step
                    Err(err) if err.is_numerical() => {}
                    Err(err) => return Err(err),
                }
                alpha *= 0.5;
            }
            let Some((xn, en)) = accepted else {
                if !pairs.is_empty() && !restarted {
                    log::debug!("line search failed; restarting from steepest descent");
                    pairs.clear();
                    restarted = true;
                    continue;
                }
                status = OptStatus::LineSearchFailed;
                break;
            };
            iter += 1;
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = en.gradient.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &yv);
            if sy > 1e-12 * norm(&s) * norm(&yv) && sy > 0.0 {
                pairs.push((s.clone(), yv, 1.0 / sy));
                if pairs.len() > cfg.memory {
                    pairs.remove(0);
                }
            }
            let f_prev = fx;
            x = xn;
            fx = en.value;
            g = en.gradient;
            trace.push(
                TraceEntry {
                    iter,
                    value: fx,
                    grad_norm: norm(&g),
                    step_size: norm(&s),
                },
                t0,
            );
            if norm(&g) <= cfg.grad_tol {
                status = OptStatus::GradientTolerance;
                break;
            }
            if (f_prev - fx).abs() <= cfg.rel_f_tol * f_prev.abs().max(fx.abs()).max(1.0) {
                status = OptStatus::RelativeImprovement;
                break;
            }
        }
    }
    Ok(OptResult {
        x,
        value: fx,
        gradient: g,
        trace,
        status,
        evaluations: obj.count,
    })
}

/// Settings of the Adadelta-with-momentum rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticConfig {
    pub step_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub offset: f64,
    pub max_iters: usize,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        StochasticConfig {
            step_rate: 0.1,
            momentum: 0.9,
            decay: 0.9,
            offset: 1e-4,
            max_iters: 1000,
        }
    }
}

/// Halvings of the step rate tried before a non-finite gradient aborts.
pub const MAX_STEP_HALVINGS: usize = 20;

/// Minimizes a stochastic objective. `f(x, iter)` returns an unbiased
/// value/gradient estimate for iteration `iter`; any randomness must come
/// from state owned by the closure so that runs are reproducible.
///
/// Each iteration first moves along `momentum * previous_step`, evaluates the
/// gradient there and then takes the Adadelta step
/// `sqrt(E[dx^2] + offset) / sqrt(E[g^2] + offset) * g * step_rate`.
/// A non-finite estimate rejects the step, leaves the accumulators untouched
/// and retries the iteration with the step rate halved.
pub fn minimize_stochastic<F>(mut f: F, x0: &[f64], cfg: &StochasticConfig) -> Result<OptResult>
where
    F: FnMut(&[f64], usize) -> Result<(f64, Vec<f64>)>,
{
    let t0 = Instant::now();
    let p = x0.len();
    let mut x = x0.to_vec();
    let mut gms = vec![0.0; p];
    let mut sms = vec![0.0; p];
    let mut prev_step = vec![0.0; p];
    let mut trace = OptTrace::default();
    let mut evals = 0usize;
    let mut last = (f64::NAN, vec![0.0; p]);
    for iter in 0..cfg.max_iters {
        let mut scale = 1.0;
        let mut done = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            let look: Vec<f64> = prev_step.iter().map(|s| scale * cfg.momentum * s).collect();
            let xl: Vec<f64> = x.iter().zip(&look).map(|(a, b)| a - b).collect();
            evals += 1;
            let (value, grad) = match f(&xl, iter) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => (f64::NAN, vec![f64::NAN; p]),
                Err(e) => return Err(e),
            };
            if grad.len() != p {
                return Err(GpError::DimensionMismatch {
                    context: "stochastic gradient",
                    expected: p,
                    got: grad.len(),
                });
            }
            if !value.is_finite() || !all_finite(&grad) {
                scale *= 0.5;
                continue;
            }
            let rate = cfg.step_rate * scale;
            let mut step = vec![0.0; p];
            for i in 0..p {
                let gm = cfg.decay * gms[i] + (1.0 - cfg.decay) * grad[i] * grad[i];
                let s2 = ((sms[i] + cfg.offset).sqrt() / (gm + cfg.offset).sqrt()) * grad[i] * rate;
                gms[i] = gm;
                step[i] = look[i] + s2;
                x[i] = xl[i] - s2;
                sms[i] = cfg.decay * sms[i] + (1.0 - cfg.decay) * step[i] * step[i];
            }
            trace.push(
                TraceEntry {
                    iter,
                    value,
                    grad_norm: norm(&grad),
                    step_size: norm(&step),
                },
                t0,
            );
            prev_step = step;
            last = (value, grad);
            done = true;
            break;
        }
        if !done {
            return Err(GpError::Numerical(format!(
                "stochastic objective stayed non-finite at iteration {iter} after {MAX_STEP_HALVINGS} step halvings"
            )));
        }
    }
    Ok(OptResult {
        x,
        value: last.0,
        gradient: last.1,
        trace,
        status: OptStatus::MaxIterations,
        evaluations: evals,
    })
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Finite-difference formula used by [`check_gradient_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`.
    Central3,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`.
    Central5,
}

/// Step paired with [`Stencil::Central5`] by the gradient-check suite. At
/// this step the fourth-order truncation error and the round-off error are
/// both near `1e-11` for objectives of order 100.
pub const CENTRAL5_STEP: f64 = 1e-3;

/// Central-difference check of an analytic gradient. Per coordinate the
/// error is `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn check_gradient<F>(f: F, x0: &[f64], step: f64) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_gradient_with(f, x0, step, Stencil::Central3)
}

/// [`check_gradient`] with a selectable stencil.
pub fn check_gradient_with<F>(mut f: F, x0: &[f64], step: f64, stencil: Stencil) -> Result<GradientCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(GpError::invalid("gradient check step must be positive"));
    }
    let (_, analytic) = f(x0)?;
    let mut numeric = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    let mut at = |x: &mut Vec<f64>, i: usize, off: f64| -> Result<f64> {
        x[i] = x0[i] + off;
        let v = f(x)?.0;
        x[i] = x0[i];
        Ok(v)
    };
    for i in 0..x0.len() {
        let d = match stencil {
            Stencil::Central3 => (at(&mut x, i, step)? - at(&mut x, i, -step)?) / (2.0 * step),
            Stencil::Central5 => {
                let (p1, m1) = (at(&mut x, i, step)?, at(&mut x, i, -step)?);
                let (p2, m2) = (at(&mut x, i, 2.0 * step)?, at(&mut x, i, -2.0 * step)?);
                (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step)
            }
        };
        numeric.push(d);
    }
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (1e-8f64).max(a.abs() + n.abs()))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradientCheck {
        max_rel_error,
        rel_errors,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn quad(a: DMatrix<f64>, b: DVector<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let xv = DVector::from_column_slice(x);
            let ax = &a * &xv;
            let val = 0.5 * xv.dot(&ax) - b.dot(&xv);
            Ok((val, (ax - &b).as_slice().to_vec()))
        }
    }

    fn spd5() -> (DMatrix<f64>, DVector<f64>) {
        let m = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 + if i == j { 1.0 } else { 0.0 });
        let a = &m * m.transpose() + DMatrix::identity(5, 5);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, -1.0]);
        (a, b)
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    }

    #[test]
    fn quadratic_is_solved() {
        let (a, b) = spd5();
        let sol = a.clone().cholesky().unwrap().solve(&b);
        let cfg = DeterministicConfig {
            grad_tol: 1e-11,
            rel_f_tol: 0.0,
            ..Default::default()
        };
        let r = minimize_deterministic(quad(a, b), &[0.0; 5], &cfg).unwrap();
        for (x, s) in r.x.iter().zip(sol.iter()) {
            assert!((x - s).abs() < 1e-8, "{x} vs {s}");
        }
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let (a, b) = spd5();
        let sol = a.clone().cholesky().unwrap().solve(&b);
        let r = minimize_deterministic(quad(a, b), sol.as_slice(), &DeterministicConfig::default()).unwrap();
        assert_eq!(r.status, OptStatus::GradientTolerance);
        assert_eq!(r.trace.iterations.len(), 1);
        assert_eq!(r.evaluations, 1);
    }

    #[test]
    fn rosenbrock_within_100_iterations() {
        let r = minimize_deterministic(rosenbrock, &[-1.2, 1.0], &DeterministicConfig::default()).unwrap();
        assert!(r.value < 1e-6, "f = {} after {:?}", r.value, r.status);
        assert!(r.trace.iterations.len() <= 101);
        let v = r.trace.values();
        assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(minimize_deterministic(f, &[0.0], &DeterministicConfig::default()).is_err());
    }

    #[test]
    fn stochastic_converges_on_quadratic() {
        let a = DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, -1.0]);
        let sol = a.clone().cholesky().unwrap().solve(&b);
        let mut q = quad(a, b);
        let r = minimize_stochastic(|x, _| q(x), &[0.0; 5], &StochasticConfig::default()).unwrap();
        for (x, s) in r.x.iter().zip(sol.iter()) {
            assert!((x - s).abs() < 1e-4, "{x} vs {s}");
        }
    }

    #[test]
    fn stochastic_zero_gradient_is_a_null_update() {
        let f = |_: &[f64], _| Ok((1.0, vec![0.0; 3]));
        let r = minimize_stochastic(f, &[1.0, 2.0, 3.0], &StochasticConfig::default()).unwrap();
        assert_eq!(r.x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn stochastic_rejects_non_finite_steps() {
        // finite only close to the start: the lookahead must shrink to recover
        let mut calls = 0;
        let f = |x: &[f64], _| {
            calls += 1;
            if x[0].abs() > 10.0 {
                Ok((f64::INFINITY, vec![f64::NAN]))
            } else {
                Ok((x[0] * x[0], vec![2.0 * x[0]]))
            }
        };
        let cfg = StochasticConfig { max_iters: 50, ..Default::default() };
        let r = minimize_stochastic(f, &[1.0], &cfg).unwrap();
        assert!(r.x[0].is_finite());
        let bad = |_: &[f64], _| Ok((f64::NAN, vec![f64::NAN]));
        assert!(minimize_stochastic(bad, &[1.0], &cfg).is_err());
    }

    #[test]
    fn gradient_check_detects_faults() {
        let (a, b) = spd5();
        let x0 = [0.3, -0.2, 0.1, 0.9, -1.1];
        let c = check_gradient(quad(a.clone(), b.clone()), &x0, 1e-5).unwrap();
        assert!(c.max_rel_error < 1e-9, "{}", c.max_rel_error);
        let mut q = quad(a, b);
        let corrupt = move |x: &[f64]| {
            let (v, mut g) = q(x)?;
            g[2] *= 2.0;
            Ok((v, g))
        };
        assert!(check_gradient(corrupt, &x0, 1e-5).unwrap().max_rel_error > 0.3);
    }
}
