//! Small unconstrained minimizers: damped Newton with Armijo backtracking
//! for control sequences (exact Hessians are available) and L-BFGS for the
//! low-dimensional weight fit.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Stop when the relative objective decrease falls below this.
    pub rel_tol: f64,
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-8,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
}

fn finite_or_inf(v: Result<f64>) -> f64 {
    match v {
        Ok(x) if x.is_finite() => x,
        _ => f64::INFINITY,
    }
}

fn backtrack(
    x: &DVector<f64>,
    f: f64,
    slope: f64,
    dir: &DVector<f64>,
    value: &mut impl FnMut(&DVector<f64>) -> Result<f64>,
) -> Option<(DVector<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let trial = x + dir * step;
        let fv = finite_or_inf(value(&trial));
        if fv <= f + ARMIJO * step * slope {
            return Some((trial, fv));
        }
        step *= 0.5;
    }
    None
}

/// Newton steps on `H + mu I`, with `mu` raised until the Cholesky
/// factorization succeeds; falls back to steepest descent if the step is
/// not a descent direction.
pub fn minimize_newton(
    x0: DVector<f64>,
    mut value: impl FnMut(&DVector<f64>) -> Result<f64>,
    mut derivatives: impl FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>,
    opts: MinimizeOptions,
) -> Result<MinimizeResult> {
    let mut x = x0;
    let (mut f, mut g, mut h) = derivatives(&x)?;
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        if g.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = newton_direction(&h, &g);
        let slope = g.dot(&dir);
        let (dir, slope) = if slope < 0.0 { (dir, slope) } else { (-&g, -g.norm_squared()) };
        let Some((next, fnext)) = backtrack(&x, f, slope, &dir, &mut value) else {
            // no further decrease representable
            converged = true;
            break;
        };
        let decrease = f - fnext;
        x = next;
        (f, g, h) = derivatives(&x)?;
        trace.push(f);
        if decrease <= opts.rel_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(MinimizeResult {
        x,
        value: f,
        iterations,
        converged,
        trace,
    })
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let scale = h.amax().max(1e-12);
    let mut mu = 0.0;
    for _ in 0..40 {
        let shifted = h + DMatrix::identity(n, n) * mu;
        if let Some(chol) = shifted.cholesky() {
            return -chol.solve(g);
        }
        mu = if mu == 0.0 { 1e-8 * scale } else { mu * 10.0 };
    }
    -g.clone()
}

/// Limited-memory BFGS with Armijo backtracking.
pub fn lbfgs(
    x0: DVector<f64>,
    mut objective: impl FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    memory: usize,
    opts: MinimizeOptions,
) -> Result<MinimizeResult> {
    let mut x = x0;
    let (mut f, mut g) = objective(&x)?;
    let mut trace = vec![f];
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        if g.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            q *= s.dot(y) / y.norm_squared();
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q += s * (a - b);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            history.clear();
            dir = -&g;
            slope = -g.norm_squared();
        }

        let mut value = |p: &DVector<f64>| objective(p).map(|(v, _)| v);
        let Some((next, fnext)) = backtrack(&x, f, slope, &dir, &mut value) else {
            if history.is_empty() {
                converged = true;
                break;
            }
            history.clear();
            continue;
        };
        let (_, gnext) = objective(&next)?;
        let s = &next - &x;
        let y = &gnext - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            history.push_back((s, y, 1.0 / sy));
            if history.len() > memory {
                history.pop_front();
            }
        }
        let decrease = f - fnext;
        x = next;
        f = fnext;
        g = gnext;
        trace.push(f);
        if decrease <= opts.rel_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(MinimizeResult {
        x,
        value: f,
        iterations,
        converged,
        trace,
    })
}
