//! Projected gradient descent with Armijo backtracking, and a central-difference
//! gradient checker.
//!
//! Every accepted iterate satisfies the sufficient-decrease test, so the recorded
//! objective trace never increases. Barzilai–Borwein trial steps may be enabled; they
//! only change where the backtracking search starts, not the acceptance rule.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Stop when `||P(x - ∇f) - x|| <= grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    pub ls_shrink: f64,
    pub ls_grow: f64,
    pub armijo_c: f64,
    pub initial_step: f64,
    /// Start each line search at the Barzilai–Borwein step when available.
    pub bb_steps: bool,
    /// The search gives up once the trial step falls below this value.
    pub min_step: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            grad_tol: 1e-6,
            ls_shrink: 0.5,
            ls_grow: 2.0,
            armijo_c: 1e-4,
            initial_step: 1.0,
            bb_steps: true,
            min_step: 1e-30,
        }
    }
}

impl SolveOptions {
    /// Defaults for nuisance fitting.
    pub fn nuisance() -> Self {
        Self {
            max_iters: 20_000,
            grad_tol: 1e-6,
            ..Self::default()
        }
    }

    /// Defaults for per-pixel density reconstruction.
    pub fn density() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-5,
            ..Self::default()
        }
    }

    /// Defaults for the per-slice tomographic solves (in normalized units).
    pub fn tomography() -> Self {
        Self {
            max_iters: 3000,
            grad_tol: 1e-7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return Err(Error::Config(format!(
                "ls_shrink must lie in (0, 1), got {}",
                self.ls_shrink
            )));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::Config(format!(
                "armijo_c must lie in (0, 1), got {}",
                self.armijo_c
            )));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::Config(format!(
                "initial_step must be positive, got {}",
                self.initial_step
            )));
        }
        if !(self.ls_grow >= 1.0) {
            return Err(Error::Config(format!(
                "ls_grow must be at least 1, got {}",
                self.ls_grow
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Config(format!(
                "grad_tol must be non-negative, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

/// Feasible set: per-coordinate lower bounds (`-inf` for free coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    lower: Vec<f64>,
}

impl Bounds {
    pub fn nonnegative(n: usize) -> Self {
        Self { lower: vec![0.0; n] }
    }

    pub fn free(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn from_lower(lower: Vec<f64>) -> Self {
        Self { lower }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, lo) in x.iter_mut().zip(&self.lower) {
            if *v < *lo {
                *v = *lo;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    MaxIters,
    StepUnderflow,
    /// An accepted step changed the objective by less than `grad_tol²` relative.
    SmallDecrease,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Objective at the starting point followed by every accepted iterate.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn solver_error(iteration: usize, message: impl Into<String>, x: &[f64]) -> Error {
    Error::Solver {
        iteration,
        message: message.into(),
        iterate: x.to_vec(),
    }
}

/// Minimizes `f` over the box `bounds`. `f(x, grad)` returns the objective and writes
/// the gradient.
pub fn minimize<F>(mut f: F, bounds: &Bounds, x0: &[f64], opts: &SolveOptions) -> Result<SolveResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    opts.validate()?;
    let n = x0.len();
    if bounds.len() != n {
        return Err(Error::Shape(format!("{} bounds for {} variables", bounds.len(), n)));
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    if !fx.is_finite() {
        return Err(solver_error(0, format!("objective is {fx} at the projected start"), &x));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(solver_error(0, "non-finite gradient at the projected start", &x));
    }
    let mut trace = vec![fx];
    let mut step = opts.initial_step;
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut bb: Option<f64> = None;
    let mut iterations = 0;
    let termination = loop {
        let pg2: f64 = x
            .iter()
            .zip(&g)
            .zip(&bounds.lower)
            .map(|((xi, gi), lo)| {
                let d = (xi - gi).max(*lo) - xi;
                d * d
            })
            .sum();
        if pg2.sqrt() <= opts.grad_tol * fx.abs().max(1.0) {
            break Termination::GradTol;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIters;
        }
        let mut t = match (opts.bb_steps, bb) {
            (true, Some(b)) => b,
            _ => step,
        };
        let accepted: Option<f64> = loop {
            for i in 0..n {
                xn[i] = x[i] - t * g[i];
            }
            bounds.project(&mut xn);
            let slope: f64 = g.iter().zip(&xn).zip(&x).map(|((gi, a), b)| gi * (a - b)).sum();
            if slope >= 0.0 {
                // projected step did not move downhill; shrink
                t *= opts.ls_shrink;
                if t < opts.min_step {
                    break None;
                }
                continue;
            }
            let fnew = f(&xn, &mut gn);
            evaluations += 1;
            if fnew.is_finite() && fnew <= fx + opts.armijo_c * slope {
                if gn.iter().any(|v| !v.is_finite()) {
                    return Err(solver_error(iterations + 1, "non-finite gradient", &xn));
                }
                break Some(fnew);
            }
            t *= opts.ls_shrink;
            if t < opts.min_step {
                break None;
            }
        };
        let Some(fnew) = accepted else {
            break Termination::StepUnderflow;
        };
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = xn[i] - x[i];
            let y = gn[i] - g[i];
            ss += s * s;
            sy += s * y;
        }
        bb = if sy > 0.0 && ss > 0.0 {
            Some((ss / sy).clamp(1e-30, 1e30))
        } else {
            None
        };
        step = (t * opts.ls_grow).min(1e30);
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        fx = fnew;
        trace.push(fx);
        iterations += 1;
    };
    Ok(SolveResult {
        x,
        objective: fx,
        trace,
        iterations,
        evaluations,
        termination,
    })
}

/// Residuals `r(x)` and, when requested, the row-major `m × n` Jacobian.
pub trait Residuals {
    fn n_residuals(&self) -> usize;
    fn eval(&mut self, x: &[f64], r: &mut [f64], jac: Option<&mut [f64]>);
}

/// Minimizes `||r(x)||²` over the box `bounds` by Levenberg–Marquardt with Marquardt's
/// diagonal scaling. Coordinates held at their bound by an outward gradient are frozen
/// for the step; the step is then projected. Only decreasing steps are accepted, so the
/// trace never increases.
pub fn least_squares<R: Residuals>(
    res: &mut R,
    bounds: &Bounds,
    x0: &[f64],
    opts: &SolveOptions,
) -> Result<SolveResult> {
    opts.validate()?;
    let n = x0.len();
    let m = res.n_residuals();
    if bounds.len() != n {
        return Err(Error::Shape(format!("{} bounds for {} variables", bounds.len(), n)));
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut r = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    res.eval(&x, &mut r, Some(&mut jac));
    let mut evaluations = 1;
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut fx = sq(&r);
    if !fx.is_finite() || jac.iter().any(|v| !v.is_finite()) {
        return Err(solver_error(0, format!("objective is {fx} at the projected start"), &x));
    }
    let mut trace = vec![fx];
    let mut mu = 1e-3;
    let mut xn = vec![0.0; n];
    let mut rn = vec![0.0; m];
    let mut iterations = 0;
    let termination = loop {
        let jm = DMatrix::from_row_slice(m, n, &jac);
        let jtj = jm.transpose() * &jm;
        let g: Vec<f64> = (jm.transpose() * DVector::from_column_slice(&r))
            .iter()
            .map(|v| 2.0 * v)
            .collect();
        let pg2: f64 = (0..n)
            .map(|i| {
                let d = (x[i] - g[i]).max(bounds.lower[i]) - x[i];
                d * d
            })
            .sum();
        if pg2.sqrt() <= opts.grad_tol * fx.abs().max(1.0) {
            break Termination::GradTol;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIters;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !(x[i] <= bounds.lower[i] && g[i] > 0.0)).collect();
        let nf = free.len();
        let accepted = loop {
            let mut a = DMatrix::from_fn(nf, nf, |i, j| jtj[(free[i], free[j])]);
            for i in 0..nf {
                a[(i, i)] += mu * jtj[(free[i], free[i])].max(1e-300);
            }
            let rhs = DVector::from_fn(nf, |i, _| -0.5 * g[free[i]]);
            let step = a
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| a.lu().solve(&rhs));
            if let Some(step) = step.filter(|s| s.iter().all(|v| v.is_finite())) {
                xn.copy_from_slice(&x);
                for (k, &i) in free.iter().enumerate() {
                    xn[i] += step[k];
                }
                bounds.project(&mut xn);
                res.eval(&xn, &mut rn, None);
                evaluations += 1;
                let fnew = sq(&rn);
                if fnew.is_finite() && fnew < fx {
                    mu = (mu / 3.0).max(1e-15);
                    break Some(fnew);
                }
            }
            mu *= 4.0;
            if mu > 1e30 {
                break None;
            }
        };
        let Some(fnew) = accepted else {
            break Termination::StepUnderflow;
        };
        std::mem::swap(&mut x, &mut xn);
        res.eval(&x, &mut r, Some(&mut jac));
        evaluations += 1;
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(solver_error(iterations + 1, "non-finite Jacobian", &x));
        }
        let decrease = fx - fnew;
        fx = fnew;
        trace.push(fx);
        iterations += 1;
        if decrease <= opts.grad_tol * opts.grad_tol * fx.abs().max(f64::MIN_POSITIVE) {
            break Termination::SmallDecrease;
        }
    };
    Ok(SolveResult {
        x,
        objective: fx,
        trace,
        iterations,
        evaluations,
        termination,
    })
}

/// Largest relative discrepancy between the analytic gradient and central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` over every coordinate.
pub fn check_gradient<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    check_gradient_on(f, x, h, &coords)
}

/// As [`check_gradient`] on `count` coordinates drawn with `seed`.
pub fn check_gradient_subset<F>(f: F, x: &[f64], h: f64, count: usize, seed: u64) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, x.len(), count.min(x.len())).into_vec();
    check_gradient_on(f, x, h, &coords)
}

fn check_gradient_on<F>(mut f: F, x: &[f64], h: f64, coords: &[usize]) -> f64
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    f(x, &mut g);
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // components far below the gradient's overall scale are compared absolutely
    let floor = 1e-8 * gmax.max(f64::MIN_POSITIVE);
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        xp[i] = x[i] + h;
        let fp = f(&xp, &mut scratch);
        xp[i] = x[i] - h;
        let fm = f(&xp, &mut scratch);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        let denom = g[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((g[i] - fd).abs() / denom);
    }
    worst
}

/// Renders a trace as CSV `iter,objective`.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iter,objective\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{v:.17e}\n"));
    }
    s
}
