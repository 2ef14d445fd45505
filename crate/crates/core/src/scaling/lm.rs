//! Bound-constrained Levenberg-Marquardt for small dense least-squares problems.

use crate::error::{Error, Result};

/// A residual vector `r(p)` of fixed length. Minimized quantity is `sum r_i^2`.
pub trait LeastSquares {
    fn num_residuals(&self) -> usize;

    fn residuals(&self, p: &[f64], out: &mut [f64]);

    /// Row-major `num_residuals x p.len()` Jacobian. Defaults to central differences.
    fn jacobian(&self, p: &[f64], out: &mut [f64]) {
        let n = self.num_residuals();
        let k = p.len();
        let mut q = p.to_vec();
        let mut plus = vec![0.0; n];
        let mut minus = vec![0.0; n];
        for j in 0..k {
            let h = 1e-7 * p[j].abs().max(1.0);
            q[j] = p[j] + h;
            self.residuals(&q, &mut plus);
            q[j] = p[j] - h;
            self.residuals(&q, &mut minus);
            q[j] = p[j];
            for i in 0..n {
                out[i * k + j] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }
}

/// Any closure `(params, residuals_out)` with a known residual count.
pub struct FnProblem<F> {
    pub len: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64])> LeastSquares for FnProblem<F> {
    fn num_residuals(&self) -> usize {
        self.len
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        (self.f)(p, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(k: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; k],
            upper: vec![f64::INFINITY; k],
        }
    }

    fn project(&self, p: &mut [f64]) {
        for ((v, lo), hi) in p.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step moves the parameters less than this.
    pub step_tol: f64,
    /// Stop once an accepted step improves the cost by less than this fraction.
    pub improvement_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            step_tol: 1e-10,
            improvement_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmStop {
    /// Projected gradient vanished.
    Stationary,
    StepTolerance,
    ImprovementTolerance,
    MaxIterations,
    /// Damping grew without finding a decrease.
    NoProgress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub stop: LmStop,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Solves `a x = b` for symmetric positive definite `a` (k x k, row-major).
fn cholesky_solve(a: &[f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for t in 0..j {
                s -= l[i * k + t] * l[j * k + t];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        let s: f64 = (0..i).map(|t| l[i * k + t] * y[t]).sum();
        y[i] = (b[i] - s) / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|t| l[t * k + i] * x[t]).sum();
        x[i] = (y[i] - s) / l[i * k + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Projected Levenberg-Marquardt. Each iteration fixes the parameters pinned
/// at a bound whose gradient points outward, solves the damped normal
/// equations for the rest and projects the trial point back into the box.
/// Damping starts at zero (a plain Gauss-Newton step) and grows tenfold per
/// rejected step.
pub fn lm_least_squares(
    problem: &impl LeastSquares,
    initial: &[f64],
    bounds: &Bounds,
    options: &LmOptions,
) -> Result<LmResult> {
    let k = initial.len();
    if bounds.lower.len() != k || bounds.upper.len() != k {
        return Err(Error::invalid("bounds length differs from parameter count"));
    }
    if bounds.lower.iter().zip(&bounds.upper).any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::invalid("inconsistent bounds"));
    }
    let n = problem.num_residuals();
    let mut p = initial.to_vec();
    bounds.project(&mut p);
    let mut r = vec![0.0; n];
    problem.residuals(&p, &mut r);
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return Err(Error::NonFinite("residual at the initial point".into()));
    }

    let mut jac = vec![0.0; n * k];
    let mut trial_r = vec![0.0; n];
    let mut lambda = 0.0f64;
    let mut iterations = 0;
    let mut attempts = 0;
    let mut need_jac = true;
    let (mut jtj, mut g) = (vec![0.0; k * k], vec![0.0; k]);
    loop {
        if attempts >= options.max_iterations {
            return Ok(LmResult { params: p, cost, iterations, stop: LmStop::MaxIterations });
        }
        if need_jac {
            problem.jacobian(&p, &mut jac);
            for a in 0..k {
                g[a] = (0..n).map(|i| jac[i * k + a] * r[i]).sum();
                for b in 0..k {
                    jtj[a * k + b] = (0..n).map(|i| jac[i * k + a] * jac[i * k + b]).sum();
                }
            }
            need_jac = false;
        }
        let free: Vec<usize> = (0..k)
            .filter(|&j| {
                let at_lo = p[j] <= bounds.lower[j] && g[j] > 0.0;
                let at_hi = p[j] >= bounds.upper[j] && g[j] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let gmax = free.iter().map(|&j| g[j].abs()).fold(0.0, f64::max);
        if cost == 0.0 || free.is_empty() || gmax == 0.0 {
            return Ok(LmResult { params: p, cost, iterations, stop: LmStop::Stationary });
        }
        attempts += 1;

        let f = free.len();
        let diag_max = free.iter().map(|&j| jtj[j * k + j]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut a = vec![0.0; f * f];
        let mut rhs = vec![0.0; f];
        for (x, &i) in free.iter().enumerate() {
            rhs[x] = -g[i];
            for (y, &j) in free.iter().enumerate() {
                a[x * f + y] = jtj[i * k + j];
            }
            // Marquardt scaling with a floor so flat directions stay solvable.
            a[x * f + x] += lambda * jtj[i * k + i].max(1e-12 * diag_max);
        }
        let step = cholesky_solve(&a, &rhs, f);
        let mut accepted = false;
        if let Some(step) = step {
            let mut trial = p.clone();
            for (x, &i) in free.iter().enumerate() {
                trial[i] += step[x];
            }
            bounds.project(&mut trial);
            problem.residuals(&trial, &mut trial_r);
            let trial_cost = sum_sq(&trial_r);
            if trial_cost.is_finite() && trial_cost < cost {
                let moved = trial.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let improvement = (cost - trial_cost) / cost;
                p = trial;
                std::mem::swap(&mut r, &mut trial_r);
                cost = trial_cost;
                iterations += 1;
                need_jac = true;
                accepted = true;
                lambda = if lambda < 1e-12 { 0.0 } else { lambda / 10.0 };
                if moved < options.step_tol {
                    return Ok(LmResult { params: p, cost, iterations, stop: LmStop::StepTolerance });
                }
                if improvement < options.improvement_tol {
                    return Ok(LmResult { params: p, cost, iterations, stop: LmStop::ImprovementTolerance });
                }
            }
        }
        if !accepted {
            lambda = if lambda == 0.0 { 1e-3 } else { lambda * 10.0 };
            if lambda > 1e20 {
                return Ok(LmResult { params: p, cost, iterations, stop: LmStop::NoProgress });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Line(Vec<f64>);

    impl LeastSquares for Line {
        fn num_residuals(&self) -> usize {
            self.0.len()
        }

        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for (o, x) in out.iter_mut().zip(&self.0) {
                *o = p[0] * x - 2.5 * x;
            }
        }

        fn jacobian(&self, _p: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&self.0);
        }
    }

    #[test]
    fn linear_model_one_step() {
        let prob = Line(vec![1.0, 2.0, 3.0, 4.0]);
        let one = LmOptions {
            max_iterations: 1,
            ..LmOptions::default()
        };
        let res = lm_least_squares(&prob, &[0.0], &Bounds::unbounded(1), &one).unwrap();
        assert_eq!(res.iterations, 1);
        assert!((res.params[0] - 2.5).abs() < 1e-14, "{res:?}");
    }

    #[test]
    fn rosenbrock_minimum() {
        let prob = FnProblem {
            len: 2,
            f: |p: &[f64], out: &mut [f64]| {
                out[0] = 10.0 * (p[1] - p[0] * p[0]);
                out[1] = 1.0 - p[0];
            },
        };
        let res = lm_least_squares(&prob, &[-1.2, 1.0], &Bounds::unbounded(2), &LmOptions::default()).unwrap();
        assert!((res.params[0] - 1.0).abs() < 1e-6, "{res:?}");
        assert!((res.params[1] - 1.0).abs() < 1e-6, "{res:?}");
    }

    #[test]
    fn start_at_optimum_does_not_move() {
        let prob = FnProblem {
            len: 2,
            f: |p: &[f64], out: &mut [f64]| {
                out[0] = p[0] - 3.0;
                out[1] = p[1] + 1.0;
            },
        };
        let res = lm_least_squares(&prob, &[3.0, -1.0], &Bounds::unbounded(2), &LmOptions::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.params, vec![3.0, -1.0]);
    }

    #[test]
    fn bound_is_respected() {
        let prob = FnProblem {
            len: 1,
            f: |p: &[f64], out: &mut [f64]| out[0] = p[0] + 2.0,
        };
        let bounds = Bounds {
            lower: vec![0.0],
            upper: vec![10.0],
        };
        let res = lm_least_squares(&prob, &[5.0], &bounds, &LmOptions::default()).unwrap();
        assert_eq!(res.params, vec![0.0]);
    }

    #[test]
    fn non_finite_start_rejected() {
        let prob = FnProblem {
            len: 1,
            f: |p: &[f64], out: &mut [f64]| out[0] = p[0].ln(),
        };
        assert!(lm_least_squares(&prob, &[-1.0], &Bounds::unbounded(1), &LmOptions::default()).is_err());
    }
}
