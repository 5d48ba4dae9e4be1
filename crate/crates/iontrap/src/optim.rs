//! Small numerical optimizers: L-BFGS with backtracking for smooth likelihoods and
//! Levenberg-Marquardt for least-squares curve fits.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("no convergence after {iterations} iterations (|grad| = {grad_norm:.3e}, f = {value:.6e})")]
    NotConverged { iterations: usize, grad_norm: f64, value: f64 },
    #[error("objective returned a non-finite value")]
    NonFinite,
    #[error("least-squares problem is underdetermined ({points} points, {params} parameters)")]
    Underdetermined { points: usize, params: usize },
    #[error("singular normal matrix at the least-squares optimum")]
    Singular,
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 20, grad_tol: 1e-6, max_iter: 50_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which returns the value and writes the gradient into its second argument.
pub fn lbfgs<F>(mut f: F, x0: &[f64], opts: LbfgsOptions) -> Result<Minimum, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Err(OptimError::NonFinite);
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut stalls = 0;

    for iter in 0..opts.max_iter {
        let gnorm = norm(&g);
        if gnorm < opts.grad_tol {
            return Ok(Minimum { x, value: fx, grad_norm: gnorm, iterations: iter });
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match history.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / gnorm.max(1.0),
        };
        for v in d.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = fx;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if history.is_empty() {
                stalls += 1;
            }
            history.clear();
            if stalls > 3 {
                return Err(OptimError::NotConverged { iterations: iter, grad_norm: gnorm, value: fx });
            }
            continue;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        stalls = 0;
    }
    Err(OptimError::NotConverged { iterations: opts.max_iter, grad_norm: norm(&g), value: fx })
}

/// Least-squares fit result with the usual covariance estimate.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub residual_rms: f64,
    pub iterations: usize,
}

/// Levenberg-Marquardt on y = model(p, x), numeric Jacobian.
pub fn levenberg_marquardt<M>(model: M, xs: &[f64], ys: &[f64], p0: &[f64]) -> Result<FitResult, OptimError>
where
    M: Fn(&[f64], f64) -> f64,
{
    let n = xs.len();
    let k = p0.len();
    if n <= k {
        return Err(OptimError::Underdetermined { points: n, params: k });
    }
    let scale: Vec<f64> = p0.iter().map(|v| if *v != 0.0 { v.abs() } else { 1.0 }).collect();
    let residuals = |p: &[f64]| -> DVector<f64> { DVector::from_iterator(n, xs.iter().zip(ys).map(|(x, y)| y - model(p, *x))) };
    let jacobian = |p: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(n, k);
        let mut q = p.to_vec();
        for c in 0..k {
            let h = 1e-7 * p[c].abs().max(scale[c]);
            q[c] = p[c] + h;
            let up: Vec<f64> = xs.iter().map(|x| model(&q, *x)).collect();
            q[c] = p[c] - h;
            for (r, x) in xs.iter().enumerate() {
                j[(r, c)] = (up[r] - model(&q, *x)) / (2.0 * h);
            }
            q[c] = p[c];
        }
        j
    };

    let mut p = p0.to_vec();
    let mut r = residuals(&p);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(OptimError::NonFinite);
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        let j = jacobian(&p);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let mut improved = false;
        let mut converged = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = residuals(&trial);
            let ct = rt.norm_squared();
            if ct.is_finite() && ct <= cost {
                let rel = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                converged = rel < 1e-13;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged || lambda > 1e12 {
            break;
        }
        let grad = (j.transpose() * &r).amax();
        if grad < 1e-15 * (1.0 + cost) {
            break;
        }
    }
    let j = jacobian(&p);
    let jtj = j.transpose() * &j;
    let dof = (n - k) as f64;
    let s2 = cost / dof;
    let inv = jtj.try_inverse().ok_or(OptimError::Singular)?;
    let covariance = inv * s2;
    let errors = (0..k).map(|d| covariance[(d, d)].max(0.0).sqrt()).collect();
    Ok(FitResult { params: p, errors, covariance, residual_rms: (cost / n as f64).sqrt(), iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lbfgs_rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let m = lbfgs(f, &[-1.2, 1.0], LbfgsOptions::default()).unwrap();
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lbfgs_reports_non_convergence() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            x[0]
        };
        let r = lbfgs(f, &[0.0], LbfgsOptions { max_iter: 5, ..Default::default() });
        assert!(matches!(r, Err(OptimError::NotConverged { .. })));
    }

    #[test]
    fn lm_recovers_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0 + 0.01 * (x * 7.3).sin()).collect();
        let fit = levenberg_marquardt(|p, x| p[0] * x + p[1], &xs, &ys, &[1.0, 0.0]).unwrap();
        assert!((fit.params[0] - 3.0).abs() < 1e-3);
        assert!((fit.params[1] + 2.0).abs() < 1e-2);
        assert!(fit.errors.iter().all(|e| *e > 0.0));
        assert!(levenberg_marquardt(|p, x| p[0] * x, &[1.0], &[1.0], &[1.0]).is_err());
    }
}
