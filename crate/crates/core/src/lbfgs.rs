//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant of the Armijo condition.
    pub armijo_c: f64,
    pub max_halvings: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iter: 500,
            armijo_c: 1e-4,
            max_halvings: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// `false` when `max_iter` was reached before the gradient tolerance.
    pub converged: bool,
}

/// Minimizes `f` from `x0`. The callback returns the value and gradient.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);

    for iter in 0..opts.max_iter {
        let gnorm = norm2(&g);
        if gnorm <= opts.grad_tol {
            return Ok(LbfgsResult {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            });
        }

        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Curvature information went stale; restart from steepest descent.
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + opts.armijo_c * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fxn, gn)) = accepted else {
            return Err(Error::LineSearchStalled {
                iterations: iter,
                best_value: fx,
                best_x: x,
            });
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * norm2(&s) * norm2(&y) && sy > 0.0 {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        } else {
            // Negative curvature along the step: the stored pairs no longer
            // describe the local Hessian.
            history.clear();
        }
        x = xn;
        fx = fxn;
        g = gn;
    }
    let gnorm = norm2(&g);
    Ok(LbfgsResult {
        x,
        value: fx,
        grad_norm: gnorm,
        iterations: opts.max_iter,
        converged: gnorm <= opts.grad_tol,
    })
}

/// Two-loop recursion: returns `-H g` for the implicit inverse Hessian `H`.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_quadratic_converges_immediately() {
        let a = [1.0, -2.0, 0.5];
        let r = lbfgs_minimize(
            |x| {
                let d: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x - a).collect();
                (dot(&d, &d), d.iter().map(|v| 2.0 * v).collect())
            },
            &[0.0; 3],
            &LbfgsOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 3, "{}", r.iterations);
        for (x, a) in r.x.iter().zip(&a) {
            assert!((x - a).abs() < 1e-9);
        }
    }

    #[test]
    fn rosenbrock() {
        let r = lbfgs_minimize(
            |p| {
                let (x, y) = (p[0], p[1]);
                let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
                let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
                let gy = 200.0 * (y - x * x);
                (f, vec![gx, gy])
            },
            &[-1.2, 1.0],
            &LbfgsOptions::default(),
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let r = lbfgs_minimize(|_| (f64::NAN, vec![0.0]), &[0.0], &LbfgsOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn max_iter_is_reported() {
        let opts = LbfgsOptions {
            max_iter: 2,
            ..LbfgsOptions::default()
        };
        let r = lbfgs_minimize(
            |p| {
                let (x, y) = (p[0], p[1]);
                let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
                (f, vec![-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)])
            },
            &[-1.2, 1.0],
            &opts,
        )
        .unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
    }

    #[test]
    fn convex_quadratic_matches_linear_solve() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let n = 10;
        // A = M M^T + n I is SPD; x* solves A x = b by Gaussian elimination.
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>()
                    + if i == j { n as f64 } else { 0.0 };
            }
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| a[i * n..(i + 1) * n].iter().copied().chain([b[i]]).collect())
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap();
            aug.swap(c, p);
            for r in 0..n {
                if r != c {
                    let f = aug[r][c] / aug[c][c];
                    for k in c..=n {
                        aug[r][k] -= f * aug[c][k];
                    }
                }
            }
        }
        let exact: Vec<f64> = (0..n).map(|i| aug[i][n] / aug[i][i]).collect();
        let r = lbfgs_minimize(
            |x| {
                let ax: Vec<f64> = (0..n).map(|i| dot(&a[i * n..(i + 1) * n], x)).collect();
                let f = 0.5 * dot(x, &ax) - dot(&b, x);
                (f, ax.iter().zip(&b).map(|(p, q)| p - q).collect())
            },
            &vec![0.0; n],
            &LbfgsOptions::default(),
        )
        .unwrap();
        for (x, e) in r.x.iter().zip(&exact) {
            assert!((x - e).abs() < 1e-6);
        }
    }
}
