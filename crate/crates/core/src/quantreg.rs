//! Linear quantile regression by exact vertex descent on the check loss.
//!
//! The check loss is convex and piecewise linear, so some minimizer
//! interpolates `p` observations. Starting from such a vertex, each step
//! leaves along the steepest descending edge and stops at the exact
//! minimizer of the loss along that edge (a weighted-median search over
//! the edge's breakpoints). No descending edge means the vertex is optimal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Check loss `Σ r_i (τ - 1{r_i < 0})` at `beta`.
pub fn pinball_loss(x: &[Vec<f64>], y: &[f64], beta: &[f64], tau: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(row, &yi)| {
            let r = yi - dot(row, beta);
            if r < 0.0 {
                (tau - 1.0) * r
            } else {
                tau * r
            }
        })
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantRegFit {
    pub beta: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn basis_matrix(x: &[Vec<f64>], basis: &[usize]) -> DMatrix<f64> {
    let p = basis.len();
    DMatrix::from_fn(p, p, |r, c| x[basis[r]][c])
}

/// Greedy choice of `p` linearly independent rows, nearest the τ-quantile of `y` first.
fn initial_basis(x: &[Vec<f64>], y: &[f64], tau: f64) -> Option<Vec<usize>> {
    let p = x[0].len();
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = sorted[((tau * (y.len() - 1) as f64).round() as usize).min(y.len() - 1)];
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| (y[a] - q).abs().total_cmp(&(y[b] - q).abs()).then(a.cmp(&b)));

    // Gram–Schmidt on candidate rows.
    let mut chosen = Vec::with_capacity(p);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    for i in order {
        let mut v = x[i].clone();
        for u in &ortho {
            let c = dot(&v, u);
            for (vk, uk) in v.iter_mut().zip(u) {
                *vk -= c * uk;
            }
        }
        let norm = dot(&v, &v).sqrt();
        let scale = dot(&x[i], &x[i]).sqrt().max(1.0);
        if norm > 1e-9 * scale {
            ortho.push(v.iter().map(|z| z / norm).collect());
            chosen.push(i);
            if chosen.len() == p {
                return Some(chosen);
            }
        }
    }
    None
}

/// Minimizes the check loss of `y` on the rows of `x` (include a column of ones for an intercept).
pub fn fit_quantile_regression(x: &[Vec<f64>], y: &[f64], tau: f64) -> Result<QuantRegFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("quantile level {tau} must lie in (0, 1)")));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Estimation("design and outcome lengths differ or are empty".into()));
    }
    let p = x[0].len();
    if p == 0 || x.len() < p {
        return Err(Error::Estimation(format!("need at least {p} observations, got {}", x.len())));
    }
    let mut basis = initial_basis(x, y, tau)
        .ok_or_else(|| Error::Estimation("design matrix is rank deficient".into()))?;

    let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let zero_tol = 1e-11 * scale;
    let max_iter = 50 * x.len() + 100;

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iterations = 0;
    let mut converged = false;
    let mut stalls = 0;

    while iterations < max_iter {
        let m = basis_matrix(x, &basis);
        let inv = match m.try_inverse() {
            Some(inv) => inv,
            None => return Err(Error::Estimation("vertex basis became singular".into())),
        };
        let yh = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
        let beta: Vec<f64> = (&inv * yh).iter().copied().collect();
        let loss = pinball_loss(x, y, &beta, tau);
        match &best {
            Some((_, l)) if loss >= *l - 1e-14 * scale => stalls += 1,
            _ => {
                best = Some((beta.clone(), loss));
                stalls = 0;
            }
        }
        if stalls > 4 * p + 10 {
            break;
        }
        let resid: Vec<f64> = x.iter().zip(y).map(|(row, &yi)| yi - dot(row, &beta)).collect();

        // Steepest descending edge among ±(column j of the inverse).
        let mut pick: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;
        for j in 0..p {
            for sign in [1.0, -1.0] {
                let d: Vec<f64> = (0..p).map(|r| sign * inv[(r, j)]).collect();
                let a: Vec<f64> = x.iter().map(|row| dot(row, &d)).collect();
                let slope: f64 = resid
                    .iter()
                    .zip(&a)
                    .map(|(&r, &ai)| {
                        if r > zero_tol {
                            -tau * ai
                        } else if r < -zero_tol {
                            (1.0 - tau) * ai
                        } else {
                            ((1.0 - tau) * ai).max(-tau * ai)
                        }
                    })
                    .sum();
                let norm = dot(&d, &d).sqrt();
                let rate = slope / norm;
                if slope < -1e-12 * scale && pick.as_ref().is_none_or(|(best_rate, ..)| rate < *best_rate) {
                    pick = Some((rate, j, d, a));
                }
            }
        }
        let Some((_, leaving, _, a)) = pick else {
            converged = true;
            break;
        };

        // Exact line search: walk breakpoints until the slope turns nonnegative.
        let mut slope: f64 = resid
            .iter()
            .zip(&a)
            .map(|(&r, &ai)| {
                if r > zero_tol {
                    -tau * ai
                } else if r < -zero_tol {
                    (1.0 - tau) * ai
                } else {
                    ((1.0 - tau) * ai).max(-tau * ai)
                }
            })
            .sum();
        let mut breaks: Vec<(f64, usize)> = resid
            .iter()
            .zip(&a)
            .enumerate()
            .filter(|(_, (r, ai))| r.abs() > zero_tol && ai.abs() > 1e-14)
            .map(|(i, (r, ai))| (r / ai, i))
            .filter(|(t, _)| *t > 0.0)
            .collect();
        breaks.sort_by(|u, v| u.0.total_cmp(&v.0).then(u.1.cmp(&v.1)));
        let mut entering = None;
        for &(_, i) in &breaks {
            slope += a[i].abs();
            if slope >= -1e-12 * scale {
                entering = Some(i);
                break;
            }
        }
        let Some(entering) = entering else {
            return Err(Error::Estimation("check loss is unbounded along an edge".into()));
        };
        basis[leaving] = entering;
        iterations += 1;
    }

    let (beta, loss) = best.expect("at least one vertex evaluated");
    Ok(QuantRegFit {
        beta,
        loss,
        iterations,
        converged,
    })
}
