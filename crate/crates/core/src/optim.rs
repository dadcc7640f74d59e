//! Box-constrained Nelder–Mead with Latin-hypercube restarts.
//!
//! Trial points are projected onto the box. Restarts run in parallel and
//! are reduced deterministically: lowest value first, then the
//! lexicographically smallest point.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::CoefBox;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once the spread of simplex values falls to this level.
    pub xtol: f64,
    /// Initial simplex edge as a fraction of each box width.
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iter: 500,
            xtol: 1e-8,
            initial_step: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadRun {
    pub start: Vec<f64>,
    pub start_value: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStartResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub runs: Vec<NelderMeadRun>,
}

fn project(x: &mut [f64], boxes: &[CoefBox]) {
    for (v, b) in x.iter_mut().zip(boxes) {
        *v = b.clamp(*v);
    }
}

/// Lexicographic order on points; NaN never appears for projected finite inputs.
pub fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

fn better(a: (f64, &[f64]), b: (f64, &[f64])) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Greater) => false,
        _ => lex_cmp(a.1, b.1) == Ordering::Less,
    }
}

pub fn nelder_mead<F>(f: &F, start: &[f64], boxes: &[CoefBox], cfg: &OptimizerConfig) -> NelderMeadRun
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let n = start.len();
    let mut x0 = start.to_vec();
    project(&mut x0, boxes);
    let start_value = f(&x0);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.clone(), start_value));
    for j in 0..n {
        let mut p = x0.clone();
        let step = cfg.initial_step * boxes[j].width();
        p[j] = if p[j] + step <= boxes[j].hi { p[j] + step } else { p[j] - step };
        project(&mut p, boxes);
        let v = f(&p);
        simplex.push((p, v));
    }

    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| lex_cmp(&a.0, &b.0))
        })
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        order(&mut simplex);
        if n == 0 || simplex[n].1 - simplex[0].1 <= cfg.xtol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect();
            project(&mut p, boxes);
            p
        };

        let xr = along(1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let p = along(0.5);
                let v = f(&p);
                (p, v)
            } else {
                let p = along(-0.5);
                let v = f(&p);
                (p, v)
            };
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = best.iter().zip(&entry.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    project(&mut p, boxes);
                    entry.1 = f(&p);
                    entry.0 = p;
                }
            }
        }
    }
    order(&mut simplex);
    let (x, value) = simplex.swap_remove(0);
    NelderMeadRun {
        start: x0,
        start_value,
        x,
        value,
        iterations,
        converged,
    }
}

/// `count` stratified points in the box.
pub fn latin_hypercube<R: Rng>(boxes: &[CoefBox], count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; boxes.len()]; count];
    for (j, b) in boxes.iter().enumerate() {
        let mut strata: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            let k = rng.random_range(0..=i);
            strata.swap(i, k);
        }
        for (i, p) in points.iter_mut().enumerate() {
            let u: f64 = rng.random();
            p[j] = b.lo + b.width() * (strata[i] as f64 + u) / count as f64;
        }
    }
    points
}

/// Nelder–Mead from the box center and `restarts - 1` Latin-hypercube points.
pub fn multistart<F>(f: &F, boxes: &[CoefBox], cfg: &OptimizerConfig) -> MultiStartResult
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    let restarts = cfg.restarts.max(1);
    let mut starts = vec![boxes.iter().map(CoefBox::center).collect::<Vec<_>>()];
    let mut rng = rng::stream(cfg.seed, domain::OPTIMIZER, 0);
    starts.extend(latin_hypercube(boxes, restarts - 1, &mut rng));

    let runs: Vec<NelderMeadRun> = starts.par_iter().map(|s| nelder_mead(f, s, boxes, cfg)).collect();

    let mut best = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        if better((r.value, &r.x), (runs[best].value, &runs[best].x)) {
            best = i;
        }
    }
    MultiStartResult {
        x: runs[best].x.clone(),
        value: runs[best].value,
        iterations: runs.iter().map(|r| r.iterations).sum(),
        restarts,
        converged: runs[best].converged,
        runs,
    }
}
