//! Confidence regions by test inversion.
//!
//! A candidate effect `θ` shifts each treated cell's fitted quantile,
//! `1{Y ≤ μ̂ + θ_m}`, and is kept when the shifted statistic stays within
//! `t(α) + δ`. The regions are the usual inverted-test sets and inherit the
//! test's guarantee only for candidates that satisfy the null.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{FitResult, PreparedGroup};
use crate::moments_test::{prepare_test, TestConfig};
use crate::optim::lex_cmp;
use crate::panel::{CrossSection, GroupIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CRMode {
    /// One treated cell, scalar shift.
    Scalar,
    /// One shift per treated cell.
    Joint,
}

impl FromStr for CRMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "joint" => Ok(Self::Joint),
            _ => Err(Error::Config(format!("unknown region mode {s:?} (scalar, joint)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Every piece of the step function, represented by its left breakpoint.
    Auto,
    /// `lo, lo + step, ...` up to `hi`, per dimension.
    Range { lo: f64, hi: f64, step: f64 },
    /// Explicit candidates, each with one coordinate per treated cell.
    Points(Vec<Vec<f64>>),
}

impl Grid {
    pub fn range_points(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite() && step > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("grid {lo}:{hi}:{step} needs finite lo <= hi and step > 0")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| lo + i as f64 * step).collect())
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad grid value {x:?}")));
        match parts.as_slice() {
            [lo, hi, step] => {
                let g = Self::Range { lo: num(lo)?, hi: num(hi)?, step: num(step)? };
                if let Self::Range { lo, hi, step } = g {
                    Self::range_points(lo, hi, step)?;
                }
                Ok(g)
            }
            _ => Err(Error::Config(format!("grid {s:?} is neither 'auto' nor lo:hi:step"))),
        }
    }
}

pub const DEFAULT_GRID_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CRQuery {
    pub mode: CRMode,
    pub grid: Grid,
    pub config: TestConfig,
    pub cap: usize,
}

impl CRQuery {
    pub fn new(mode: CRMode, grid: Grid, config: TestConfig) -> Self {
        Self { mode, grid, config, cap: DEFAULT_GRID_CAP }
    }
}

/// `[lo, hi)` or `[lo, hi]`; `None` means unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub hi_closed: bool,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo.is_none_or(|lo| x >= lo)
            && self.hi.is_none_or(|hi| if self.hi_closed { x <= hi } else { x < hi })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.lo {
            Some(lo) => write!(f, "[{lo}, ")?,
            None => write!(f, "(-inf, ")?,
        }
        match self.hi {
            Some(hi) if self.hi_closed => write!(f, "{hi}]"),
            Some(hi) => write!(f, "{hi})"),
            None => write!(f, "inf)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedCandidate {
    pub theta: Vec<f64>,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CRResult {
    pub mode: CRMode,
    pub alpha: f64,
    /// `t(α)`; a candidate is kept when its statistic is at most `t(α) + δ(1 + statistic)`.
    pub critical_value: f64,
    pub delta: f64,
    pub candidates: usize,
    /// Sorted lexicographically.
    pub accepted: Vec<AcceptedCandidate>,
    pub interval_form: Option<Interval>,
    /// The treated cell is empty, so every candidate is accepted.
    pub degenerate: bool,
}

fn accepts(statistic: f64, crit: f64, delta: f64) -> bool {
    statistic <= crit + delta * (1.0 + statistic.abs())
}

struct Cell {
    group: PreparedGroup,
    residuals: Vec<f64>,
}

fn treated_cells(query: &CRQuery, data: &CrossSection, index: &GroupIndex, fit: &FitResult) -> Result<Vec<Cell>> {
    let h = &fit.h_hat;
    query
        .config
        .treated
        .iter()
        .zip(&query.config.bases[1..])
        .map(|(key, basis)| {
            let group = PreparedGroup::new(data, index.members(key), &h.sieve, basis)?;
            let residuals = group.residuals(&h.theta, &h.pi);
            Ok(Cell { group, residuals })
        })
        .collect()
}

fn breakpoints(residuals: &[f64]) -> Vec<f64> {
    let mut r = residuals.to_vec();
    r.sort_by(f64::total_cmp);
    r.dedup();
    r
}

/// Region for a scalar shift of a single treated cell with constant instruments.
pub fn invert_scalar(query: &CRQuery, data: &CrossSection, index: &GroupIndex, fit: &FitResult) -> Result<CRResult> {
    let config = &query.config;
    if config.treated.len() != 1 || !config.bases[1].is_constant() || config.include_control_moment {
        return Err(Error::Config(
            "scalar regions need one treated cell, constant instruments and no control moment; use joint mode".into(),
        ));
    }
    let cells = treated_cells(query, data, index, fit)?;
    let cell = &cells[0];
    let tau = config.tau;
    let mut scalar_config = config.clone();
    scalar_config.exact_when_eligible = true;

    let base = CRResult {
        mode: CRMode::Scalar,
        alpha: config.alpha,
        critical_value: 0.0,
        delta: config.delta_correction,
        candidates: 0,
        accepted: Vec::new(),
        interval_form: None,
        degenerate: false,
    };

    if cell.group.len() == 0 {
        let points = match &query.grid {
            Grid::Auto => Vec::new(),
            Grid::Range { lo, hi, step } => Grid::range_points(*lo, *hi, *step)?,
            Grid::Points(p) => scalar_points(p)?,
        };
        let interval_form = match query.grid {
            Grid::Auto => Some(Interval { lo: None, hi: None, hi_closed: false }),
            _ => contiguous(&points, &points),
        };
        return Ok(CRResult {
            candidates: points.len(),
            accepted: points.into_iter().map(|s| AcceptedCandidate { theta: vec![s], statistic: 0.0 }).collect(),
            interval_form,
            degenerate: true,
            ..base
        });
    }

    let prepared = prepare_test(&scalar_config, data, index, fit)?;
    let crit = prepared.decide(config.alpha, None)?.critical_value;
    let aggregator = prepared.aggregator.clone();
    let stat_at = |shift: f64| aggregator.apply(&[cell.group.moment_at(&cell.residuals, tau, shift)]);
    let delta = config.delta_correction;

    match &query.grid {
        Grid::Auto => {
            let cuts = breakpoints(&cell.residuals);
            // Piece 0 is (-inf, cuts[0]); piece j is [cuts[j-1], cuts[j]).
            let mut accepted = Vec::new();
            let mut first: Option<usize> = None;
            let mut last: Option<usize> = None;
            let mut gaps = false;
            for j in 0..=cuts.len() {
                let shift = if j == 0 { f64::NEG_INFINITY } else { cuts[j - 1] };
                let s = stat_at(shift);
                if accepts(s, crit, delta) {
                    if last.is_some_and(|l| l + 1 != j) {
                        gaps = true;
                    }
                    first.get_or_insert(j);
                    last = Some(j);
                    if j > 0 {
                        accepted.push(AcceptedCandidate { theta: vec![shift], statistic: s });
                    }
                }
            }
            let interval_form = match (first, last, gaps) {
                (Some(a), Some(b), false) => Some(Interval {
                    lo: (a > 0).then(|| cuts[a - 1]),
                    hi: cuts.get(b).copied(),
                    hi_closed: false,
                }),
                _ => None,
            };
            Ok(CRResult {
                critical_value: crit,
                candidates: cuts.len() + 1,
                accepted,
                interval_form,
                ..base
            })
        }
        grid => {
            let points = match grid {
                Grid::Range { lo, hi, step } => Grid::range_points(*lo, *hi, *step)?,
                Grid::Points(p) => scalar_points(p)?,
                Grid::Auto => unreachable!(),
            };
            if points.len() > query.cap {
                return Err(cap_error(points.len(), query.cap));
            }
            let stats: Vec<f64> = points.par_iter().map(|&s| stat_at(s)).collect();
            let mut accepted: Vec<AcceptedCandidate> = points
                .iter()
                .zip(&stats)
                .filter(|(_, s)| accepts(**s, crit, delta))
                .map(|(p, s)| AcceptedCandidate { theta: vec![*p], statistic: *s })
                .collect();
            accepted.sort_by(|a, b| lex_cmp(&a.theta, &b.theta));
            let kept: Vec<f64> = accepted.iter().map(|a| a.theta[0]).collect();
            Ok(CRResult {
                critical_value: crit,
                candidates: points.len(),
                interval_form: contiguous(&points, &kept),
                accepted,
                ..base
            })
        }
    }
}

fn scalar_points(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    p.iter()
        .map(|v| match v.as_slice() {
            [x] if x.is_finite() => Ok(*x),
            _ => Err(Error::Config("scalar grid points need exactly one finite coordinate".into())),
        })
        .collect()
}

/// `[min, max]` of `kept` when it is an unbroken run of the sorted grid.
fn contiguous(grid: &[f64], kept: &[f64]) -> Option<Interval> {
    if kept.is_empty() {
        return None;
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let lo = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let inside = sorted.iter().filter(|x| **x >= lo && **x <= hi).count();
    let mut distinct = kept.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    (inside == distinct.len()).then_some(Interval { lo: Some(lo), hi: Some(hi), hi_closed: true })
}

fn cap_error(size: usize, cap: usize) -> Error {
    Error::Resource(format!("grid has {size} candidates, above the cap of {cap}; use a coarser grid"))
}

/// Candidate grid for joint regions.
fn joint_candidates(query: &CRQuery, cells: &[Cell]) -> Result<Vec<Vec<f64>>> {
    let m = cells.len();
    let axes: Vec<Vec<f64>> = match &query.grid {
        Grid::Points(p) => {
            if p.iter().any(|v| v.len() != m || v.iter().any(|x| !x.is_finite())) {
                return Err(Error::Config(format!("joint grid points need {m} finite coordinates")));
            }
            if p.len() > query.cap {
                return Err(cap_error(p.len(), query.cap));
            }
            return Ok(p.clone());
        }
        Grid::Range { lo, hi, step } => vec![Grid::range_points(*lo, *hi, *step)?; m],
        Grid::Auto => cells
            .iter()
            .map(|c| {
                let cuts = breakpoints(&c.residuals);
                match cuts.first() {
                    Some(&lo) => std::iter::once(lo - 1.0).chain(cuts).collect(),
                    None => vec![0.0],
                }
            })
            .collect(),
    };
    let size = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len()));
    match size {
        Some(s) if s <= query.cap => {}
        Some(s) => return Err(cap_error(s, query.cap)),
        None => return Err(cap_error(usize::MAX, query.cap)),
    }
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(m)];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&x| {
                    let mut v = prefix.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    Ok(out)
}

/// Region for one shift per treated cell, evaluated on a finite grid.
pub fn invert_joint(query: &CRQuery, data: &CrossSection, index: &GroupIndex, fit: &FitResult) -> Result<CRResult> {
    let config = &query.config;
    let prepared = prepare_test(config, data, index, fit)?;
    let cells = treated_cells(query, data, index, fit)?;
    let candidates = joint_candidates(query, &cells)?;
    let (at_zero, _) = prepared.run(config.alpha)?;
    let crit = at_zero.critical_value;
    let control = config
        .include_control_moment
        .then(|| prepared.per_group_moments[0].values.clone());
    let aggregator = &prepared.aggregator;

    let stats: Vec<f64> = candidates
        .par_iter()
        .map(|theta| {
            let mut blocks = Vec::with_capacity(cells.len() + 1);
            blocks.extend(control.iter().cloned());
            for (cell, &shift) in cells.iter().zip(theta) {
                blocks.push(cell.group.moment_at(&cell.residuals, config.tau, shift));
            }
            aggregator.apply(&blocks)
        })
        .collect();
    let mut accepted: Vec<AcceptedCandidate> = candidates
        .iter()
        .zip(&stats)
        .filter(|(_, s)| accepts(**s, crit, config.delta_correction))
        .map(|(t, s)| AcceptedCandidate { theta: t.clone(), statistic: *s })
        .collect();
    accepted.sort_by(|a, b| lex_cmp(&a.theta, &b.theta));
    let interval_form = if cells.len() == 1 && !matches!(query.grid, Grid::Auto) {
        let grid: Vec<f64> = candidates.iter().map(|c| c[0]).collect();
        let kept: Vec<f64> = accepted.iter().map(|a| a.theta[0]).collect();
        contiguous(&grid, &kept)
    } else {
        None
    };
    Ok(CRResult {
        mode: CRMode::Joint,
        alpha: config.alpha,
        critical_value: crit,
        delta: config.delta_correction,
        candidates: candidates.len(),
        accepted,
        interval_form,
        degenerate: false,
    })
}

pub fn invert(query: &CRQuery, data: &CrossSection, index: &GroupIndex, fit: &FitResult) -> Result<CRResult> {
    match query.mode {
        CRMode::Scalar => invert_scalar(query, data, index, fit),
        CRMode::Joint => invert_joint(query, data, index, fit),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisSpec, SieveSpec};
    use crate::estimator::{fit_control, moment_shifted};
    use crate::optim::OptimizerConfig;
    use crate::panel::{GroupKey, TreatmentProfile};
    use proptest::prelude::*;

    fn key(p: &str) -> GroupKey {
        GroupKey::new(p.parse::<TreatmentProfile>().unwrap())
    }

    fn setup(control: &[f64], treated: &[&[f64]]) -> (CrossSection, GroupIndex, FitResult, Vec<GroupKey>) {
        let labels = ["10", "01", "11"];
        let mut y = control.to_vec();
        let mut keys: Vec<GroupKey> = control.iter().map(|_| key("00")).collect();
        for (g, t) in treated.iter().enumerate() {
            y.extend_from_slice(t);
            keys.extend(t.iter().map(|_| key(labels[g])));
        }
        let cs = CrossSection::from_outcomes(y);
        let idx = GroupIndex::from_keys(keys);
        let fit = fit_control(&cs, &idx, &key("00"), &SieveSpec::intercept_only(-100.0, 100.0), &BasisSpec::constant(), 0.5, &OptimizerConfig::default()).unwrap();
        let treated_keys = (0..treated.len()).map(|g| key(labels[g])).collect();
        (cs, idx, fit, treated_keys)
    }

    fn config(treated: Vec<GroupKey>, alpha: f64) -> TestConfig {
        TestConfig::new(0.5, alpha, key("00"), treated, BasisSpec::constant())
    }

    #[test]
    fn scalar_region_from_breakpoints() {
        // control median 0: residuals of the treated cell are the outcomes themselves
        let control = [-1.0, 0.0, 1.0, 2.0];
        let treated: Vec<f64> = (0..10).map(f64::from).collect();
        let (cs, idx, fit, keys) = setup(&control, &[&treated]);
        assert_eq!(fit.h_hat.intercept(), 0.0);
        let q = CRQuery::new(CRMode::Scalar, Grid::Auto, config(keys, 0.05));
        let r = invert_scalar(&q, &cs, &idx, &fit).unwrap();
        assert!((r.critical_value - 0.09).abs() < 1e-12);
        // counts 2..=8 of 10 residuals at or below the shift: [r_(2), r_(9))
        assert_eq!(r.interval_form, Some(Interval { lo: Some(1.0), hi: Some(8.0), hi_closed: false }));
        let kept: Vec<f64> = r.accepted.iter().map(|a| a.theta[0]).collect();
        assert_eq!(kept, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn wide_band_accepts_everything() {
        let (cs, idx, fit, keys) = setup(&[-1.0, 0.0, 1.0], &[&[0.5, 2.0, 3.0]]);
        let q = CRQuery::new(CRMode::Scalar, Grid::Range { lo: -5.0, hi: 5.0, step: 0.5 }, config(keys, 0.05));
        let r = invert_scalar(&q, &cs, &idx, &fit).unwrap();
        assert_eq!(r.accepted.len(), r.candidates);
        assert_eq!(r.interval_form, Some(Interval { lo: Some(-5.0), hi: Some(5.0), hi_closed: true }));
    }

    #[test]
    fn empty_treated_cell_is_degenerate() {
        let (cs, idx, fit, _) = setup(&[-1.0, 0.0, 1.0], &[]);
        let q = CRQuery::new(CRMode::Scalar, Grid::Range { lo: 0.0, hi: 1.0, step: 0.25 }, config(vec![key("10")], 0.05));
        let r = invert_scalar(&q, &cs, &idx, &fit).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.accepted.len(), 5);
    }

    #[test]
    fn joint_with_one_cell_matches_scalar() {
        let treated: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let (cs, idx, fit, keys) = setup(&[-1.0, 0.0, 1.0, 2.0], &[&treated]);
        let grid = Grid::Range { lo: -4.0, hi: 4.0, step: 0.01 };
        let s = invert_scalar(&CRQuery::new(CRMode::Scalar, grid.clone(), config(keys.clone(), 0.1)), &cs, &idx, &fit).unwrap();
        let j = invert_joint(&CRQuery::new(CRMode::Joint, grid, config(keys, 0.1)), &cs, &idx, &fit).unwrap();
        assert_eq!(s.accepted, j.accepted);
        assert_eq!(s.critical_value, j.critical_value);
    }

    #[test]
    fn joint_region_recomputes_and_caps() {
        let a: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let b: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 + 2.0).collect();
        let (cs, idx, fit, keys) = setup(&[-2.0, -1.0, 0.0, 1.0, 2.0], &[&a, &b]);
        let mut cfg = config(keys.clone(), 0.1);
        cfg.null_draws = 2000;
        let q = CRQuery::new(CRMode::Joint, Grid::Auto, cfg.clone());
        let r = invert_joint(&q, &cs, &idx, &fit).unwrap();
        assert_eq!(r.candidates, 8 * 9);
        assert!(!r.accepted.is_empty());
        for acc in &r.accepted {
            let stat: f64 = keys
                .iter()
                .zip(&acc.theta)
                .map(|(k, &s)| moment_shifted(&cs, &idx, k, &fit.h_hat, &BasisSpec::constant(), 0.5, s).unwrap().sq_norm())
                .sum();
            assert_eq!(stat, acc.statistic);
            assert!(stat <= r.critical_value + r.delta * (1.0 + stat));
        }
        let mut capped = q.clone();
        capped.cap = 10;
        assert!(matches!(invert_joint(&capped, &cs, &idx, &fit), Err(Error::Resource(_))));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!("auto".parse::<Grid>().unwrap(), Grid::Auto);
        assert_eq!("-1:1:0.5".parse::<Grid>().unwrap(), Grid::Range { lo: -1.0, hi: 1.0, step: 0.5 });
        assert!("1:0:0.5".parse::<Grid>().is_err());
        assert!("0:1:0".parse::<Grid>().is_err());
        assert_eq!(Grid::range_points(0.0, 1.0, 0.25).unwrap().len(), 5);
    }

    proptest! {
        #[test]
        fn sweep_matches_dense_grid(t in prop::collection::vec(-3.0f64..3.0, 1..15), alpha in 0.01f64..0.6) {
            let (cs, idx, fit, keys) = setup(&[-1.0, 0.0, 1.0], &[&t]);
            let auto = invert_scalar(&CRQuery::new(CRMode::Scalar, Grid::Auto, config(keys.clone(), alpha)), &cs, &idx, &fit).unwrap();
            let (lo, hi) = (-5.0, 5.0);
            let dense = invert_scalar(&CRQuery::new(CRMode::Scalar, Grid::Range { lo, hi, step: 1e-3 * (hi - lo) }, config(keys, alpha)), &cs, &idx, &fit).unwrap();
            let interval = auto.interval_form;
            for p in Grid::range_points(lo, hi, 1e-2).unwrap() {
                let in_dense = dense.accepted.iter().any(|a| a.theta[0] == p);
                let in_auto = interval.is_some_and(|i| i.contains(p));
                prop_assert_eq!(in_dense, in_auto, "at {}", p);
            }
        }

        #[test]
        fn regions_shrink_as_alpha_grows(t in prop::collection::vec(-3.0f64..3.0, 2..10), a1 in 0.01f64..0.5, a2 in 0.01f64..0.5) {
            let (cs, idx, fit, keys) = setup(&[-1.0, 0.0, 1.0], &[&t, &[0.3, -0.2]]);
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let run = |alpha| {
                let mut c = config(keys.clone(), alpha);
                c.null_draws = 200;
                c.seed = 8;
                invert_joint(&CRQuery::new(CRMode::Joint, Grid::Range { lo: -3.0, hi: 3.0, step: 0.5 }, c), &cs, &idx, &fit).unwrap()
            };
            let wide = run(lo);
            let narrow = run(hi);
            for a in &narrow.accepted {
                prop_assert!(wide.accepted.iter().any(|w| w.theta == a.theta));
            }
        }
    }
}
