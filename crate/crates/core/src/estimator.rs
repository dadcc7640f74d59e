//! Indicator moments, the quadratic criterion, and control-group fits.
//!
//! For a cell `g` and candidate `h`,
//! `m_K(g, h) = |g|⁻¹ Σ_{i∈g} (1{Y_i ≤ h(Y_i^{t-1})} − τ) Φ_K(Y_i^{t-1})`
//! (zero for an empty cell) and the criterion is `m_K'm_K`. The control
//! estimate minimizes the criterion over a compact sieve.

use serde::{Deserialize, Serialize};

use crate::basis::{slope_value, BasisSpec, CoefBox, HypothesisFunction, SieveSpec};
use crate::error::{Error, Result};
use crate::optim::{self, OptimizerConfig};
use crate::panel::{CrossSection, GroupIndex, GroupKey};
use crate::quantreg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub values: Vec<f64>,
    pub group: GroupKey,
    pub count: usize,
}

impl MomentVector {
    pub fn sq_norm(&self) -> f64 {
        sq_norm(&self.values)
    }
}

pub(crate) fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("quantile level {tau} must lie in (0, 1)")))
    }
}

/// Members of one cell with everything a moment evaluation needs precomputed.
#[derive(Debug, Clone)]
pub(crate) struct PreparedGroup {
    pub outcomes: Vec<f64>,
    pub lags: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub dim: usize,
}

impl PreparedGroup {
    pub fn new(data: &CrossSection, members: &[usize], sieve: &SieveSpec, basis: &BasisSpec) -> Result<Self> {
        basis.validate()?;
        let p = sieve.n_lags();
        let mut out = Self {
            outcomes: Vec::with_capacity(members.len()),
            lags: Vec::with_capacity(members.len()),
            phi: Vec::with_capacity(members.len()),
            psi: Vec::with_capacity(members.len()),
            dim: basis.dim(),
        };
        for &i in members {
            let hist = &data.histories[i];
            if hist.len() < sieve.history_needed() {
                return Err(Error::Range(format!(
                    "unit at position {i} has {} lagged outcomes, the sieve needs {}",
                    hist.len(),
                    sieve.history_needed()
                )));
            }
            out.outcomes.push(data.outcomes[i]);
            out.lags.push(hist[..p].to_vec());
            out.phi.push(basis.eval(data.instrument_history(i))?);
            out.psi.push(match &sieve.functional {
                Some(f) => f.basis.eval(hist)?,
                None => Vec::new(),
            });
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    /// Residuals `(y - slope part) - b`.
    pub fn residuals(&self, theta: &[f64], pi: &[f64]) -> Vec<f64> {
        self.outcomes
            .iter()
            .zip(&self.lags)
            .zip(&self.psi)
            .map(|((&y, lags), psi)| (y - slope_value(&theta[1..], lags, pi, psi)) - theta[0])
            .collect()
    }

    /// Moment with each indicator read as `residual <= shift`.
    pub fn moment(&self, theta: &[f64], pi: &[f64], tau: f64, shift: f64) -> Vec<f64> {
        self.moment_at(&self.residuals(theta, pi), tau, shift)
    }

    /// As [`Self::moment`] with residuals already computed.
    pub fn moment_at(&self, residuals: &[f64], tau: f64, shift: f64) -> Vec<f64> {
        let mut values = vec![0.0; self.dim];
        if self.outcomes.is_empty() {
            return values;
        }
        for (&r, phi) in residuals.iter().zip(&self.phi) {
            let w = if r <= shift { 1.0 - tau } else { -tau };
            for (v, f) in values.iter_mut().zip(phi) {
                *v += w * f;
            }
        }
        let n = self.outcomes.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        values
    }
}

/// Centered indicator moment of `group` at `h`.
pub fn moment(
    data: &CrossSection,
    index: &GroupIndex,
    group: &GroupKey,
    h: &HypothesisFunction,
    basis: &BasisSpec,
    tau: f64,
) -> Result<MomentVector> {
    moment_shifted(data, index, group, h, basis, tau, 0.0)
}

/// Moment of `group` at `h + shift`.
pub fn moment_shifted(
    data: &CrossSection,
    index: &GroupIndex,
    group: &GroupKey,
    h: &HypothesisFunction,
    basis: &BasisSpec,
    tau: f64,
    shift: f64,
) -> Result<MomentVector> {
    check_tau(tau)?;
    let members = index.members(group);
    let prepared = PreparedGroup::new(data, members, &h.sieve, basis)?;
    Ok(MomentVector {
        values: prepared.moment(&h.theta, &h.pi, tau, shift),
        group: group.clone(),
        count: members.len(),
    })
}

/// `m_K' m_K`.
pub fn criterion(
    data: &CrossSection,
    index: &GroupIndex,
    group: &GroupKey,
    h: &HypothesisFunction,
    basis: &BasisSpec,
    tau: f64,
) -> Result<f64> {
    Ok(moment(data, index, group, h, basis, tau)?.sq_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Exact scan of the piecewise-constant criterion in the intercept.
    BreakpointSweep,
    /// Multi-start Nelder–Mead followed by an intercept sweep.
    NelderMead,
    /// Check-loss fit for the slopes, intercept sweep for the criterion.
    QuantileRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub method: FitMethod,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    /// Intercepts in `[lo, hi)` attain the same criterion at the fitted slopes.
    pub argmin_interval: Option<(f64, f64)>,
    /// Minimizer is not unique (criterion flat on `argmin_interval` or ties).
    pub non_unique: bool,
    /// Check loss at the slope fit, for quantile-regression fits.
    pub pinball_loss: Option<f64>,
    /// Criterion reached by the independent Nelder–Mead route.
    pub cross_check_criterion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub h_hat: HypothesisFunction,
    pub criterion_value: f64,
    pub group: GroupKey,
    pub tau: f64,
    pub basis: BasisSpec,
    pub trace: OptimizerTrace,
}

impl FitResult {
    /// Recomputes the criterion at `h_hat` on the fitted cell.
    pub fn recompute(&self, data: &CrossSection, index: &GroupIndex) -> Result<f64> {
        criterion(data, index, &self.group, &self.h_hat, &self.basis, self.tau)
    }
}

struct Sweep {
    intercept: f64,
    value: f64,
    interval: (f64, f64),
    ties: usize,
    /// Left endpoint and criterion of every piece, ascending.
    pieces: Vec<(f64, f64)>,
    upper: f64,
}

impl Sweep {
    fn tolerance(&self) -> f64 {
        1e-12 * (1.0 + self.value)
    }

    /// The piece containing `b`, if `b` lies in the box.
    fn piece_of(&self, b: f64) -> Option<(f64, (f64, f64))> {
        let j = self.pieces.iter().rposition(|p| p.0 <= b)?;
        let hi = self.pieces.get(j + 1).map_or(self.upper, |p| p.0);
        (b <= self.upper).then_some((self.pieces[j].1, (self.pieces[j].0, hi)))
    }
}

/// Exact minimization over the intercept with the other coefficients held fixed.
///
/// The criterion is constant on `[r_(j), r_(j+1))`, so every piece is
/// represented by its left endpoint (or the box's lower bound). Among
/// minimal pieces the smallest intercept wins.
fn sweep_intercept(group: &PreparedGroup, slopes_and_pi: (&[f64], &[f64]), bounds: CoefBox, tau: f64) -> Sweep {
    let (slopes, pi) = slopes_and_pi;
    let mut theta = vec![0.0];
    theta.extend_from_slice(slopes);
    let base = group.residuals(&theta, pi);
    let n = group.len() as f64;

    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|&a, &b| base[a].total_cmp(&base[b]));

    // Running Σ (1{r_i <= b} - τ) φ_i, starting at b = lo.
    let mut sums = vec![0.0; group.dim];
    let mut next = 0;
    for (i, phi) in group.phi.iter().enumerate() {
        let w = if base[i] <= bounds.lo { 1.0 - tau } else { -tau };
        for (s, f) in sums.iter_mut().zip(phi) {
            *s += w * f;
        }
    }
    while next < order.len() && base[order[next]] <= bounds.lo {
        next += 1;
    }
    let value_of = |sums: &[f64]| sums.iter().map(|s| (s / n) * (s / n)).sum::<f64>();

    let mut candidates: Vec<(f64, f64)> = vec![(bounds.lo, value_of(&sums))];
    while next < order.len() && base[order[next]] <= bounds.hi {
        let b = base[order[next]];
        while next < order.len() && base[order[next]] == b {
            for (s, f) in sums.iter_mut().zip(&group.phi[order[next]]) {
                *s += f;
            }
            next += 1;
        }
        candidates.push((b, value_of(&sums)));
    }
    let min = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + min);
    let ties: Vec<usize> = (0..candidates.len()).filter(|&j| candidates[j].1 <= min + tol).collect();
    let j = ties[0];
    let hi = candidates.get(j + 1).map_or(bounds.hi, |c| c.0);
    Sweep {
        intercept: candidates[j].0,
        value: candidates[j].1,
        interval: (candidates[j].0, hi),
        ties: ties.len(),
        upper: bounds.hi,
        pieces: candidates,
    }
}

fn finish(
    data: &CrossSection,
    index: &GroupIndex,
    control_key: &GroupKey,
    h_hat: HypothesisFunction,
    basis: &BasisSpec,
    tau: f64,
    trace: OptimizerTrace,
) -> Result<FitResult> {
    let criterion_value = criterion(data, index, control_key, &h_hat, basis, tau)?;
    Ok(FitResult {
        h_hat,
        criterion_value,
        group: control_key.clone(),
        tau,
        basis: basis.clone(),
        trace,
    })
}

/// Minimizes the criterion of the control cell over the sieve.
pub fn fit_control(
    data: &CrossSection,
    index: &GroupIndex,
    control_key: &GroupKey,
    sieve: &SieveSpec,
    basis: &BasisSpec,
    tau: f64,
    opt: &OptimizerConfig,
) -> Result<FitResult> {
    check_tau(tau)?;
    sieve.validate()?;
    let members = index.members(control_key);
    if members.is_empty() {
        return Err(Error::Estimation(format!("control cell {control_key} is empty")));
    }
    let group = PreparedGroup::new(data, members, sieve, basis)?;

    if sieve.is_intercept_only() {
        let s = sweep_intercept(&group, (&[], &[]), sieve.intercept, tau);
        let h_hat = HypothesisFunction::new(sieve.clone(), vec![s.intercept], Vec::new())?;
        let trace = OptimizerTrace {
            method: FitMethod::BreakpointSweep,
            iterations: group.len(),
            restarts: 1,
            converged: true,
            argmin_interval: Some(s.interval),
            non_unique: s.ties > 1 || s.interval.1 > s.interval.0,
            pinball_loss: None,
            cross_check_criterion: None,
        };
        return finish(data, index, control_key, h_hat, basis, tau, trace);
    }

    let (h_hat, trace) = nelder_mead_fit(&group, sieve, tau, opt)?;
    finish(data, index, control_key, h_hat, basis, tau, trace)
}

fn nelder_mead_fit(
    group: &PreparedGroup,
    sieve: &SieveSpec,
    tau: f64,
    opt: &OptimizerConfig,
) -> Result<(HypothesisFunction, OptimizerTrace)> {
    let p = sieve.parametric_dim();
    let boxes = sieve.boxes();
    let objective = |c: &[f64]| sq_norm(&group.moment(&c[..p], &c[p..], tau, 0.0));
    let ms = optim::multistart(&objective, &boxes, opt);

    // Polish: exact intercept scan at the best slopes never increases the criterion.
    let s = sweep_intercept(group, (&ms.x[1..p], &ms.x[p..]), sieve.intercept, tau);
    let mut x = ms.x.clone();
    let polished = s.value < ms.value;
    if polished {
        x[0] = s.intercept;
    }
    let h_hat = sieve.hypothesis(&x)?;
    let trace = OptimizerTrace {
        method: FitMethod::NelderMead,
        iterations: ms.iterations,
        restarts: ms.restarts,
        converged: ms.converged,
        argmin_interval: polished.then_some(s.interval),
        non_unique: true,
        pinball_loss: None,
        cross_check_criterion: None,
    };
    Ok((h_hat, trace))
}

/// Linear quantile fit `b + Σ_{s≤P} γ_s y_{t-s}` with constant instruments.
///
/// With `Φ ≡ 1` the criterion only sees how many control outcomes fall
/// below the fitted line, so it pins down the intercept but not the
/// slopes. Slopes come from the check-loss fit; the intercept is then
/// chosen by an exact sweep of the criterion. A multi-start Nelder–Mead
/// search over all coefficients is run as a cross-check on the attained
/// criterion.
pub fn fit_linear_quantile(
    data: &CrossSection,
    index: &GroupIndex,
    control_key: &GroupKey,
    lags: usize,
    tau: f64,
) -> Result<FitResult> {
    fit_linear_quantile_with(data, index, control_key, lags, tau, &OptimizerConfig::default())
}

pub fn fit_linear_quantile_with(
    data: &CrossSection,
    index: &GroupIndex,
    control_key: &GroupKey,
    lags: usize,
    tau: f64,
    opt: &OptimizerConfig,
) -> Result<FitResult> {
    check_tau(tau)?;
    let members = index.members(control_key);
    if members.is_empty() {
        return Err(Error::Estimation(format!("control cell {control_key} is empty")));
    }
    if members.len() <= lags + 1 {
        return Err(Error::Estimation(format!(
            "control cell has {} units, need more than {}",
            members.len(),
            lags + 1
        )));
    }
    let mut x = Vec::with_capacity(members.len());
    let mut y = Vec::with_capacity(members.len());
    for &i in members {
        let hist = &data.histories[i];
        if hist.len() < lags {
            return Err(Error::Range(format!("unit at position {i} lacks {lags} lagged outcomes")));
        }
        let mut row = vec![1.0];
        row.extend_from_slice(&hist[..lags]);
        x.push(row);
        y.push(data.outcomes[i]);
    }
    let qr = quantreg::fit_quantile_regression(&x, &y, tau)?;
    let slopes = qr.beta[1..].to_vec();

    // Boxes wide enough to contain the fit and every residual.
    let slope_bound = slopes.iter().fold(10.0f64, |m, g| m.max(2.0 * g.abs()));
    let lag_scale: f64 = x.iter().flat_map(|r| r[1..].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let y_lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = slope_bound * lag_scale * lags as f64 + (y_hi - y_lo) + 1.0;
    let sieve = SieveSpec {
        intercept: CoefBox::new(y_lo - pad, y_hi + pad),
        lag_boxes: vec![CoefBox::new(-slope_bound, slope_bound); lags],
        functional: None,
    };
    let basis = BasisSpec::constant();
    let group = PreparedGroup::new(data, members, &sieve, &basis)?;

    // Among intercepts attaining the minimal criterion, keep the check-loss one when it qualifies.
    let mut s = sweep_intercept(&group, (&slopes, &[]), sieve.intercept, tau);
    if let Some((value, interval)) = s.piece_of(qr.beta[0]) {
        if value <= s.value + s.tolerance() {
            s.intercept = qr.beta[0];
            s.interval = interval;
        }
    }
    let mut theta = vec![s.intercept];
    theta.extend_from_slice(&slopes);
    let h_hat = HypothesisFunction::new(sieve.clone(), theta, Vec::new())?;

    let cross_check = if lags == 0 {
        s.value
    } else {
        let (h_nm, _) = nelder_mead_fit(&group, &sieve, tau, opt)?;
        sq_norm(&group.moment(&h_nm.theta, &h_nm.pi, tau, 0.0))
    };
    let trace = OptimizerTrace {
        method: FitMethod::QuantileRegression,
        iterations: qr.iterations,
        restarts: 1,
        converged: qr.converged && s.value <= cross_check + 1e-6,
        argmin_interval: Some(s.interval),
        non_unique: s.ties > 1 || s.interval.1 > s.interval.0,
        pinball_loss: Some(qr.loss),
        cross_check_criterion: Some(cross_check),
    };
    finish(data, index, control_key, h_hat, &basis, tau, trace)
}
