//! Instrument bases `Φ_K` and the sieve of candidate outcome functions.
//!
//! JSON layout of a basis:
//!
//! ```json
//! { "family": "polynomial", "K": 3, "lags": [1], "bounds": [[-5.0, 5.0]] }
//! ```
//!
//! `lags` are 1-based (`1` reads `y_{t-1}`). `bounds` are only used by
//! the spline family, whose `K / lags.len()` knots are spread evenly over
//! each coordinate's range. A `stacked` basis concatenates its `parts`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Constant,
    Polynomial,
    Spline,
    Stacked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub lags: Vec<usize>,
    #[serde(default)]
    pub bounds: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<BasisSpec>,
}

impl BasisSpec {
    pub fn constant() -> Self {
        Self {
            family: BasisFamily::Constant,
            k: 1,
            lags: Vec::new(),
            bounds: Vec::new(),
            parts: Vec::new(),
        }
    }

    /// `(1, y, y^2, ..., y^degree)` on a single lag.
    pub fn polynomial(lag: usize, degree: usize) -> Self {
        Self {
            family: BasisFamily::Polynomial,
            k: degree + 1,
            lags: vec![lag],
            bounds: Vec::new(),
            parts: Vec::new(),
        }
    }

    /// Piecewise-linear hat functions on `knots` evenly spaced knots over `[lo, hi]`.
    pub fn spline(lag: usize, knots: usize, lo: f64, hi: f64) -> Self {
        Self {
            family: BasisFamily::Spline,
            k: knots,
            lags: vec![lag],
            bounds: vec![(lo, hi)],
            parts: Vec::new(),
        }
    }

    pub fn stacked(parts: Vec<BasisSpec>) -> Self {
        let k = parts.iter().map(|p| p.k).sum();
        Self {
            family: BasisFamily::Stacked,
            k,
            lags: Vec::new(),
            bounds: Vec::new(),
            parts,
        }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn is_constant(&self) -> bool {
        self.family == BasisFamily::Constant
    }

    /// Longest lag any coordinate reads.
    pub fn max_lag(&self) -> usize {
        match self.family {
            BasisFamily::Stacked => self.parts.iter().map(Self::max_lag).max().unwrap_or(0),
            _ => self.lags.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self.family {
            BasisFamily::Constant => {
                if self.k != 1 {
                    return bad(format!("constant basis must have K = 1, got {}", self.k));
                }
            }
            BasisFamily::Polynomial => {
                let d = self.lags.len();
                if d == 0 || self.k < 2 || !(self.k - 1).is_multiple_of(d) {
                    return bad(format!(
                        "polynomial basis needs K = 1 + degree * lags with degree >= 1 (K = {}, {} lags)",
                        self.k, d
                    ));
                }
            }
            BasisFamily::Spline => {
                let d = self.lags.len();
                if d == 0 || self.bounds.len() != d || !self.k.is_multiple_of(d) || self.k / d < 2 {
                    return bad(format!(
                        "spline basis needs one (lo, hi) per lag and at least two knots per lag (K = {}, {} lags, {} bounds)",
                        self.k,
                        d,
                        self.bounds.len()
                    ));
                }
                if self.bounds.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
                    return bad("spline bounds must be finite with lo < hi".into());
                }
            }
            BasisFamily::Stacked => {
                if self.parts.is_empty() {
                    return bad("stacked basis needs at least one part".into());
                }
                for p in &self.parts {
                    p.validate()?;
                }
                if self.k != self.parts.iter().map(|p| p.k).sum::<usize>() {
                    return bad("stacked basis K must equal the sum of its parts".into());
                }
            }
        }
        if self.lags.contains(&0) {
            return bad("basis lags are 1-based".into());
        }
        Ok(())
    }

    /// Appends `Φ_K(y_hist)` to `out`. `y_hist` is most-recent-first.
    pub fn eval_into(&self, y_hist: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let coord = |lag: usize| -> Result<f64> {
            y_hist.get(lag - 1).copied().ok_or_else(|| {
                Error::Range(format!("basis reads lag {lag} but only {} are available", y_hist.len()))
            })
        };
        match self.family {
            BasisFamily::Constant => out.push(1.0),
            BasisFamily::Polynomial => {
                let degree = (self.k - 1) / self.lags.len();
                out.push(1.0);
                for &lag in &self.lags {
                    let y = coord(lag)?;
                    let mut power = 1.0;
                    for _ in 0..degree {
                        power *= y;
                        out.push(power);
                    }
                }
            }
            BasisFamily::Spline => {
                let knots = self.k / self.lags.len();
                for (&lag, &(lo, hi)) in self.lags.iter().zip(&self.bounds) {
                    let y = coord(lag)?.clamp(lo, hi);
                    let width = (hi - lo) / (knots - 1) as f64;
                    for j in 0..knots {
                        let knot = lo + width * j as f64;
                        out.push((1.0 - (y - knot).abs() / width).max(0.0));
                    }
                }
            }
            BasisFamily::Stacked => {
                for p in &self.parts {
                    p.eval_into(y_hist, out)?;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, y_hist: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.k);
        self.eval_into(y_hist, &mut out)?;
        Ok(out)
    }
}

/// Closed interval for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefBox {
    pub lo: f64,
    pub hi: f64,
}

impl CoefBox {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

/// Nonparametric term `Σ_l π_l ψ_l(y^{t-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalPart {
    pub basis: BasisSpec,
    pub boxes: Vec<CoefBox>,
}

/// Sieve `b + Σ_s γ_s y_{t-s} + Σ_l π_l ψ_l(y^{t-1})` with compact coefficient boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveSpec {
    pub intercept: CoefBox,
    #[serde(default)]
    pub lag_boxes: Vec<CoefBox>,
    #[serde(default)]
    pub functional: Option<FunctionalPart>,
}

impl SieveSpec {
    pub fn intercept_only(lo: f64, hi: f64) -> Self {
        Self {
            intercept: CoefBox::new(lo, hi),
            lag_boxes: Vec::new(),
            functional: None,
        }
    }

    pub fn n_lags(&self) -> usize {
        self.lag_boxes.len()
    }

    pub fn parametric_dim(&self) -> usize {
        1 + self.lag_boxes.len()
    }

    pub fn functional_dim(&self) -> usize {
        self.functional.as_ref().map_or(0, |f| f.basis.dim())
    }

    pub fn dim(&self) -> usize {
        self.parametric_dim() + self.functional_dim()
    }

    pub fn is_intercept_only(&self) -> bool {
        self.lag_boxes.is_empty() && self.functional.is_none()
    }

    /// All coefficient boxes in `(b, γ, π)` order.
    pub fn boxes(&self) -> Vec<CoefBox> {
        let mut out = vec![self.intercept];
        out.extend(&self.lag_boxes);
        if let Some(f) = &self.functional {
            out.extend(&f.boxes);
        }
        out
    }

    /// Number of lagged outcomes a hypothesis reads.
    pub fn history_needed(&self) -> usize {
        let f = self.functional.as_ref().map_or(0, |f| f.basis.max_lag());
        self.n_lags().max(f)
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.boxes() {
            if !(b.lo.is_finite() && b.hi.is_finite() && b.lo <= b.hi) {
                return Err(Error::Config(format!(
                    "coefficient box [{}, {}] must be finite and nonempty",
                    b.lo, b.hi
                )));
            }
        }
        if let Some(f) = &self.functional {
            f.basis.validate()?;
            if f.boxes.len() != f.basis.dim() {
                return Err(Error::Config(format!(
                    "functional part has {} boxes for a basis of dimension {}",
                    f.boxes.len(),
                    f.basis.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn hypothesis(&self, coefficients: &[f64]) -> Result<HypothesisFunction> {
        let p = self.parametric_dim();
        if coefficients.len() != self.dim() {
            return Err(Error::Config(format!(
                "expected {} coefficients, got {}",
                self.dim(),
                coefficients.len()
            )));
        }
        HypothesisFunction::new(self.clone(), coefficients[..p].to_vec(), coefficients[p..].to_vec())
    }
}

/// `Σ γ_s y_{t-s} + Σ π_l ψ_l`. Every evaluation of a sieve element goes
/// through here so that residuals agree bit for bit.
pub(crate) fn slope_value(slopes: &[f64], lags: &[f64], pi: &[f64], psi: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (g, y) in slopes.iter().zip(lags) {
        acc += g * y;
    }
    if !pi.is_empty() {
        acc += pi.iter().zip(psi).map(|(p, v)| p * v).sum::<f64>();
    }
    acc
}

/// One element of the sieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisFunction {
    pub sieve: SieveSpec,
    /// `(b, γ_1, ..., γ_P)`
    pub theta: Vec<f64>,
    /// Functional coefficients; empty without a functional part.
    pub pi: Vec<f64>,
}

impl HypothesisFunction {
    pub fn new(sieve: SieveSpec, theta: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        sieve.validate()?;
        if theta.len() != sieve.parametric_dim() || pi.len() != sieve.functional_dim() {
            return Err(Error::Config("coefficient vector has the wrong shape".into()));
        }
        for (x, b) in theta.iter().chain(&pi).zip(sieve.boxes()) {
            if !b.contains(*x) {
                return Err(Error::Config(format!(
                    "coefficient {x} lies outside its box [{}, {}]",
                    b.lo, b.hi
                )));
            }
        }
        Ok(Self { sieve, theta, pi })
    }

    pub fn intercept(&self) -> f64 {
        self.theta[0]
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.pi).copied().collect()
    }

    /// `h(y_hist) - b`: everything except the intercept.
    pub fn slope_part(&self, y_hist: &[f64]) -> Result<f64> {
        let p = self.theta.len() - 1;
        if y_hist.len() < p {
            return Err(Error::Range(format!(
                "hypothesis reads lag {p} but only {} are available",
                y_hist.len()
            )));
        }
        let psi = match &self.sieve.functional {
            Some(f) => f.basis.eval(y_hist)?,
            None => Vec::new(),
        };
        Ok(slope_value(&self.theta[1..], &y_hist[..p], &self.pi, &psi))
    }

    /// `b + Σ γ_s y_{t-s} + Σ π_l ψ_l(y^{t-1})`.
    pub fn eval(&self, y_hist: &[f64]) -> Result<f64> {
        Ok(self.intercept() + self.slope_part(y_hist)?)
    }

    /// `(y - slope_part) - b`. The indicator `1{y <= h}` is evaluated as
    /// `residual <= 0` everywhere so that breakpoint searches and moment
    /// evaluation agree exactly.
    pub fn residual(&self, y: f64, y_hist: &[f64]) -> Result<f64> {
        Ok((y - self.slope_part(y_hist)?) - self.intercept())
    }
}
