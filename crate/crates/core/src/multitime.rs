//! Joint test over several calendar times.
//!
//! Each time `t_m` contributes the moment of one treated cell evaluated at
//! that time's control fit. Null draws use independent Bernoulli(τ_m)
//! variables per unit and time. Instruments at every time read the history
//! before the first tested time, `Y^{t_1 − 1}`; the law is exact only
//! when the outcome shocks are independent across the tested times given
//! that history, which the data cannot confirm.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, SieveSpec};
use crate::did::intercept_box_for;
use crate::error::{Error, Result};
use crate::estimator::{fit_control, FitResult, MomentVector, PreparedGroup};
use crate::moments_test::{Aggregator, AggregatorKind, NullBlock, NullSample, PreparedTest, TestResult, DEFAULT_DELTA, DEFAULT_NULL_DRAWS};
use crate::optim::OptimizerConfig;
use crate::panel::{group_units, CrossSection, GroupIndex, GroupKey, LagWindow, PanelDataset, TreatmentProfile};

fn default_basis() -> BasisSpec {
    BasisSpec::constant()
}

fn default_window() -> LagWindow {
    LagWindow::Full
}

fn default_aggregator() -> Aggregator {
    Aggregator::new(AggregatorKind::SumSqNorms)
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_draws() -> usize {
    DEFAULT_NULL_DRAWS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEntry {
    /// Time label as it appears in the data.
    pub time: i64,
    pub profile: TreatmentProfile,
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    pub tau: f64,
    #[serde(default = "default_basis")]
    pub basis: BasisSpec,
    #[serde(default = "default_window")]
    pub window: LagWindow,
    /// Control-fit sieve; intercept only when absent.
    #[serde(default)]
    pub sieve: Option<SieveSpec>,
}

impl TimeEntry {
    pub fn key(&self) -> GroupKey {
        match &self.covariates {
            Some(c) => GroupKey::with_covariates(self.profile.clone(), c.clone()),
            None => GroupKey::new(self.profile.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTimeConfig {
    pub entries: Vec<TimeEntry>,
    #[serde(default = "default_aggregator")]
    pub aggregator: Aggregator,
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub include_control_moment: bool,
    #[serde(default = "default_true")]
    pub exact_when_eligible: bool,
}

impl MultiTimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("multi-time test needs at least one time".into()));
        }
        if self.entries.windows(2).any(|w| w[0].time >= w[1].time) {
            return Err(Error::Config("times must be strictly increasing".into()));
        }
        for e in &self.entries {
            if !(e.tau > 0.0 && e.tau < 1.0) {
                return Err(Error::Config(format!("tau = {} at time {} must lie in (0, 1)", e.tau, e.time)));
            }
            if e.profile.is_control() {
                return Err(Error::Config(format!("profile at time {} is the control profile", e.time)));
            }
            e.basis.validate()?;
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if self.delta.is_nan() || self.delta <= 0.0 {
            return Err(Error::Config("delta correction must be positive".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("null draws must be positive".into()));
        }
        Ok(())
    }
}

/// Cross-section and cells for one tested time.
#[derive(Debug, Clone)]
pub struct TimeSlice {
    pub cross: CrossSection,
    pub index: GroupIndex,
    pub treated: GroupKey,
    pub control: GroupKey,
}

pub fn time_slices(config: &MultiTimeConfig, data: &PanelDataset) -> Result<Vec<TimeSlice>> {
    config.validate()?;
    let first = data.time_index(config.entries[0].time)?;
    config
        .entries
        .iter()
        .map(|e| {
            let t = data.time_index(e.time)?;
            let index = group_units(data, t, e.window, e.covariates.is_some())?;
            let treated = e.key();
            let expected = match e.window {
                LagWindow::Full => t,
                LagWindow::Lags(l) => l + 1,
            };
            if treated.profile.len() != expected {
                return Err(Error::Config(format!(
                    "profile {} at time {} has length {}, the window implies {expected}",
                    treated.profile,
                    e.time,
                    treated.profile.len()
                )));
            }
            Ok(TimeSlice {
                cross: data.cross_section_with_instruments(t, first)?,
                control: treated.control_of(),
                treated,
                index,
            })
        })
        .collect()
}

/// Control fit at every tested time.
pub fn fit_times(config: &MultiTimeConfig, slices: &[TimeSlice], opt: &OptimizerConfig) -> Result<Vec<FitResult>> {
    config
        .entries
        .iter()
        .zip(slices)
        .map(|(e, s)| {
            let sieve = match &e.sieve {
                Some(sv) => sv.clone(),
                None => {
                    let y: Vec<f64> = s.index.members(&s.control).iter().map(|&i| s.cross.outcomes[i]).collect();
                    intercept_box_for(&y)
                }
            };
            fit_control(&s.cross, &s.index, &s.control, &sieve, &e.basis, e.tau, opt)
        })
        .collect()
}

fn prepare(config: &MultiTimeConfig, slices: &[TimeSlice], fits: &[FitResult]) -> Result<PreparedTest> {
    if fits.len() != slices.len() {
        return Err(Error::Config(format!("{} fits for {} times", fits.len(), slices.len())));
    }
    let mut blocks = Vec::new();
    let mut observed = Vec::new();
    let mut moments = Vec::new();
    for ((e, s), fit) in config.entries.iter().zip(slices).zip(fits) {
        if fit.group != s.control || fit.tau != e.tau {
            return Err(Error::Config(format!("fit for time {} does not match its control cell or tau", e.time)));
        }
        let h = &fit.h_hat;
        for (key, is_control) in [(&s.control, true), (&s.treated, false)] {
            let members = s.index.members(key);
            let g = PreparedGroup::new(&s.cross, members, &h.sieve, &e.basis)?;
            let values = g.moment(&h.theta, &h.pi, e.tau, 0.0);
            moments.push(MomentVector { values: values.clone(), group: key.clone(), count: members.len() });
            if !is_control || config.include_control_moment {
                blocks.push(NullBlock::new(format!("{}@{}", key, e.time), e.tau, g.phi, &e.basis));
                observed.push(values);
            }
        }
    }
    PreparedTest::from_blocks(
        blocks,
        observed,
        &config.aggregator,
        moments,
        (config.delta, config.draws, config.seed, config.exact_when_eligible),
    )
}

/// Joint statistic over all tested times and its decision.
pub fn multi_time_test(config: &MultiTimeConfig, slices: &[TimeSlice], fits: &[FitResult]) -> Result<TestResult> {
    Ok(multi_time_test_with_null(config, slices, fits)?.0)
}

pub fn multi_time_test_with_null(
    config: &MultiTimeConfig,
    slices: &[TimeSlice],
    fits: &[FitResult],
) -> Result<(TestResult, Option<NullSample>)> {
    config.validate()?;
    prepare(config, slices, fits)?.run(config.alpha)
}

/// Simulated null law of the joint statistic.
pub fn simulate_multi_time_null(config: &MultiTimeConfig, slices: &[TimeSlice], fits: &[FitResult]) -> Result<NullSample> {
    config.validate()?;
    prepare(config, slices, fits)?.simulate()
}
