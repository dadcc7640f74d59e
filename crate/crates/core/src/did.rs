//! Staggered adoption: first differences against the first period, cells
//! by first-treatment date, never-treated units as control.
//!
//! The test is valid when the τ-quantile of the differenced outcome is the
//! same in every cohort absent treatment, and when errors are exogenous to
//! the adoption date. Neither condition can be checked from the data.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, SieveSpec};
use crate::error::{Error, Result};
use crate::estimator::{fit_control, FitResult};
use crate::moments_test::{run_test, Aggregator, AggregatorKind, TestConfig, TestResult, DEFAULT_DELTA, DEFAULT_NULL_DRAWS};
use crate::optim::OptimizerConfig;
use crate::panel::{CrossSection, GroupIndex, GroupKey, PanelDataset, TreatmentProfile};

/// Panel with validated irreversible treatment.
#[derive(Debug, Clone)]
pub struct StaggeredPanel {
    data: PanelDataset,
    /// First-treatment time label per unit; `None` for never treated.
    cohorts: Vec<Option<i64>>,
}

impl StaggeredPanel {
    pub fn new(data: PanelDataset) -> Result<Self> {
        let mut reversals = Vec::new();
        let mut early = Vec::new();
        let mut cohorts = Vec::with_capacity(data.n_units());
        for unit in data.units() {
            let d: Vec<bool> = unit.observations.iter().map(|o| o.treatment).collect();
            if d.windows(2).any(|w| w[0] && !w[1]) {
                reversals.push(unit.id.clone());
            }
            if d.first() == Some(&true) {
                early.push(unit.id.clone());
            }
            cohorts.push(d.iter().position(|&x| x).map(|p| data.time_label(p + 1)));
        }
        if !reversals.is_empty() {
            return Err(Error::Adapter(format!("treatment switches off for units {}", reversals.join(", "))));
        }
        if !early.is_empty() {
            return Err(Error::Adapter(format!("units treated in the first period: {}", early.join(", "))));
        }
        Ok(Self { data, cohorts })
    }

    pub fn data(&self) -> &PanelDataset {
        &self.data
    }

    pub fn cohorts(&self) -> &[Option<i64>] {
        &self.cohorts
    }

    /// Cell of units first treated at `cohort` (`None` = never treated).
    ///
    /// The key is the unit's whole treatment path, which under
    /// irreversibility identifies the cohort and keeps not-yet-treated
    /// cohorts out of the control cell.
    pub fn cohort_key(&self, cohort: Option<i64>) -> Result<GroupKey> {
        let t_len = self.data.n_periods();
        let start = match cohort {
            None => t_len,
            Some(g) => self.data.time_index(g)? - 1,
        };
        Ok(GroupKey::new(TreatmentProfile::new((0..t_len).map(|p| p >= start).collect())?))
    }
}

/// Differenced cross-section at one period.
#[derive(Debug, Clone)]
pub struct DidCrossSection {
    /// `ΔY_i = Y_{i,t} − Y_{i,first}`; no lagged history.
    pub cross: CrossSection,
    pub index: GroupIndex,
    pub cohorts: Vec<Option<i64>>,
    pub control: GroupKey,
}

/// `ΔY` at time label `t` and cohort cells.
pub fn did_transform(panel: &StaggeredPanel, t: i64) -> Result<DidCrossSection> {
    let ti = panel.data.time_index(t)?;
    let outcomes = (0..panel.data.n_units())
        .map(|i| panel.data.observation(i, ti).outcome - panel.data.observation(i, 1).outcome)
        .collect();
    let keys = panel
        .cohorts
        .iter()
        .map(|&g| panel.cohort_key(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(DidCrossSection {
        cross: CrossSection::from_outcomes(outcomes),
        index: GroupIndex::from_keys(keys),
        cohorts: panel.cohorts.clone(),
        control: panel.cohort_key(None)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidOptions {
    pub aggregator: Aggregator,
    pub delta_correction: f64,
    pub null_draws: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for DidOptions {
    fn default() -> Self {
        Self {
            aggregator: Aggregator::new(AggregatorKind::SumSqNorms),
            delta_correction: DEFAULT_DELTA,
            null_draws: DEFAULT_NULL_DRAWS,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidOutcome {
    pub fit: FitResult,
    pub result: TestResult,
    pub cohorts: Vec<i64>,
    pub cohort_sizes: Vec<usize>,
    pub control_size: usize,
}

/// Intercept box wide enough that the sweep never clips the control cell.
pub fn intercept_box_for(values: &[f64]) -> SieveSpec {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let pad = (hi - lo) + 1.0;
    SieveSpec::intercept_only(lo - pad, hi + pad)
}

/// Tests `μ_t(g, τ) = μ_t(0, τ)` for every cohort in `cohorts` jointly.
pub fn did_test(panel: &StaggeredPanel, t: i64, cohorts: &[i64], tau: f64, alpha: f64, opts: &DidOptions) -> Result<DidOutcome> {
    if cohorts.is_empty() {
        return Err(Error::Config("no cohorts to test".into()));
    }
    let d = did_transform(panel, t)?;
    let control_members = d.index.members(&d.control);
    if control_members.is_empty() {
        return Err(Error::Estimation("no never-treated units to serve as control".into()));
    }
    let control_values: Vec<f64> = control_members.iter().map(|&i| d.cross.outcomes[i]).collect();
    let sieve = intercept_box_for(&control_values);
    let basis = BasisSpec::constant();
    let fit = fit_control(&d.cross, &d.index, &d.control, &sieve, &basis, tau, &opts.optimizer)?;

    let keys = cohorts.iter().map(|&g| panel.cohort_key(Some(g))).collect::<Result<Vec<_>>>()?;
    let mut config = TestConfig::new(tau, alpha, d.control.clone(), keys.clone(), basis);
    config.aggregator = opts.aggregator.clone();
    config.delta_correction = opts.delta_correction;
    config.null_draws = opts.null_draws;
    config.seed = opts.seed;
    let result = run_test(&config, &d.cross, &d.index, &fit)?;
    Ok(DidOutcome {
        fit,
        result,
        cohorts: cohorts.to_vec(),
        cohort_sizes: keys.iter().map(|k| d.index.members(k).len()).collect(),
        control_size: control_members.len(),
    })
}
