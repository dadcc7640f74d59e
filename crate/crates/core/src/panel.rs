//! Long-format panel data, treatment profiles and group formation.
//!
//! Periods are re-based to `1..=T` internally; original time labels are
//! kept for reporting. A treatment profile is rendered oldest-first, so
//! `"00001"` is a unit treated only in the most recent period of the
//! window.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(unit, time)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub outcome: f64,
    pub treatment: bool,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub id: String,
    /// Position `p` holds internal period `p + 1`.
    pub observations: Vec<Observation>,
}

/// A row of long-format input before balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub unit: String,
    pub time: i64,
    pub outcome: f64,
    pub treatment: f64,
    pub covariates: Vec<String>,
}

/// Balanced long-format panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<UnitRecord>,
    time_labels: Vec<i64>,
    covariate_names: Vec<String>,
}

/// Column names used by [`ingest_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// When set, the treatment column holds a raw real series that is
    /// binarized per unit with this cutoff (see [`binarize_treatment`]).
    #[serde(default)]
    pub binarize_cutoff: Option<f64>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treatment: "treatment".into(),
            covariates: Vec::new(),
            binarize_cutoff: None,
        }
    }
}

impl PanelDataset {
    /// Builds a balanced panel. Unit order follows first appearance.
    pub fn from_rows<I>(rows: I, covariate_names: Vec<String>) -> Result<Self>
    where
        I: IntoIterator<Item = PanelRow>,
    {
        Self::build(rows, covariate_names, None)
    }

    fn build<I>(rows: I, covariate_names: Vec<String>, binarize: Option<f64>) -> Result<Self>
    where
        I: IntoIterator<Item = PanelRow>,
    {
        let arity = covariate_names.len();
        let mut order: Vec<String> = Vec::new();
        let mut cells: HashMap<String, BTreeMap<i64, PanelRow>> = HashMap::new();
        let mut labels = BTreeSet::new();

        for row in rows {
            if !row.outcome.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite outcome for unit {:?} at time {}",
                    row.unit, row.time
                )));
            }
            if binarize.is_none() && row.treatment != 0.0 && row.treatment != 1.0 {
                return Err(Error::Domain(format!(
                    "treatment value {} for unit {:?} at time {} is not 0/1; binarize first",
                    row.treatment, row.unit, row.time
                )));
            }
            if row.covariates.len() != arity {
                return Err(Error::Schema(format!(
                    "unit {:?} at time {} has {} covariates, expected {}",
                    row.unit,
                    row.time,
                    row.covariates.len(),
                    arity
                )));
            }
            labels.insert(row.time);
            let entry = cells.entry(row.unit.clone()).or_insert_with(|| {
                order.push(row.unit.clone());
                BTreeMap::new()
            });
            let (unit, time) = (row.unit.clone(), row.time);
            if entry.insert(row.time, row).is_some() {
                return Err(Error::Domain(format!(
                    "duplicate observation for unit {unit:?} at time {time}"
                )));
            }
        }

        let time_labels: Vec<i64> = labels.into_iter().collect();
        let missing: Vec<String> = order
            .iter()
            .filter(|id| cells[*id].len() != time_labels.len())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Unbalanced { units: missing });
        }

        let mut units = Vec::with_capacity(order.len());
        for id in order {
            let rows = cells.remove(&id).expect("unit present");
            let raw: Vec<f64> = rows.values().map(|r| r.treatment).collect();
            let treatments: Vec<bool> = match binarize {
                Some(cutoff) if raw.len() >= 2 => binarize_treatment(&raw, cutoff, false)?,
                Some(_) => vec![false; raw.len()],
                None => raw.iter().map(|&v| v == 1.0).collect(),
            };
            let observations = rows
                .into_values()
                .zip(treatments)
                .map(|(r, treatment)| Observation {
                    outcome: r.outcome,
                    treatment,
                    covariates: r.covariates,
                })
                .collect();
            units.push(UnitRecord { id, observations });
        }

        Ok(Self {
            units,
            time_labels,
            covariate_names,
        })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.time_labels.len()
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Internal 1-based period of an original time label.
    pub fn time_index(&self, label: i64) -> Result<usize> {
        self.time_labels
            .binary_search(&label)
            .map(|p| p + 1)
            .map_err(|_| Error::Range(format!("time label {label} is not in the panel window")))
    }

    pub fn time_label(&self, t: usize) -> i64 {
        self.time_labels[t - 1]
    }

    fn check_period(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_periods() {
            return Err(Error::Range(format!(
                "period {t} outside 1..={}",
                self.n_periods()
            )));
        }
        Ok(())
    }

    pub fn observation(&self, unit: usize, t: usize) -> &Observation {
        &self.units[unit].observations[t - 1]
    }

    /// Outcomes at period `t` with each unit's history `Y_{t-1}, Y_{t-2}, ...`.
    pub fn cross_section(&self, t: usize) -> Result<CrossSection> {
        self.check_period(t)?;
        let outcomes = self.units.iter().map(|u| u.observations[t - 1].outcome).collect();
        let histories = self.histories_before(t);
        Ok(CrossSection::new(outcomes, histories))
    }

    fn histories_before(&self, t: usize) -> Vec<Vec<f64>> {
        self.units
            .iter()
            .map(|u| u.observations[..t - 1].iter().rev().map(|o| o.outcome).collect())
            .collect()
    }

    /// Like [`cross_section`](Self::cross_section) but instruments read the
    /// history before `instrument_period` instead of before `t`.
    pub fn cross_section_with_instruments(
        &self,
        t: usize,
        instrument_period: usize,
    ) -> Result<CrossSection> {
        self.check_period(instrument_period)?;
        let mut cross = self.cross_section(t)?;
        cross.instrument_histories = Some(self.histories_before(instrument_period));
        Ok(cross)
    }
}

/// Reads a long-format CSV into a balanced panel.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<PanelDataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let unit_col = column(&schema.unit)?;
    let time_col = column(&schema.time)?;
    let outcome_col = column(&schema.outcome)?;
    let treat_col = column(&schema.treatment)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |i: usize, what: &str| -> Result<f64> {
            field(i).parse::<f64>().map_err(|_| {
                Error::Schema(format!(
                    "row {}: cannot parse {what} value {:?}",
                    line + 2,
                    field(i)
                ))
            })
        };
        let time = field(time_col).parse::<i64>().map_err(|_| {
            Error::Schema(format!(
                "row {}: time value {:?} is not an integer",
                line + 2,
                field(time_col)
            ))
        })?;
        rows.push(PanelRow {
            unit: field(unit_col).to_string(),
            time,
            outcome: parse(outcome_col, "outcome")?,
            treatment: parse(treat_col, "treatment")?,
            covariates: cov_cols.iter().map(|&c| field(c).to_string()).collect(),
        });
    }
    PanelDataset::build(rows, schema.covariates.clone(), schema.binarize_cutoff)
}

/// `D_t = 1` iff `raw_t - raw_{t-1} > cutoff`; the first period takes `initial`.
pub fn binarize_treatment(raw: &[f64], cutoff: f64, initial: bool) -> Result<Vec<bool>> {
    if raw.len() < 2 {
        return Err(Error::Domain("binarization needs at least two periods".into()));
    }
    if !cutoff.is_finite() {
        return Err(Error::Domain("binarization cutoff must be finite".into()));
    }
    let mut out = Vec::with_capacity(raw.len());
    out.push(initial);
    out.extend(raw.windows(2).map(|w| w[1] - w[0] > cutoff));
    Ok(out)
}

/// Treatment history `(D_{t-L}, ..., D_t)`, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TreatmentProfile(Vec<bool>);

impl TreatmentProfile {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Domain("treatment profile must have length >= 1".into()));
        }
        Ok(Self(bits))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len.max(1)])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_control(&self) -> bool {
        self.0.iter().all(|b| !b)
    }
}

impl fmt::Display for TreatmentProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for TreatmentProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Domain(format!("invalid profile character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }
}

impl TryFrom<String> for TreatmentProfile {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TreatmentProfile> for String {
    fn from(p: TreatmentProfile) -> String {
        p.to_string()
    }
}

/// How far back a profile reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagWindow {
    Full,
    Lags(usize),
}

impl FromStr for LagWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Self::Full),
            other => other
                .parse::<usize>()
                .map(Self::Lags)
                .map_err(|_| Error::Config(format!("lag window {other:?} is neither 'full' nor an integer"))),
        }
    }
}

/// Per-unit treatment profiles at period `t`.
pub fn build_profiles(
    data: &PanelDataset,
    t: usize,
    window: LagWindow,
) -> Result<Vec<TreatmentProfile>> {
    data.check_period(t)?;
    let start = match window {
        LagWindow::Full => 1,
        LagWindow::Lags(l) if l < t => t - l,
        LagWindow::Lags(l) => {
            return Err(Error::Range(format!(
                "lag window {l} needs {} periods of history before period {t}",
                l
            )))
        }
    };
    Ok(data
        .units
        .iter()
        .map(|u| TreatmentProfile(u.observations[start - 1..t].iter().map(|o| o.treatment).collect()))
        .collect())
}

/// Cell identifier: discrete covariate value (absent = no conditioning) and profile.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub covariates: Option<Vec<String>>,
    pub profile: TreatmentProfile,
}

impl GroupKey {
    pub fn new(profile: TreatmentProfile) -> Self {
        Self {
            covariates: None,
            profile,
        }
    }

    pub fn with_covariates(profile: TreatmentProfile, covariates: Vec<String>) -> Self {
        Self {
            covariates: Some(covariates),
            profile,
        }
    }

    /// The all-zero profile in the same covariate cell.
    pub fn control_of(&self) -> Self {
        Self {
            covariates: self.covariates.clone(),
            profile: TreatmentProfile::zeros(self.profile.len()),
        }
    }

    pub fn covariate_label(&self) -> String {
        self.covariates.as_ref().map(|c| c.join(";")).unwrap_or_default()
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.covariates {
            Some(c) => write!(f, "{}|{}", self.profile, c.join(";")),
            None => write!(f, "{}", self.profile),
        }
    }
}

/// Partition of unit positions into cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupIndex {
    groups: BTreeMap<GroupKey, Vec<usize>>,
    n_units: usize,
}

impl GroupIndex {
    /// Unit `i` goes to `keys[i]`.
    pub fn from_keys(keys: Vec<GroupKey>) -> Self {
        let n_units = keys.len();
        let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
        for (i, key) in keys.into_iter().enumerate() {
            groups.entry(key).or_default().push(i);
        }
        Self { groups, n_units }
    }

    /// Members of a cell; empty when the cell is unobserved.
    pub fn members(&self, key: &GroupKey) -> &[usize] {
        self.groups.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupKey, &[usize])> {
        self.groups.iter().map(|(k, v)| (k, v.as_slice()))
    }
}

/// Groups units by profile at `t`, optionally also by covariate value at `t`.
pub fn group_units(
    data: &PanelDataset,
    t: usize,
    window: LagWindow,
    condition_on_covariates: bool,
) -> Result<GroupIndex> {
    let profiles = build_profiles(data, t, window)?;
    let keys = profiles
        .into_iter()
        .enumerate()
        .map(|(i, profile)| {
            if condition_on_covariates {
                GroupKey::with_covariates(profile, data.observation(i, t).covariates.clone())
            } else {
                GroupKey::new(profile)
            }
        })
        .collect();
    Ok(GroupIndex::from_keys(keys))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyRow {
    pub profile: String,
    pub covariates: String,
    pub count: usize,
}

/// Cell counts sorted by profile string, then covariate label.
pub fn tally(index: &GroupIndex) -> Vec<TallyRow> {
    let mut rows: Vec<TallyRow> = index
        .iter()
        .map(|(k, members)| TallyRow {
            profile: k.profile.to_string(),
            covariates: k.covariate_label(),
            count: members.len(),
        })
        .collect();
    rows.sort_by(|a, b| (&a.profile, &a.covariates).cmp(&(&b.profile, &b.covariates)));
    rows
}

pub fn write_tally_csv<W: Write>(rows: &[TallyRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["profile", "covariates", "count"])?;
    for r in rows {
        w.write_record([r.profile.as_str(), r.covariates.as_str(), &r.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Cross-section at one period: current outcomes plus lagged histories.
///
/// `histories[i]` is `(Y_{t-1}, Y_{t-2}, ...)` for unit `i`, most recent
/// first. Instruments read `instrument_histories` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub outcomes: Vec<f64>,
    pub histories: Vec<Vec<f64>>,
    pub instrument_histories: Option<Vec<Vec<f64>>>,
}

impl CrossSection {
    pub fn new(outcomes: Vec<f64>, histories: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(outcomes.len(), histories.len());
        Self {
            outcomes,
            histories,
            instrument_histories: None,
        }
    }

    /// Outcomes with no lag information.
    pub fn from_outcomes(outcomes: Vec<f64>) -> Self {
        let histories = vec![Vec::new(); outcomes.len()];
        Self::new(outcomes, histories)
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn instrument_history(&self, i: usize) -> &[f64] {
        match &self.instrument_histories {
            Some(h) => &h[i],
            None => &self.histories[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(unit: &str, time: i64, y: f64, d: f64) -> PanelRow {
        PanelRow {
            unit: unit.into(),
            time,
            outcome: y,
            treatment: d,
            covariates: vec![],
        }
    }

    fn panel_from_bits(histories: &[&str], start: i64) -> PanelDataset {
        let mut rows = Vec::new();
        for (u, bits) in histories.iter().enumerate() {
            for (s, c) in bits.chars().enumerate() {
                rows.push(row(&format!("u{u}"), start + s as i64, s as f64, if c == '1' { 1.0 } else { 0.0 }));
            }
        }
        PanelDataset::from_rows(rows, vec![]).unwrap()
    }

    #[test]
    fn ingests_balanced_rows() {
        let rows = (0..3).flat_map(|u| (1..=5).map(move |t| row(&format!("U{u}"), 1990 + t, t as f64, 0.0)));
        let p = PanelDataset::from_rows(rows, vec![]).unwrap();
        assert_eq!(p.n_units(), 3);
        assert_eq!(p.n_periods(), 5);
        assert_eq!(p.time_index(1993).unwrap(), 3);
        assert_eq!(p.time_label(1), 1991);
    }

    #[test]
    fn rejects_unbalanced_panel() {
        let mut rows: Vec<PanelRow> = (1..=5).map(|t| row("B", t, 0.0, 0.0)).collect();
        rows.extend((1..=5).filter(|&t| t != 3).map(|t| row("A", t, 0.0, 0.0)));
        match PanelDataset::from_rows(rows, vec![]) {
            Err(Error::Unbalanced { units }) => assert_eq!(units, vec!["A".to_string()]),
            other => panic!("expected balance error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let rows = vec![row("A", 1, 0.0, 0.0), row("A", 2, 0.0, 2.0)];
        assert!(matches!(PanelDataset::from_rows(rows, vec![]), Err(Error::Domain(_))));
    }

    #[test]
    fn csv_ingestion_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "id,year,gdp,shock,region\nA,2000,1.5,0,x\nA,2001,2.5,1,x\nB,2000,0.5,0,y\nB,2001,0.7,0,y\n").unwrap();
        let schema = ColumnSchema {
            unit: "id".into(),
            time: "year".into(),
            outcome: "gdp".into(),
            treatment: "shock".into(),
            covariates: vec!["region".into()],
            binarize_cutoff: None,
        };
        let p = ingest_csv(&path, &schema).unwrap();
        assert_eq!(p.n_units(), 2);
        assert!(p.observation(0, 2).treatment);
        assert_eq!(p.observation(1, 1).covariates, vec!["y".to_string()]);

        let bad = ColumnSchema {
            outcome: "growth".into(),
            ..schema.clone()
        };
        assert!(matches!(ingest_csv(&path, &bad), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_binarizes_raw_treatment_when_asked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "unit,time,outcome,treatment\nA,1,0,10.0\nA,2,0,11.5\nA,3,0,11.4\n").unwrap();
        let schema = ColumnSchema {
            binarize_cutoff: Some(1.0),
            ..ColumnSchema::default()
        };
        let p = ingest_csv(&path, &schema).unwrap();
        let d: Vec<bool> = p.units()[0].observations.iter().map(|o| o.treatment).collect();
        assert_eq!(d, vec![false, true, false]);
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize_treatment(&[10.0, 11.5, 11.4], 1.0, false).unwrap(), vec![false, true, false]);
        assert_eq!(binarize_treatment(&[0.0; 4], 0.5, false).unwrap(), vec![false; 4]);
        assert_eq!(binarize_treatment(&[1.0, 2.0], 1.0, false).unwrap(), vec![false, false]);
        assert!(binarize_treatment(&[1.0], 1.0, false).is_err());
        assert!(binarize_treatment(&[1.0, 2.0], f64::NAN, false).is_err());
    }

    #[test]
    fn profiles_render_oldest_first() {
        let p = panel_from_bits(&["000001", "000000"], 1959);
        let t = p.time_index(1964).unwrap();
        let prof = build_profiles(&p, t, LagWindow::Lags(4)).unwrap();
        assert_eq!(prof[0].to_string(), "00001");
        assert_eq!(prof[1].to_string(), "00000");
        let single = build_profiles(&p, t, LagWindow::Lags(0)).unwrap();
        assert_eq!(single[0].to_string(), "1");
        let full = build_profiles(&p, t, LagWindow::Full).unwrap();
        assert_eq!(full[0].len(), 6);
        assert!(matches!(build_profiles(&p, 2, LagWindow::Lags(4)), Err(Error::Range(_))));
    }

    #[test]
    fn table3_style_tally() {
        let mut hist = Vec::new();
        for (bits, count) in [("00000", 49), ("00001", 6), ("00011", 1), ("00100", 1), ("10000", 4)] {
            hist.extend(std::iter::repeat_n(bits, count));
        }
        let p = panel_from_bits(&hist, 1990);
        let idx = group_units(&p, 5, LagWindow::Lags(4), false).unwrap();
        let rows = tally(&idx);
        let got: Vec<(&str, usize)> = rows.iter().map(|r| (r.profile.as_str(), r.count)).collect();
        assert_eq!(got, vec![("00000", 49), ("00001", 6), ("00011", 1), ("00100", 1), ("10000", 4)]);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 61);

        let mut buf = Vec::new();
        write_tally_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("profile,covariates,count\n00000,,49\n"));
    }

    #[test]
    fn trivial_tallies() {
        assert!(tally(&GroupIndex::default()).is_empty());
        let p = panel_from_bits(&["0101"], 1);
        let idx = group_units(&p, 3, LagWindow::Lags(1), false).unwrap();
        assert_eq!(tally(&idx), vec![TallyRow { profile: "10".into(), covariates: String::new(), count: 1 }]);
    }

    #[test]
    fn covariate_conditioning_splits_cells() {
        let rows = vec![
            PanelRow { unit: "a".into(), time: 1, outcome: 0.0, treatment: 0.0, covariates: vec!["n".into()] },
            PanelRow { unit: "b".into(), time: 1, outcome: 0.0, treatment: 0.0, covariates: vec!["s".into()] },
        ];
        let p = PanelDataset::from_rows(rows, vec!["region".into()]).unwrap();
        let idx = group_units(&p, 1, LagWindow::Lags(0), true).unwrap();
        assert_eq!(idx.len(), 2);
        let key = GroupKey::with_covariates("0".parse().unwrap(), vec!["n".into()]);
        assert_eq!(idx.members(&key), &[0]);
    }

    #[test]
    fn cross_section_histories_are_most_recent_first() {
        let rows = (1..=4).map(|t| row("A", t, t as f64 * 10.0, 0.0));
        let p = PanelDataset::from_rows(rows, vec![]).unwrap();
        let cs = p.cross_section(4).unwrap();
        assert_eq!(cs.outcomes, vec![40.0]);
        assert_eq!(cs.histories[0], vec![30.0, 20.0, 10.0]);
        let cs = p.cross_section_with_instruments(4, 2).unwrap();
        assert_eq!(cs.instrument_history(0), &[10.0]);
    }

    fn bits_strategy() -> impl Strategy<Value = Vec<Vec<bool>>> {
        (1usize..6, 1usize..30).prop_flat_map(|(t, n)| prop::collection::vec(prop::collection::vec(any::<bool>(), t), n))
    }

    fn panel_from_matrix(m: &[Vec<bool>]) -> PanelDataset {
        let rows = m.iter().enumerate().flat_map(|(u, bits)| {
            bits.iter().enumerate().map(move |(s, &b)| row(&format!("u{u}"), s as i64, 0.0, if b { 1.0 } else { 0.0 }))
        });
        PanelDataset::from_rows(rows.collect::<Vec<_>>(), vec![]).unwrap()
    }

    proptest! {
        #[test]
        fn grouping_is_an_exhaustive_partition(m in bits_strategy(), full in any::<bool>()) {
            let p = panel_from_matrix(&m);
            let t = p.n_periods();
            let window = if full { LagWindow::Full } else { LagWindow::Lags(t - 1) };
            let idx = group_units(&p, t, window, false).unwrap();
            let mut seen = vec![0usize; p.n_units()];
            for (_, members) in idx.iter() {
                for &i in members { seen[i] += 1; }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(tally(&idx).iter().map(|r| r.count).sum::<usize>(), p.n_units());
        }

        #[test]
        fn grouping_is_permutation_equivariant(m in bits_strategy(), rot in 0usize..30) {
            let p = panel_from_matrix(&m);
            let n = m.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let permuted: Vec<Vec<bool>> = perm.iter().map(|&i| m[i].clone()).collect();
            let q = panel_from_matrix(&permuted);
            let t = p.n_periods();
            let a = build_profiles(&p, t, LagWindow::Full).unwrap();
            let b = build_profiles(&q, t, LagWindow::Full).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(&b[j], &a[i]);
            }
        }

        #[test]
        fn binarize_is_shift_invariant(raw in prop::collection::vec(-50.0f64..50.0, 2..20), shift in -100.0f64..100.0, c in 0.0f64..3.0) {
            let shifted: Vec<f64> = raw.iter().map(|x| x + shift).collect();
            // differences of shifted values can round differently; compare on a coarse grid
            let q = |v: &[f64]| v.iter().map(|x| (x * 8.0).round() / 8.0).collect::<Vec<_>>();
            let base = q(&raw);
            let moved: Vec<f64> = base.iter().map(|x| x + shift.round()).collect();
            prop_assert_eq!(binarize_treatment(&base, c, false).unwrap(), binarize_treatment(&moved, c, false).unwrap());
            prop_assert_eq!(binarize_treatment(&raw, c, false).unwrap().len(), shifted.len());
        }
    }
}
