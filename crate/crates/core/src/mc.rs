//! Monte Carlo size and power of the two-arm median test.
//!
//! `Y_i = θ_0 + θ_1 D_i + U_i` with `D_i ~ Bernoulli(N_1/n)`, so `N_1` is the
//! expected number of treated units. The control median is fitted by the
//! exact intercept sweep and the statistic is the squared sum of the
//! control and treated moments.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::did::intercept_box_for;
use crate::error::{Error, Result};
use crate::estimator::fit_control;
use crate::moments_test::{prepare_test, Aggregator, AggregatorKind, TestConfig, DEFAULT_NULL_DRAWS};
use crate::optim::OptimizerConfig;
use crate::panel::{CrossSection, GroupIndex, GroupKey, TreatmentProfile};
use crate::rng::{self, domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorModel {
    /// `N(0, 1)`
    #[serde(rename = "i")]
    Gaussian,
    /// `N(0, 1 + √Z + |sin πZ|)` with `Z ~ U(0, 1)`; the second argument is a variance.
    #[serde(rename = "ii")]
    Heteroskedastic,
    /// `U(−√3, √3)`
    #[serde(rename = "iii")]
    Uniform,
    /// `U(−v, v)` w.p. `1 − ε`, otherwise `±A` with equal odds.
    #[serde(rename = "iv")]
    FatTails,
}

pub const FAT_TAIL_V: f64 = 0.1;
pub const FAT_TAIL_EPS: f64 = 0.04;

pub fn fat_tail_a() -> f64 {
    ((1.0 - (1.0 - FAT_TAIL_EPS) * (2.0 * FAT_TAIL_V).powi(2) / 12.0) / FAT_TAIL_EPS).sqrt()
}

impl ErrorModel {
    pub const ALL: [ErrorModel; 4] = [Self::Gaussian, Self::Heteroskedastic, Self::Uniform, Self::FatTails];

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian => StandardNormal.sample(rng),
            Self::Heteroskedastic => {
                let z: f64 = rng.random();
                let var = 1.0 + z.sqrt() + (std::f64::consts::PI * z).sin().abs();
                let e: f64 = StandardNormal.sample(rng);
                var.sqrt() * e
            }
            Self::Uniform => {
                let s = 3f64.sqrt();
                rng.random_range(-s..s)
            }
            Self::FatTails => {
                if rng.random::<f64>() < FAT_TAIL_EPS {
                    if rng.random::<bool>() { fat_tail_a() } else { -fat_tail_a() }
                } else {
                    rng.random_range(-FAT_TAIL_V..FAT_TAIL_V)
                }
            }
        }
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        match self {
            Self::Heteroskedastic => 1.0 + 2.0 / 3.0 + 2.0 / std::f64::consts::PI,
            _ => 1.0,
        }
    }
}

impl FromStr for ErrorModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" | "gaussian" | "normal" => Ok(Self::Gaussian),
            "ii" | "2" | "heteroskedastic" => Ok(Self::Heteroskedastic),
            "iii" | "3" | "uniform" => Ok(Self::Uniform),
            "iv" | "4" | "fat-tails" | "fat_tails" => Ok(Self::FatTails),
            other => Err(Error::Config(format!("unknown error model {other:?} (i, ii, iii, iv)"))),
        }
    }
}

impl fmt::Display for ErrorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "i",
            Self::Heteroskedastic => "ii",
            Self::Uniform => "iii",
            Self::FatTails => "iv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCDesign {
    pub model: ErrorModel,
    pub n: usize,
    /// Expected treated count; `P(D = 1) = n1_expected / n`.
    pub n1_expected: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub replications: usize,
    pub seed: u64,
    pub null_draws: usize,
    pub tau: f64,
}

impl MCDesign {
    pub fn new(model: ErrorModel, n: usize, n1_expected: f64, replications: usize, seed: u64) -> Self {
        Self {
            model,
            n,
            n1_expected,
            theta0: 0.0,
            theta1: 0.0,
            replications,
            seed,
            null_draws: DEFAULT_NULL_DRAWS,
            tau: 0.5,
        }
    }

    pub fn treated_probability(&self) -> f64 {
        self.n1_expected / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.n1_expected > 0.0 && self.n1_expected < self.n as f64) {
            return Err(Error::Config(format!("need 0 < N1 = {} < n = {}", self.n1_expected, self.n)));
        }
        if self.replications == 0 || self.null_draws == 0 {
            return Err(Error::Config("replications and null draws must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config("tau must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Table cells with more expected treated than control units are not run.
    pub fn skipped(&self) -> bool {
        self.n1_expected > self.n as f64 - self.n1_expected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MCSample {
    pub y: Vec<f64>,
    pub d: Vec<bool>,
}

impl MCSample {
    pub fn n_treated(&self) -> usize {
        self.d.iter().filter(|&&x| x).count()
    }
}

fn data_rng(design: &MCDesign, rep: usize) -> StreamRng {
    rng::stream(design.seed, domain::MC_DATA, rep as u64)
}

/// Replication `rep` of the design.
pub fn generate(design: &MCDesign, rep: usize) -> MCSample {
    let mut rng = data_rng(design, rep);
    let p = design.treated_probability();
    let mut y = Vec::with_capacity(design.n);
    let mut d = Vec::with_capacity(design.n);
    for _ in 0..design.n {
        let di = rng.random::<f64>() < p;
        let u = design.model.sample(&mut rng);
        y.push(design.theta0 + if di { design.theta1 } else { 0.0 } + u);
        d.push(di);
    }
    MCSample { y, d }
}

fn arm(bit: bool) -> GroupKey {
    GroupKey::new(TreatmentProfile::new(vec![bit]).expect("one period"))
}

/// Decisions of one replication at each level in `levels`.
pub fn replicate(design: &MCDesign, rep: usize, levels: &[f64]) -> Result<Vec<bool>> {
    let sample = generate(design, rep);
    let index = GroupIndex::from_keys(sample.d.iter().map(|&b| arm(b)).collect());
    let cross = CrossSection::from_outcomes(sample.y.clone());
    let control = arm(false);
    let control_y: Vec<f64> = index.members(&control).iter().map(|&i| sample.y[i]).collect();
    if control_y.is_empty() {
        return Ok(vec![false; levels.len()]);
    }
    let basis = BasisSpec::constant();
    let fit = fit_control(&cross, &index, &control, &intercept_box_for(&control_y), &basis, design.tau, &OptimizerConfig::default())?;
    let mut config = TestConfig::new(design.tau, levels[0], control, vec![arm(true)], basis);
    config.aggregator = Aggregator::new(AggregatorKind::SqNormOfSum);
    config.include_control_moment = true;
    config.null_draws = design.null_draws;
    config.seed = rng::derive_seed(design.seed, domain::MC_NULL, rep as u64);
    let prepared = prepare_test(&config, &cross, &index, &fit)?;
    let null = if prepared.is_exact() { None } else { Some(prepared.simulate()?) };
    levels
        .iter()
        .map(|&a| Ok(prepared.decide(a, null.as_ref())?.reject))
        .collect()
}

/// Rejection counts per level over all replications.
pub fn rejection_counts(design: &MCDesign, levels: &[f64]) -> Result<Vec<usize>> {
    design.validate()?;
    if levels.is_empty() {
        return Err(Error::Config("no levels given".into()));
    }
    let decisions = (0..design.replications)
        .into_par_iter()
        .map(|rep| replicate(design, rep, levels))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; levels.len()];
    for d in decisions {
        for (c, r) in counts.iter_mut().zip(d) {
            *c += usize::from(r);
        }
    }
    Ok(counts)
}

pub fn mc_standard_error(rate: f64, replications: usize) -> f64 {
    (rate * (1.0 - rate) / replications as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub n: usize,
    #[serde(rename = "N1")]
    pub n1: usize,
    pub model: ErrorModel,
    pub level: f64,
    pub rate: Option<f64>,
    pub se: Option<f64>,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeTable {
    pub rows: Vec<SizeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSpec {
    /// `(n, N1)` pairs.
    pub cells: Vec<(usize, usize)>,
    pub models: Vec<ErrorModel>,
    pub levels: Vec<f64>,
    pub replications: usize,
    pub null_draws: usize,
    pub seed: u64,
}

impl SizeSpec {
    pub fn full_grid(replications: usize, seed: u64) -> Self {
        let mut cells = Vec::new();
        for n in [25, 50, 200, 800] {
            for n1 in [5, 10, 20] {
                cells.push((n, n1));
            }
        }
        Self {
            cells,
            models: ErrorModel::ALL.to_vec(),
            levels: vec![0.01, 0.05, 0.10],
            replications,
            null_draws: DEFAULT_NULL_DRAWS,
            seed,
        }
    }
}

/// Design for one cell. Every cell and model has its own seed derived from the master seed.
pub fn cell_design(spec: &SizeSpec, n: usize, n1: usize, model: ErrorModel) -> MCDesign {
    let tag = ((n as u64) << 32) ^ ((n1 as u64) << 8) ^ model as u64;
    let mut d = MCDesign::new(model, n, n1 as f64, spec.replications, rng::derive_seed(spec.seed, domain::MC_DATA, tag));
    d.null_draws = spec.null_draws;
    d
}

pub fn size_experiment(spec: &SizeSpec) -> Result<SizeTable> {
    let mut rows = Vec::new();
    for &(n, n1) in &spec.cells {
        for &model in &spec.models {
            let design = cell_design(spec, n, n1, model);
            let counts = if design.skipped() { None } else { Some(rejection_counts(&design, &spec.levels)?) };
            for (l, &level) in spec.levels.iter().enumerate() {
                let rate = counts.as_ref().map(|c| c[l] as f64 / spec.replications as f64);
                rows.push(SizeRow {
                    n,
                    n1,
                    model,
                    level,
                    rate,
                    se: rate.map(|r| mc_standard_error(r, spec.replications)),
                    replications: spec.replications,
                });
            }
        }
    }
    Ok(SizeTable { rows })
}

impl SizeTable {
    pub fn rate(&self, n: usize, n1: usize, model: ErrorModel, level: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.n1 == n1 && r.model == model && (r.level - level).abs() < 1e-12)
            .and_then(|r| r.rate)
    }

    /// One row per table entry.
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "N1", "model", "level", "rate", "se", "replications"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.n1.to_string(),
                r.model.to_string(),
                r.level.to_string(),
                r.rate.map(|x| x.to_string()).unwrap_or_default(),
                r.se.map(|x| x.to_string()).unwrap_or_default(),
                r.replications.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rows `(n, level)`, columns `N1 × model`; skipped cells are blank.
    pub fn write_wide_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut n1s: Vec<usize> = self.rows.iter().map(|r| r.n1).collect();
        n1s.sort_unstable();
        n1s.dedup();
        let mut models: Vec<ErrorModel> = self.rows.iter().map(|r| r.model).collect();
        models.sort_unstable();
        models.dedup();
        let mut levels: Vec<f64> = self.rows.iter().map(|r| r.level).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();

        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["n".to_string(), "level".to_string()];
        for n1 in &n1s {
            for m in &models {
                header.push(format!("N1={n1} ({m})"));
            }
        }
        w.write_record(&header)?;
        for &n in &ns {
            for &level in &levels {
                let mut rec = vec![n.to_string(), level.to_string()];
                for &n1 in &n1s {
                    for &m in &models {
                        rec.push(self.rate(n, n1, m, level).map(|x| x.to_string()).unwrap_or_default());
                    }
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub model: ErrorModel,
    pub theta1: f64,
    pub rate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub n: usize,
    #[serde(rename = "N1")]
    pub n1: f64,
    pub alpha: f64,
    pub replications: usize,
    pub points: Vec<PowerPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    pub n: usize,
    pub n1: f64,
    pub alpha: f64,
    pub models: Vec<ErrorModel>,
    pub thetas: Vec<f64>,
    pub replications: usize,
    pub null_draws: usize,
    pub seed: u64,
}

impl PowerSpec {
    pub fn default_grid(replications: usize, seed: u64) -> Self {
        Self {
            n: 200,
            n1: 10.0,
            alpha: 0.05,
            models: ErrorModel::ALL.to_vec(),
            thetas: (0..=27).map(|i| i as f64 * 0.2).collect(),
            replications,
            null_draws: DEFAULT_NULL_DRAWS,
            seed,
        }
    }
}

/// Rejection rate along the θ_1 grid. Every grid point reuses the same
/// replication seeds, so the curves differ only through θ_1.
pub fn power_experiment(spec: &PowerSpec) -> Result<PowerCurve> {
    if spec.thetas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("theta grid must be sorted".into()));
    }
    let mut points = Vec::new();
    for &model in &spec.models {
        let seed = rng::derive_seed(spec.seed, domain::MC_DATA, model as u64);
        for &theta1 in &spec.thetas {
            let mut design = MCDesign::new(model, spec.n, spec.n1, spec.replications, seed);
            design.theta1 = theta1;
            design.null_draws = spec.null_draws;
            let rate = rejection_counts(&design, &[spec.alpha])?[0] as f64 / spec.replications as f64;
            points.push(PowerPoint { model, theta1, rate, se: mc_standard_error(rate, spec.replications) });
        }
    }
    Ok(PowerCurve { n: spec.n, n1: spec.n1, alpha: spec.alpha, replications: spec.replications, points })
}

impl PowerCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "theta1", "rate", "se"])?;
        for p in &self.points {
            w.write_record([p.model.to_string(), p.theta1.to_string(), p.rate.to_string(), p.se.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(model: ErrorModel, n: usize) -> Vec<f64> {
        let mut rng = rng::stream(42, 7, model as u64);
        (0..n).map(|_| model.sample(&mut rng)).collect()
    }

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn error_model_variances() {
        for model in ErrorModel::ALL {
            let x = draws(model, 1_000_000);
            let (m, v) = mean_var(&x);
            let m4 = x.iter().map(|u| (u - m).powi(4)).sum::<f64>() / x.len() as f64;
            let se = ((m4 - v * v) / x.len() as f64).sqrt();
            assert!(m.abs() < 0.01, "{model}: mean {m}");
            assert!((v - model.variance()).abs() < 4.0 * se, "{model}: var {v} (se {se})");
        }
        // 1 + E√Z + E|sin πZ| with E√Z = 2/3 and E|sin πZ| = 2/π
        let grid = 1_000_000;
        let quad: f64 = (0..grid)
            .map(|k| {
                let z = (k as f64 + 0.5) / grid as f64;
                1.0 + z.sqrt() + (std::f64::consts::PI * z).sin().abs()
            })
            .sum::<f64>()
            / grid as f64;
        assert!((quad - ErrorModel::Heteroskedastic.variance()).abs() < 1e-6);
    }

    #[test]
    fn fat_tails_put_mass_eps_beyond_one() {
        assert!((fat_tail_a() - 4.999).abs() < 0.01);
        let x = draws(ErrorModel::FatTails, 1_000_000);
        let tail = x.iter().filter(|v| v.abs() > 1.0).count() as f64 / x.len() as f64;
        assert!((tail - FAT_TAIL_EPS).abs() < 0.002, "{tail}");
    }

    #[test]
    fn gaussian_sample_moments() {
        let design = MCDesign::new(ErrorModel::Gaussian, 100_000, 10.0, 1, 3);
        let (m, v) = mean_var(&generate(&design, 0).y);
        assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.02);
    }

    #[test]
    fn treated_count_averages_n1() {
        let design = MCDesign::new(ErrorModel::Gaussian, 200, 10.0, 4000, 9);
        let total: usize = (0..4000).map(|r| generate(&design, r).n_treated()).sum();
        let mean = total as f64 / 4000.0;
        // sd of the mean is about sqrt(9.5 / 4000) = 0.05
        assert!((mean - 10.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn replications_are_distinct_and_reproducible() {
        let design = MCDesign::new(ErrorModel::Uniform, 50, 5.0, 2, 1);
        assert_eq!(generate(&design, 0), generate(&design, 0));
        assert_ne!(generate(&design, 0).y, generate(&design, 1).y);
    }

    #[test]
    fn skipped_cells() {
        assert!(MCDesign::new(ErrorModel::Gaussian, 25, 20.0, 1, 0).skipped());
        assert!(!MCDesign::new(ErrorModel::Gaussian, 50, 20.0, 1, 0).skipped());
        let spec = SizeSpec { cells: vec![(25, 20)], models: vec![ErrorModel::Gaussian], levels: vec![0.05], replications: 10, null_draws: 10, seed: 0 };
        let t = size_experiment(&spec).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].rate, None);
    }

    #[test]
    fn size_table_is_thread_count_independent() {
        let spec = SizeSpec { cells: vec![(50, 10)], models: vec![ErrorModel::FatTails], levels: vec![0.05, 0.1], replications: 200, null_draws: 200, seed: 5 };
        let run = |threads| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| size_experiment(&spec).unwrap());
        let a = run(1);
        assert_eq!(a, run(8));
        let mut buf = Vec::new();
        a.write_wide_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,level,N1=10 (iv)"));
        for r in &a.rows {
            let rate = r.rate.unwrap();
            assert!((0.0..=1.0).contains(&rate));
            assert_eq!(r.se.unwrap(), mc_standard_error(rate, 200));
        }
    }

    /// Pool-adjacent-violators fit of a nondecreasing sequence.
    fn isotonic(y: &[f64]) -> Vec<f64> {
        let mut blocks: Vec<(f64, usize)> = Vec::new();
        for &v in y {
            blocks.push((v, 1));
            while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
                let (b, nb) = blocks.pop().unwrap();
                let (a, na) = blocks.pop().unwrap();
                blocks.push(((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb));
            }
        }
        blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
    }

    #[test]
    fn power_rises_with_effect() {
        let spec = PowerSpec {
            models: vec![ErrorModel::Gaussian],
            thetas: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.4],
            replications: 400,
            null_draws: 300,
            ..PowerSpec::default_grid(400, 11)
        };
        let curve = power_experiment(&spec).unwrap();
        let rates: Vec<f64> = curve.points.iter().map(|p| p.rate).collect();
        let fitted = isotonic(&rates);
        for (p, f) in curve.points.iter().zip(&fitted) {
            assert!((p.rate - f).abs() <= 2.0 * p.se.max(1.0 / 400.0), "{rates:?}");
        }
        assert!(rates[5] > 0.9, "{rates:?}");
        assert!(power_experiment(&PowerSpec { thetas: vec![1.0, 0.0], ..spec }).is_err());
    }
}
