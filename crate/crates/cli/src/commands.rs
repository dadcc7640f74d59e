use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use serde_json::json;

use smallarm::basis::{BasisSpec, SieveSpec};
use smallarm::confidence::{invert, CRQuery, Grid};
use smallarm::did::{did_test, intercept_box_for, DidOptions, StaggeredPanel};
use smallarm::estimator::{fit_control, fit_linear_quantile_with, FitResult};
use smallarm::mc::{power_experiment, size_experiment, PowerSpec, SizeSpec};
use smallarm::moments_test::{detect_integer_problem, run_test_with_null, Aggregator, NullSample, TestConfig, TestResult};
use smallarm::multitime::{fit_times, multi_time_test_with_null, time_slices, MultiTimeConfig};
use smallarm::optim::OptimizerConfig;
use smallarm::panel::{
    group_units, ingest_csv, tally, write_tally_csv, ColumnSchema, CrossSection, GroupIndex, GroupKey, PanelDataset,
};
use smallarm::rng::{derive_seed, domain};

use crate::manifest::{self, Outputs, RunManifest};
use crate::{CellArgs, Cli, Command, FitArgs, InputArgs, TestArgs};

pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    if let Some(path) = &cli.replay {
        return replay(path, &cli.out);
    }
    let command = cli.command.expect("checked by the caller");
    let mut argv: Vec<String> = args.to_vec();
    let seed = match cli.seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            argv.extend(["--seed".to_string(), s.to_string()]);
            s
        }
    };
    let m = execute(&command, seed, &cli.out, argv)?;
    eprintln!("wrote {} file(s) and {} to {}", m.outputs.len(), manifest::MANIFEST_FILE, cli.out.display());
    Ok(())
}

fn replay(path: &Path, out: &Path) -> Result<()> {
    let recorded = manifest::load(path)?;
    manifest::check_input(&recorded)?;
    let mut full = vec!["smallarm".to_string()];
    full.extend(recorded.argv.iter().cloned());
    let cli = Cli::try_parse_from(&full).map_err(|e| anyhow!("manifest arguments do not parse: {e}"))?;
    let command = cli.command.ok_or_else(|| anyhow!("manifest records no subcommand"))?;
    let seed = cli.seed.unwrap_or(recorded.seed);
    let replayed = execute(&command, seed, out, recorded.argv.clone())?;
    let bad = manifest::mismatched_outputs(&recorded, &replayed);
    if !bad.is_empty() {
        bail!("replay differs from the manifest in: {}", bad.join(", "));
    }
    println!("replay reproduced {} output file(s)", replayed.outputs.len());
    Ok(())
}

fn execute(command: &Command, seed: u64, out: &Path, argv: Vec<String>) -> Result<RunManifest> {
    let input = command.input().cloned();
    let input_sha256 = input.as_deref().map(manifest::sha256_file).transpose()?;
    let mut outputs = Outputs::new(out)?;
    match command {
        Command::Tally(c) => cmd_tally(c, &mut outputs)?,
        Command::Estimate(c) => cmd_estimate(c, seed, &mut outputs)?,
        Command::Test(c) => cmd_test(c, seed, &mut outputs)?,
        Command::Cr(c) => cmd_cr(c, seed, &mut outputs)?,
        Command::DidTest(c) => cmd_did(c, seed, &mut outputs)?,
        Command::Mtt(c) => cmd_mtt(c, seed, &mut outputs)?,
        Command::McSize(c) => cmd_mc_size(c, seed, &mut outputs)?,
        Command::McPower(c) => cmd_mc_power(c, seed, &mut outputs)?,
    }
    outputs.finish(RunManifest {
        command: command.name().to_string(),
        argv,
        config: serde_json::to_value(command)?,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        input: input.map(|p| p.display().to_string()),
        input_sha256,
        outputs: Default::default(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    })
}

fn load_panel(a: &InputArgs) -> Result<PanelDataset> {
    let schema = ColumnSchema {
        unit: a.unit_col.clone(),
        time: a.time_col.clone(),
        outcome: a.outcome_col.clone(),
        treatment: a.treat_col.clone(),
        covariates: a.covariate_cols.clone(),
        binarize_cutoff: a.binarize_cutoff,
    };
    Ok(ingest_csv(&a.input, &schema)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

struct Cells {
    cross: CrossSection,
    index: GroupIndex,
    control: GroupKey,
}

fn cell_values(cell: &CellArgs) -> Option<Vec<String>> {
    cell.cell.as_ref().map(|c| c.split(';').map(str::to_string).collect())
}

fn cells(data: &PanelDataset, cell: &CellArgs) -> Result<Cells> {
    let t = data.time_index(cell.t)?;
    let by_cov = cell.by_covariates || cell.cell.is_some();
    let index = group_units(data, t, cell.lags, by_cov)?;
    let (any, _) = index.iter().next().ok_or_else(|| anyhow!("no units in the panel"))?;
    let len = any.profile.len();
    let covariates = cell_values(cell);
    if by_cov && covariates.is_none() {
        bail!("--by-covariates needs --cell to pick the covariate cell to analyse");
    }
    let control = GroupKey { covariates, profile: smallarm::panel::TreatmentProfile::zeros(len) };
    Ok(Cells { cross: data.cross_section(t)?, index, control })
}

fn optimizer(fit: &FitArgs, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        restarts: fit.restarts,
        max_iter: fit.max_iter,
        xtol: fit.xtol,
        seed: derive_seed(seed, domain::OPTIMIZER, 0),
        ..OptimizerConfig::default()
    }
}

fn basis(fit: &FitArgs) -> Result<BasisSpec> {
    match &fit.basis {
        Some(p) => read_json(p),
        None => Ok(BasisSpec::constant()),
    }
}

fn fit_cells(c: &Cells, fit: &FitArgs, tau: f64, seed: u64) -> Result<FitResult> {
    let opt = optimizer(fit, seed);
    if let Some(p) = fit.ar_lags {
        if fit.sieve.is_some() {
            bail!("--ar-lags and --sieve are exclusive");
        }
        return Ok(fit_linear_quantile_with(&c.cross, &c.index, &c.control, p, tau, &opt)?);
    }
    let sieve: SieveSpec = match &fit.sieve {
        Some(p) => read_json(p)?,
        None => {
            let y: Vec<f64> = c.index.members(&c.control).iter().map(|&i| c.cross.outcomes[i]).collect();
            intercept_box_for(&y)
        }
    };
    Ok(fit_control(&c.cross, &c.index, &c.control, &sieve, &basis(fit)?, tau, &opt)?)
}

fn treated_keys(c: &Cells, profiles: &[String]) -> Result<Vec<GroupKey>> {
    if profiles.is_empty() {
        let mut keys: Vec<GroupKey> = c
            .index
            .iter()
            .map(|(k, _)| k.clone())
            .filter(|k| k.covariates == c.control.covariates && k.profile != c.control.profile)
            .collect();
        keys.sort();
        if keys.is_empty() {
            bail!("no treated cells at this period");
        }
        return Ok(keys);
    }
    profiles
        .iter()
        .map(|p| Ok(GroupKey { covariates: c.control.covariates.clone(), profile: p.parse()? }))
        .collect()
}

fn test_config(a: &TestArgs, c: &Cells, fit: &FitArgs, seed: u64) -> Result<TestConfig> {
    let treated = treated_keys(c, &a.treated_profiles)?;
    let mut config = TestConfig::new(a.tau, a.alpha, c.control.clone(), treated, basis(fit)?);
    config.delta_correction = a.delta;
    config.null_draws = a.draws;
    config.aggregator = if a.weights.is_empty() {
        Aggregator::new(a.aggregator)
    } else {
        Aggregator::weighted(a.aggregator, a.weights.clone())
    };
    config.include_control_moment = a.include_control;
    config.exact_when_eligible = !a.no_exact;
    config.seed = derive_seed(seed, domain::NULL_DRAWS, 0);
    Ok(config)
}

fn csv_bytes<F>(header: &[&str], rows: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        rows(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

fn write_moments(outputs: &mut Outputs, result: &TestResult) -> Result<()> {
    let bytes = csv_bytes(&["group", "count", "k", "value"], |w| {
        for m in &result.per_group_moments {
            for (k, v) in m.values.iter().enumerate() {
                w.write_record([m.group.to_string(), m.count.to_string(), k.to_string(), v.to_string()])?;
            }
        }
        Ok(())
    })?;
    outputs.write("moments.csv", &bytes)
}

fn write_null(outputs: &mut Outputs, null: &NullSample) -> Result<()> {
    let bytes = csv_bytes(&["draw", "value"], |w| {
        for (i, v) in null.draws.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        Ok(())
    })?;
    outputs.write("null_draws.csv", &bytes)
}

fn print_result(r: &TestResult) {
    println!("statistic        {}", r.statistic);
    println!("critical value   {}", r.critical_value);
    println!("delta            {}", r.delta_correction);
    println!("alpha            {}", r.alpha);
    println!("reject           {}", r.reject);
    println!("p-value (upper)  {}", r.p_value_upper);
    println!("null law         {}", if r.exact { "exact binomial".to_string() } else { format!("{} draws", r.null_draws) });
    if r.degenerate_power {
        println!("note             no sample of these sizes can reject at this level");
    }
    for m in &r.per_group_moments {
        println!("  cell {:<12} n = {:<6} moment = {:?}", m.group.to_string(), m.count, m.values);
    }
}

fn cmd_tally(c: &crate::TallyCmd, outputs: &mut Outputs) -> Result<()> {
    let data = load_panel(&c.input)?;
    let t = data.time_index(c.cell.t)?;
    let index = group_units(&data, t, c.cell.lags, c.cell.by_covariates || c.cell.cell.is_some())?;
    let rows = tally(&index);
    let mut buf = Vec::new();
    write_tally_csv(&rows, &mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    outputs.write("tally.csv", &buf)?;
    outputs.json("tally.json", &rows)
}

fn cmd_estimate(c: &crate::EstimateCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let data = load_panel(&c.input)?;
    let cells = cells(&data, &c.cell)?;
    let fit = fit_cells(&cells, &c.fit, c.tau, seed)?;
    println!("intercept  {}", fit.h_hat.intercept());
    println!("theta      {:?}", fit.h_hat.theta);
    if !fit.h_hat.pi.is_empty() {
        println!("pi         {:?}", fit.h_hat.pi);
    }
    println!("criterion  {}", fit.criterion_value);
    outputs.json("fit.json", &fit)
}

fn cmd_test(c: &crate::TestCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let data = load_panel(&c.input)?;
    let cells = cells(&data, &c.cell)?;
    let fit = fit_cells(&cells, &c.fit, c.test.tau, seed)?;
    let config = test_config(&c.test, &cells, &c.fit, seed)?;
    let (result, null) = run_test_with_null(&config, &cells.cross, &cells.index, &fit)?;
    let sizes: Vec<usize> = config.treated.iter().map(|k| cells.index.members(k).len()).collect();
    let integer = detect_integer_problem(config.tau, config.alpha, &sizes)?;
    print_result(&result);
    outputs.json("result.json", &json!({ "result": result, "fit": fit, "config": config, "integer_problem": integer }))?;
    write_moments(outputs, &result)?;
    if c.test.dump_null {
        if let Some(n) = &null {
            write_null(outputs, n)?;
        }
    }
    Ok(())
}

fn read_grid_file(path: &PathBuf) -> Result<Grid> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let points = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| anyhow!("bad grid value {x:?} in {}", path.display())))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid::Points(points))
}

fn cmd_cr(c: &crate::CrCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let data = load_panel(&c.input)?;
    let cells = cells(&data, &c.cell)?;
    let fit = fit_cells(&cells, &c.fit, c.test.tau, seed)?;
    let config = test_config(&c.test, &cells, &c.fit, seed)?;
    let grid = match &c.grid_file {
        Some(p) => read_grid_file(p)?,
        None => c.grid.parse()?,
    };
    let mut query = CRQuery::new(c.mode, grid, config);
    query.cap = c.cap;
    let cr = invert(&query, &cells.cross, &cells.index, &fit)?;
    match &cr.interval_form {
        Some(i) => println!("region     {i}"),
        None => println!("accepted   {} of {} candidates", cr.accepted.len(), cr.candidates),
    }
    println!("critical   {}", cr.critical_value);
    if cr.degenerate {
        println!("note       treated cell is empty; every candidate is accepted");
    }
    let dim = query.config.treated.len();
    let mut header: Vec<String> = (1..=dim).map(|k| format!("theta_{k}")).collect();
    header.push("statistic".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let bytes = csv_bytes(&header, |w| {
        for a in &cr.accepted {
            let mut rec: Vec<String> = a.theta.iter().map(f64::to_string).collect();
            rec.push(a.statistic.to_string());
            w.write_record(&rec)?;
        }
        Ok(())
    })?;
    outputs.json("cr.json", &json!({ "region": cr, "fit": fit }))?;
    outputs.write("accepted.csv", &bytes)
}

fn cmd_did(c: &crate::DidCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let data = load_panel(&c.input)?;
    let panel = StaggeredPanel::new(data)?;
    let opts = DidOptions {
        aggregator: Aggregator::new(c.aggregator),
        delta_correction: c.delta,
        null_draws: c.draws,
        seed: derive_seed(seed, domain::NULL_DRAWS, 0),
        optimizer: OptimizerConfig { seed: derive_seed(seed, domain::OPTIMIZER, 0), ..OptimizerConfig::default() },
    };
    let outcome = did_test(&panel, c.t, &c.cohorts, c.tau, c.alpha, &opts)?;
    print_result(&outcome.result);
    println!("control units {}", outcome.control_size);
    for (g, n) in outcome.cohorts.iter().zip(&outcome.cohort_sizes) {
        println!("cohort {g:<8} {n} unit(s)");
    }
    write_moments(outputs, &outcome.result)?;
    outputs.json("did.json", &outcome)
}

fn cmd_mtt(c: &crate::MttCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let data = load_panel(&c.input)?;
    let mut config: MultiTimeConfig = read_json(&c.config)?;
    config.seed = derive_seed(seed, domain::NULL_DRAWS, 0);
    let slices = time_slices(&config, &data)?;
    let opt = OptimizerConfig { restarts: c.restarts, seed: derive_seed(seed, domain::OPTIMIZER, 0), ..OptimizerConfig::default() };
    let fits = fit_times(&config, &slices, &opt)?;
    let (result, _) = multi_time_test_with_null(&config, &slices, &fits)?;
    print_result(&result);
    write_moments(outputs, &result)?;
    outputs.json("mtt.json", &json!({ "result": result, "fits": fits, "config": config }))
}

fn cmd_mc_size(c: &crate::McSizeCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let replications = if c.full_scale { 10_000 } else { c.replications };
    let mut spec = SizeSpec::full_grid(replications, seed);
    if !c.cells.is_empty() {
        spec.cells = c.cells.clone();
    }
    spec.models = c.models.clone();
    spec.levels = c.levels.clone();
    spec.null_draws = c.draws;
    let table = size_experiment(&spec)?;
    let mut wide = Vec::new();
    table.write_wide_csv(&mut wide)?;
    print!("{}", String::from_utf8_lossy(&wide));
    let mut long = Vec::new();
    table.write_long_csv(&mut long)?;
    outputs.write("size_table.csv", &wide)?;
    outputs.write("size_long.csv", &long)?;
    outputs.json("size.json", &json!({ "spec": spec, "table": table }))
}

fn cmd_mc_power(c: &crate::McPowerCmd, seed: u64, outputs: &mut Outputs) -> Result<()> {
    let replications = if c.full_scale { 10_000 } else { c.replications };
    let thetas = match c.thetas.parse::<Grid>()? {
        Grid::Range { lo, hi, step } => Grid::range_points(lo, hi, step)?,
        _ => bail!("--thetas must be lo:hi:step"),
    };
    let spec = PowerSpec {
        n: c.n,
        n1: c.n1,
        alpha: c.alpha,
        models: c.models.clone(),
        thetas,
        replications,
        null_draws: c.draws,
        seed,
    };
    let curve = power_experiment(&spec)?;
    let mut buf = Vec::new();
    curve.write_csv(&mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    outputs.write("power.csv", &buf)?;
    outputs.json("power.json", &json!({ "spec": spec, "curve": curve }))
}
