//! Command-line front end: `fit`, `ci`, `classify`, `simulate`, `diagnose`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure. Errors are
//! also written to stderr as a JSON object.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classify::{classification_report, classify_rows, CostMatrix};
use crate::drm::{BasisSpec, ModelData};
use crate::em::{fit_prepared, EmConfig};
use crate::error::{OslsError, Result};
use crate::inference::{
    assumption_diagnostics, plugin_covariance_prepared, ElrPoint, ProfileEngine,
};
use crate::io::{load_cost_matrix, load_dataset, load_scenarios, load_table, FittedModel, LabelMap, LoadedData, Manifest, ResultBundle, Standardization};
use crate::sim::{run_external, run_accuracy_curve, run_study, ExternalSpec, FitChecks, MetricsTable, StudyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "oslsel", version, about = "Open-set label shift estimation by empirical likelihood")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Fit the maximum empirical likelihood estimate.
    Fit(FitArgs),
    /// Likelihood ratio intervals and curves for mixture proportions.
    Ci(CiArgs),
    /// Label rows with a fitted model.
    Classify(ClassifyArgs),
    /// Run a replication study from a scenario file or an external dataset.
    Simulate(SimulateArgs),
    /// Identifiability and conditioning checks.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Labelled training CSV (header row required).
    #[arg(long)]
    pub train: PathBuf,
    /// Unlabelled test CSV with the same feature columns.
    #[arg(long)]
    pub test: PathBuf,
    /// Name of the integer label column in the training file.
    #[arg(long, default_value = "y")]
    pub label: String,
    /// identity | polynomial:<degree> | precomputed
    #[arg(long, default_value = "identity")]
    pub basis: String,
    /// Centre and scale every feature by the training mean and sd.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EmArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 5)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl EmArgs {
    fn config(&self) -> EmConfig {
        EmConfig { tol: self.tol, max_iter: self.max_iter, n_starts: self.starts, seed: self.seed, ..EmConfig::default() }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Also report plug-in standard errors of the proportions.
    #[arg(long)]
    pub covariance: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CiArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Class indices (0 = baseline, K = novel); all of 1..=K when omitted.
    #[arg(long = "k")]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Extra evenly spaced curve points across the widened interval.
    #[arg(long, default_value_t = 21)]
    pub grid_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    /// `model.json` written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with the model's feature columns.
    #[arg(long)]
    pub features: PathBuf,
    /// Column holding true labels; enables the evaluation report.
    #[arg(long)]
    pub truth: Option<String>,
    /// Raw label that marks the novel class in the truth column.
    #[arg(long)]
    pub novel_label: Option<i64>,
    /// Headerless (K+1)x(K+1) cost matrix; zero-one loss when omitted.
    #[arg(long)]
    pub cost: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// JSON scenario (object or array) for the Gaussian design.
    #[arg(long, conflicts_with = "external")]
    pub scenario: Option<PathBuf>,
    /// Override the number of replications of every scenario.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub starts: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Skip likelihood ratio intervals.
    #[arg(long)]
    pub no_intervals: bool,
    /// Novel-class proportions for the accuracy curve (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub accuracy_grid: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub accuracy_reps: usize,
    /// Fully labelled CSV for the external-data split protocol.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub label: String,
    /// Raw label used as the novel class; the largest label when omitted.
    #[arg(long)]
    pub novel_label: Option<i64>,
    /// JSON split protocol for `--external`.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fitted model whose slopes are checked for separation.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `--basis`.
pub fn parse_basis(text: &str, d: usize) -> Result<BasisSpec> {
    match text.split_once(':') {
        None if text == "identity" => Ok(BasisSpec::Identity),
        None if text == "precomputed" => Ok(BasisSpec::Precomputed { q: d }),
        Some(("polynomial", deg)) => deg
            .parse::<usize>()
            .ok()
            .filter(|&v| v >= 1)
            .map(|degree| BasisSpec::Polynomial { degree })
            .ok_or_else(|| OslsError::InvalidInput(format!("bad polynomial degree '{deg}'"))),
        _ => Err(OslsError::InvalidInput(format!(
            "unknown basis '{text}' (expected identity, polynomial:<degree> or precomputed)"
        ))),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(OslsError::InvalidInput(format!("input file {} does not exist", path.display())))
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(OslsError::InvalidInput(format!("level {level} outside (0, 1)")))
    }
}

impl Command {
    /// Checks paths and numeric ranges before any work starts.
    pub fn validate(&self) -> Result<()> {
        let em = |e: &EmArgs| e.config().validate();
        match self {
            Command::Fit(a) => {
                require_file(&a.data.train)?;
                require_file(&a.data.test)?;
                em(&a.em)
            }
            Command::Ci(a) => {
                require_file(&a.data.train)?;
                require_file(&a.data.test)?;
                check_level(a.level)?;
                em(&a.em)
            }
            Command::Classify(a) => {
                require_file(&a.model)?;
                require_file(&a.features)?;
                if let Some(c) = &a.cost {
                    require_file(c)?;
                }
                Ok(())
            }
            Command::Simulate(a) => {
                match (&a.scenario, &a.external) {
                    (Some(s), None) => require_file(s)?,
                    (None, Some(e)) => require_file(e)?,
                    _ => {
                        return Err(OslsError::InvalidInput(
                            "simulate needs exactly one of --scenario or --external".into(),
                        ))
                    }
                }
                if let Some(p) = &a.protocol {
                    require_file(p)?;
                }
                if a.accuracy_grid.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                    return Err(OslsError::InvalidInput("accuracy grid values must lie in (0, 1)".into()));
                }
                EmConfig { tol: a.tol, n_starts: a.starts, ..EmConfig::default() }.validate()
            }
            Command::Diagnose(a) => {
                require_file(&a.data.train)?;
                require_file(&a.data.test)?;
                if let Some(m) = &a.model {
                    require_file(m)?;
                }
                Ok(())
            }
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Ci(_) => "ci",
            Command::Classify(_) => "classify",
            Command::Simulate(_) => "simulate",
            Command::Diagnose(_) => "diagnose",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            Command::Fit(a) => a.em.seed,
            Command::Ci(a) => a.em.seed,
            _ => 0,
        }
    }
}

fn load(data: &DataArgs) -> Result<(LoadedData, BasisSpec)> {
    let loaded = load_dataset(&data.train, &data.test, &data.label, data.standardize)?;
    let basis = parse_basis(&data.basis, loaded.dataset.dim())?;
    Ok((loaded, basis))
}

fn start_bundle(cmd: &Command, out: &Path, inputs: &[&Path]) -> Result<ResultBundle> {
    let mut manifest = Manifest::new(cmd.name(), cmd.seed(), cmd)?;
    for p in inputs {
        manifest.add_input(p)?;
    }
    ResultBundle::new(out, manifest)
}

#[derive(Serialize)]
struct WeightRow {
    row: usize,
    block: &'static str,
    p_hat: f64,
}

#[derive(Serialize)]
struct FitReport<'a> {
    log_el: f64,
    converged: bool,
    iterations: usize,
    pi_hat: Vec<f64>,
    lambda: &'a [f64],
    standard_errors: Option<Vec<f64>>,
    checks: FitChecks,
    diagnostics: &'a crate::em::FitDiagnostics,
    trace: &'a crate::em::EmTrace,
}

fn cmd_fit(cmd: &Command, a: &FitArgs) -> Result<()> {
    let (loaded, basis) = load(&a.data)?;
    let mut bundle = start_bundle(cmd, &a.out, &[&a.data.train, &a.data.test])?;
    let data = ModelData::new(&loaded.dataset, &basis)?;
    let sol = fit_prepared(&data, &a.em.config())?;
    let standard_errors = if a.covariance {
        let cov = plugin_covariance_prepared(&sol, &data)?;
        Some((0..=sol.k()).map(|k| cov.pi_standard_error(k)).collect())
    } else {
        None
    };
    let n = loaded.dataset.n();
    let weights: Vec<WeightRow> = sol
        .p_hat
        .p
        .iter()
        .enumerate()
        .map(|(i, &p)| WeightRow {
            row: if i < n { i } else { i - n },
            block: if i < n { "train" } else { "test" },
            p_hat: p,
        })
        .collect();
    let model = FittedModel {
        theta: sol.theta_hat.clone(),
        basis,
        feature_names: loaded.feature_names,
        label_map: loaded.label_map.clone(),
        standardization: loaded.standardization,
        log_el: sol.log_el,
        converged: sol.converged,
    };
    bundle.json("model.json", &model)?;
    bundle.csv("weights.csv", &weights)?;
    bundle.json(
        "fit.json",
        &FitReport {
            log_el: sol.log_el,
            converged: sol.converged,
            iterations: sol.trace.iterations.len(),
            pi_hat: sol.theta_hat.proportions(),
            lambda: &sol.lambda_hat.lambda,
            standard_errors,
            checks: FitChecks::of(&sol, &data),
            diagnostics: &sol.diagnostics,
            trace: &sol.trace,
        },
    )?;
    bundle.manifest.label_map = Some(loaded.label_map);
    finish(bundle)
}

fn cmd_ci(cmd: &Command, a: &CiArgs) -> Result<()> {
    let (loaded, basis) = load(&a.data)?;
    let k_known = loaded.dataset.k_known();
    let classes: Vec<usize> = if a.k.is_empty() { (1..=k_known).collect() } else { a.k.clone() };
    if let Some(&bad) = classes.iter().find(|&&c| c > k_known) {
        return Err(OslsError::InvalidInput(format!("--k {bad} outside 0..={k_known}")));
    }
    let mut bundle = start_bundle(cmd, &a.out, &[&a.data.train, &a.data.test])?;
    let data = ModelData::new(&loaded.dataset, &basis)?;
    let config = a.em.config();
    let mele = fit_prepared(&data, &config)?;
    let mut intervals = Vec::new();
    for &c in &classes {
        let mut engine = ProfileEngine::new(&data, &config, mele.clone(), c)?;
        let ci = engine.interval(a.level)?;
        if a.grid_points > 1 {
            let pad = 0.25 * ci.width().max(1e-3);
            let lo = (ci.lower - pad).max(1e-6);
            let hi = (ci.upper + pad).min(1.0 - 1e-6);
            let grid: Vec<f64> = (0..a.grid_points)
                .map(|i| lo + (hi - lo) * i as f64 / (a.grid_points - 1) as f64)
                .collect();
            engine.evaluate_grid(&grid)?;
        }
        let points: Vec<ElrPoint> = engine.curve().points;
        bundle.csv(&format!("elr_curve_k{c}.csv"), &points)?;
        intervals.push(ci);
    }
    bundle.json("intervals.json", &intervals)?;
    bundle.manifest.label_map = Some(loaded.label_map);
    finish(bundle)
}

#[derive(Serialize)]
struct LabelRow {
    row: usize,
    class: usize,
    /// Raw training label, empty for the novel class.
    label: Option<i64>,
}

fn truth_indices(map: &LabelMap, raw: &[i64], novel: Option<i64>) -> Result<Vec<usize>> {
    raw.iter()
        .map(|&v| match novel {
            Some(n) if v == n => Ok(map.k()),
            _ => map.index_of(v),
        })
        .collect()
}

fn cmd_classify(cmd: &Command, a: &ClassifyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.model)?;
    let model: FittedModel = serde_json::from_str(&text)?;
    model.theta.validate()?;
    let table = model.load_features(&a.features, a.truth.as_deref())?;
    let cost = match &a.cost {
        Some(p) => load_cost_matrix(p)?,
        None => CostMatrix::uniform(model.theta.k() + 1),
    };
    let mut inputs: Vec<&Path> = vec![&a.model, &a.features];
    if let Some(c) = &a.cost {
        inputs.push(c);
    }
    let mut bundle = start_bundle(cmd, &a.out, &inputs)?;
    let labels = classify_rows(&model.theta, &table.x, &model.basis, &cost)?;
    let rows: Vec<LabelRow> = labels
        .iter()
        .enumerate()
        .map(|(row, &class)| LabelRow { row, class, label: model.label_map.raw(class) })
        .collect();
    bundle.csv("labels.csv", &rows)?;
    if let Some(raw) = &table.labels {
        let truth = truth_indices(&model.label_map, raw, a.novel_label)?;
        let report = classification_report(&labels, &truth, &cost, None)?;
        bundle.json("report.json", &report)?;
    }
    bundle.manifest.label_map = Some(model.label_map);
    finish(bundle)
}

fn cmd_simulate(cmd: &Command, a: &SimulateArgs) -> Result<()> {
    let em = EmConfig { tol: a.tol, n_starts: a.starts, ..EmConfig::default() };
    if let Some(path) = &a.external {
        return simulate_external(cmd, a, path, &em);
    }
    let scenario_path = a.scenario.as_ref().expect("validated");
    let mut specs = load_scenarios(scenario_path)?;
    if let Some(r) = a.reps {
        specs.iter_mut().for_each(|s| s.replications = r);
    }
    let mut bundle = start_bundle(cmd, &a.out, &[scenario_path])?;
    let options = StudyOptions { em: em.clone(), intervals: !a.no_intervals, ..StudyOptions::default() };
    let mut table = MetricsTable::default();
    let mut records = Vec::new();
    for spec in &specs {
        let outcome = run_study(spec, &options)?;
        table.append(outcome.table);
        records.push(serde_json::json!({ "scenario": spec.name, "records": outcome.records }));
    }
    bundle.raw("metrics.csv", table.to_csv()?.as_bytes())?;
    bundle.raw("accuracy.csv", table.accuracy_csv()?.as_bytes())?;
    bundle.json("replicates.json", &records)?;
    if !a.accuracy_grid.is_empty() {
        let mut curve = MetricsTable::default();
        for spec in &specs {
            curve.append(run_accuracy_curve(spec, &a.accuracy_grid, a.accuracy_reps, &em)?);
        }
        bundle.raw("accuracy_curve.csv", curve.accuracy_csv()?.as_bytes())?;
    }
    finish(bundle)
}

fn simulate_external(cmd: &Command, a: &SimulateArgs, path: &Path, em: &EmConfig) -> Result<()> {
    let spec: ExternalSpec = match &a.protocol {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => ExternalSpec::default(),
    };
    let mut spec = spec;
    if let Some(r) = a.reps {
        spec.repetitions = r;
    }
    let table = load_table(path, Some(&a.label), None)?;
    let raw = table.labels.as_deref().unwrap_or_default();
    let all = LabelMap::from_labels(raw);
    let novel = a.novel_label.or_else(|| all.labels.last().copied()).expect("non-empty table");
    all.index_of(novel)?;
    // Known labels keep their sorted order; the novel label goes last.
    let mut order: Vec<i64> = all.labels.iter().copied().filter(|&v| v != novel).collect();
    order.push(novel);
    let k = order.len() - 1;
    let y: Vec<usize> = raw.iter().map(|v| order.iter().position(|o| o == v).expect("seen")).collect();
    // Standardised over the whole file before splitting.
    let x = Standardization::fit(&table.x, &table.feature_names)?.apply(&table.x)?;
    let mut inputs: Vec<&Path> = vec![path];
    if let Some(p) = &a.protocol {
        inputs.push(p);
    }
    let mut bundle = start_bundle(cmd, &a.out, &inputs)?;
    let outcome = run_external(&x, &y, k, &spec, em)?;
    bundle.json("external.json", &outcome)?;
    bundle.manifest.label_map = Some(LabelMap { labels: order });
    finish(bundle)
}

#[derive(Serialize, Deserialize)]
struct DatasetSummary {
    n: usize,
    m: usize,
    d: usize,
    class_counts: Vec<usize>,
}

fn cmd_diagnose(cmd: &Command, a: &DiagnoseArgs) -> Result<()> {
    let (loaded, basis) = load(&a.data)?;
    let model: Option<FittedModel> = match &a.model {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let mut inputs: Vec<&Path> = vec![&a.data.train, &a.data.test];
    if let Some(m) = &a.model {
        inputs.push(m);
    }
    let mut bundle = start_bundle(cmd, &a.out, &inputs)?;
    let ds = &loaded.dataset;
    let report = assumption_diagnostics(ds, &basis, model.as_ref().map(|m| &m.theta))?;
    bundle.json(
        "diagnostics.json",
        &serde_json::json!({
            "dataset": DatasetSummary { n: ds.n(), m: ds.m(), d: ds.dim(), class_counts: ds.class_counts() },
            "assumptions": report,
        }),
    )?;
    bundle.manifest.label_map = Some(loaded.label_map);
    finish(bundle)
}

fn finish(bundle: ResultBundle) -> Result<()> {
    let path = bundle.finish()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Applies `OSLSEL_THREADS` to the global worker pool (once per process).
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("OSLSEL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| OslsError::InvalidInput(format!("OSLSEL_THREADS='{value}' is not a positive integer")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cmd: &Command) -> Result<()> {
    configure_threads()?;
    cmd.validate()?;
    match cmd {
        Command::Fit(a) => cmd_fit(cmd, a),
        Command::Ci(a) => cmd_ci(cmd, a),
        Command::Classify(a) => cmd_classify(cmd, a),
        Command::Simulate(a) => cmd_simulate(cmd, a),
        Command::Diagnose(a) => cmd_diagnose(cmd, a),
    }
}

pub fn exit_code(err: &OslsError) -> i32 {
    if err.is_validation() {
        EXIT_INVALID
    } else {
        EXIT_SOLVER
    }
}

fn error_json(kind: &str, message: &str, code: i32) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": code } }).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return EXIT_OK;
            }
            eprintln!("{}", error_json("usage", &e.to_string(), EXIT_INVALID));
            return EXIT_INVALID;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == EXIT_INVALID { "invalid_input" } else { "solver_failure" };
            eprintln!("{}", error_json(kind, &e.to_string(), code));
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_flags() {
        assert_eq!(parse_basis("identity", 3).unwrap(), BasisSpec::Identity);
        assert_eq!(parse_basis("polynomial:2", 3).unwrap(), BasisSpec::Polynomial { degree: 2 });
        assert_eq!(parse_basis("precomputed", 4).unwrap(), BasisSpec::Precomputed { q: 4 });
        assert!(parse_basis("polynomial:0", 1).is_err());
        assert!(parse_basis("spline", 1).is_err());
    }

    #[test]
    fn usage_error_exits_2() {
        assert_eq!(run(["oslsel", "fit", "--bogus"]), EXIT_INVALID);
        assert_eq!(run(["oslsel", "--version"]), EXIT_OK);
    }
}
