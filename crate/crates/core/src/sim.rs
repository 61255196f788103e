//! Simulation harness: Gaussian class-conditional designs, Table-1 style
//! replication studies (relative bias, RMSE, coverage of likelihood ratio
//! intervals) and accuracy curves over the novel-class proportion.
//!
//! Replicate `r` of a scenario draws everything from stream `(seed, r)`, so
//! results do not depend on scheduling; per-replicate records are reduced in
//! replicate order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{accuracy, classify_rows, CostMatrix};
use crate::drm::{BasisSpec, ModelData, OslsDataset, Theta};
use crate::em::{fit_constrained, fit_prepared, ElSolution, EmConfig, ProportionConstraint};
use crate::error::{OslsError, Result};
use crate::inference::{plugin_covariance_prepared, ConfidenceInterval, ProfileEngine};
use crate::rng::{stream_rng, NormalSampler};

/// Mean vectors of the standard six-dimensional design, classes 0..3.
pub const DESIGN_MEANS: [[f64; 6]; 4] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0, 1.0, 0.0, 2.0, 0.0, 0.0],
    [-1.0, -2.0, -1.0, 2.0, 0.0, 0.0],
    [0.0, -1.0, -1.0, 1.0, 0.0, 0.0],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub name: String,
    /// Number of known classes `K`; `means` holds `K + 1` vectors.
    pub k: usize,
    pub means: Vec<Vec<f64>>,
    /// Lower-triangular `L` with covariance `L L'`; identity when absent.
    pub cov_factor: Option<Vec<Vec<f64>>>,
    pub n: usize,
    pub m: usize,
    /// Validation sample size drawn from the test distribution.
    pub m_star: usize,
    /// Training class fractions `n_k / n`, `k = 0..K-1`.
    pub train_fractions: Vec<f64>,
    /// Test proportions `pi_1..pi_K`.
    pub pi: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// Confidence level of the likelihood ratio intervals.
    pub level: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self::standard(1.0 / 3.0)
    }
}

impl ScenarioSpec {
    /// The six-dimensional design with `n = m = m* = 1200`,
    /// `pi = (0.2, 0.2, 0.4)` and baseline training fraction `n0_ratio`
    /// (the remaining training rows split evenly between classes 1 and 2).
    pub fn standard(n0_ratio: f64) -> Self {
        let rest = (1.0 - n0_ratio) / 2.0;
        Self {
            name: format!("n0/n={n0_ratio:.4}"),
            k: 3,
            means: DESIGN_MEANS.iter().map(|m| m.to_vec()).collect(),
            cov_factor: None,
            n: 1200,
            m: 1200,
            m_star: 1200,
            train_fractions: vec![n0_ratio, rest, rest],
            pi: vec![0.2, 0.2, 0.4],
            replications: 400,
            seed: 20240917,
            level: 0.95,
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.k == 0 || self.means.len() != self.k + 1 {
            return Err(OslsError::InvalidInput(format!(
                "scenario '{}' needs K >= 1 and K + 1 mean vectors",
                self.name
            )));
        }
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(OslsError::InvalidInput("mean vectors must share a positive length".into()));
        }
        if let Some(l) = &self.cov_factor {
            if l.len() != d || l.iter().any(|r| r.len() != d) {
                return Err(OslsError::DimensionMismatch { expected: d, found: l.len() });
            }
            for (i, row) in l.iter().enumerate() {
                if row[i] <= 0.0 || row[i + 1..].iter().any(|v| *v != 0.0) {
                    return Err(OslsError::InvalidInput(
                        "cov_factor must be lower triangular with a positive diagonal".into(),
                    ));
                }
            }
        }
        if self.train_fractions.len() != self.k
            || self.train_fractions.iter().any(|f| !(*f > 0.0))
            || (self.train_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(OslsError::InvalidInput(
                "train_fractions must hold K positive values summing to 1".into(),
            ));
        }
        if self.pi.len() != self.k
            || self.pi.iter().any(|p| !(0.0..=1.0).contains(p))
            || self.pi.iter().sum::<f64>() > 1.0 + 1e-12
        {
            return Err(OslsError::InvalidInput("pi must hold K proportions on the simplex".into()));
        }
        if self.n == 0 || self.m == 0 || self.replications == 0 {
            return Err(OslsError::InvalidInput("n, m and replications must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(OslsError::InvalidInput(format!("level {} outside (0, 1)", self.level)));
        }
        let counts = self.train_counts();
        if counts.iter().any(|&c| c == 0) {
            return Err(OslsError::InvalidInput("some training class would be empty".into()));
        }
        Ok(())
    }

    /// `n_k` for `k = 0..K-1`; classes `1..` take `floor(f_k n)` and the
    /// baseline the remainder.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut counts: Vec<usize> =
            self.train_fractions.iter().map(|f| (f * self.n as f64).floor() as usize).collect();
        let rest: usize = counts[1..].iter().sum();
        counts[0] = self.n.saturating_sub(rest);
        counts
    }

    /// `(pi_0, .., pi_K)`.
    pub fn proportions(&self) -> Vec<f64> {
        let mut full = vec![1.0 - self.pi.iter().sum::<f64>()];
        full.extend_from_slice(&self.pi);
        full
    }

    fn factor(&self) -> DMatrix<f64> {
        let d = self.dim();
        match &self.cov_factor {
            Some(l) => DMatrix::from_fn(d, d, |i, j| l[i][j]),
            None => DMatrix::identity(d, d),
        }
    }

    /// True tilts: `beta_k = S^{-1}(mu_k - mu_0)` and
    /// `alpha_k = (mu_0' S^{-1} mu_0 - mu_k' S^{-1} mu_k) / 2`.
    pub fn true_theta(&self) -> Theta {
        let l = self.factor();
        let cov = &l * l.transpose();
        let prec = cov.try_inverse().expect("validated factor is nonsingular");
        let mu = |k: usize| DVector::from_column_slice(&self.means[k]);
        let quad = |k: usize| (mu(k).transpose() * &prec * mu(k))[(0, 0)];
        let gamma = (1..=self.k)
            .map(|k| {
                let beta = &prec * (mu(k) - mu(0));
                let mut g = vec![(quad(0) - quad(k)) / 2.0];
                g.extend(beta.iter());
                g
            })
            .collect();
        Theta::new(gamma, self.pi.clone()).expect("validated scenario")
    }
}

/// One simulated data set with its ground truth.
#[derive(Clone, Debug)]
pub struct Replicate {
    pub dataset: OslsDataset,
    pub test_y: Vec<usize>,
    pub validation_x: DMatrix<f64>,
    pub validation_y: Vec<usize>,
    pub theta_true: Theta,
}

fn draw_label(sampler: &mut NormalSampler<impl rand::Rng>, cumulative: &[f64]) -> usize {
    let u = sampler.uniform();
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

fn draw_rows(
    sampler: &mut NormalSampler<impl rand::Rng>,
    spec: &ScenarioSpec,
    factor: &DMatrix<f64>,
    labels: &[usize],
) -> DMatrix<f64> {
    let d = spec.dim();
    let mut x = DMatrix::zeros(labels.len(), d);
    let mut z = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        z.iter_mut().for_each(|v| *v = sampler.standard_normal());
        for r in 0..d {
            let mut v = spec.means[y][r];
            for c in 0..=r {
                v += factor[(r, c)] * z[c];
            }
            x[(i, r)] = v;
        }
    }
    x
}

/// Replicate `index` of `spec`, drawn from stream `(spec.seed, index)`.
/// Training rows come in fixed class sizes; test and validation labels are
/// drawn from the test proportions.
pub fn generate_replicate(spec: &ScenarioSpec, index: u64) -> Result<Replicate> {
    spec.validate()?;
    let mut sampler = NormalSampler::new(stream_rng(spec.seed, index));
    let factor = spec.factor();
    let train_y: Vec<usize> = spec
        .train_counts()
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect();
    let mut cumulative = spec.proportions();
    for i in 1..cumulative.len() {
        cumulative[i] += cumulative[i - 1];
    }
    let test_y: Vec<usize> = (0..spec.m).map(|_| draw_label(&mut sampler, &cumulative)).collect();
    let validation_y: Vec<usize> =
        (0..spec.m_star).map(|_| draw_label(&mut sampler, &cumulative)).collect();
    let train_x = draw_rows(&mut sampler, spec, &factor, &train_y);
    let test_x = draw_rows(&mut sampler, spec, &factor, &test_y);
    let validation_x = draw_rows(&mut sampler, spec, &factor, &validation_y);
    Ok(Replicate {
        dataset: OslsDataset::new(train_x, train_y, test_x, spec.k)?,
        test_y,
        validation_x,
        validation_y,
        theta_true: spec.true_theta(),
    })
}

/// Options for a Table-1 style study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyOptions {
    pub em: EmConfig,
    /// Compute likelihood ratio intervals for every `pi_k`, `k = 1..K`.
    pub intervals: bool,
    /// Additional interval levels, computed on the first `extra_level_replicates`.
    pub extra_levels: Vec<f64>,
    pub extra_level_replicates: usize,
    /// Record the plug-in variance of every `sqrt(N) pi_hat_k`.
    pub covariance: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            em: EmConfig { n_starts: 2, ..EmConfig::default() },
            intervals: true,
            extra_levels: Vec::new(),
            extra_level_replicates: 0,
            covariance: true,
        }
    }
}

/// Numerical checks of one fitted solution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitChecks {
    /// `|sum_i p_i - 1|`.
    pub mass_error: f64,
    /// `max_k |sum_i p_i (exp(gamma_k' phi_e(x_i)) - 1)|`.
    pub ratio_constraint: f64,
    pub lambda_residual: f64,
    pub lambda_identity_gap: f64,
    /// Largest decrease of the EM objective between iterations.
    pub max_decrease: f64,
    pub iterations: usize,
    pub converged: bool,
    /// EM stopped on diverging tilts; the fit is not a stationary point.
    pub diverged: bool,
}

impl FitChecks {
    pub fn of(solution: &ElSolution, data: &ModelData) -> Self {
        let mut clamps = 0;
        let ratios = data.ratios(&solution.theta_hat, &mut clamps);
        let q: Vec<f64> = ratios.iter().map(|r| r - 1.0).collect();
        let k = data.k();
        let lambda = &solution.lambda_hat.lambda;
        let mut sums = vec![0.0; k];
        for row in q.chunks_exact(k) {
            let a = 1.0 + crate::drm::dot(lambda, row);
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v / a;
            }
        }
        let lambda_residual =
            sums.iter().fold(0.0f64, |m, s| m.max(s.abs())) / data.total() as f64;
        Self {
            mass_error: (solution.p_hat.total() - 1.0).abs(),
            ratio_constraint: solution.p_hat.constraint_residual(&ratios, data.k()),
            lambda_residual,
            lambda_identity_gap: solution.lambda_identity_gap(data),
            max_decrease: solution.trace.max_decrease(),
            iterations: solution.trace.iterations.len(),
            converged: solution.converged,
            diverged: solution.diagnostics.diverged,
        }
    }
}

/// Outcome of one replicate of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: u64,
    pub error: Option<String>,
    /// `(pi_hat_1, .., pi_hat_K)`.
    pub pi_hat: Vec<f64>,
    pub log_el: f64,
    /// Intervals at `spec.level` for `k = 1..K`, then any extra levels.
    pub intervals: Vec<ConfidenceInterval>,
    pub covered: Vec<bool>,
    /// Smallest likelihood ratio seen on any profile evaluation.
    pub min_elr: f64,
    /// `R_k` re-evaluated at `pi_hat_k`, per class.
    pub elr_at_mele: Vec<f64>,
    pub profile_evaluations: usize,
    /// Plug-in variance of `sqrt(N) pi_hat_k`, `k = 1..K`.
    pub scaled_variance: Vec<f64>,
    pub accuracy: f64,
    /// Max over classes of the sample L1 posterior distance to the truth.
    pub posterior_distance: f64,
    pub checks: FitChecks,
    pub boundary: bool,
}

impl ReplicateRecord {
    fn failed(index: u64, error: String) -> Self {
        Self {
            index,
            error: Some(error),
            pi_hat: Vec::new(),
            log_el: f64::NAN,
            intervals: Vec::new(),
            covered: Vec::new(),
            min_elr: f64::NAN,
            elr_at_mele: Vec::new(),
            profile_evaluations: 0,
            scaled_variance: Vec::new(),
            accuracy: f64::NAN,
            posterior_distance: f64::NAN,
            checks: FitChecks::default(),
            boundary: false,
        }
    }
}

fn posterior_l1(a: &Theta, b: &Theta, x: &DMatrix<f64>) -> Result<f64> {
    let classes = a.k() + 1;
    let mut sums = vec![0.0; classes];
    for i in 0..x.nrows() {
        let mut phi = Vec::with_capacity(x.ncols() + 1);
        phi.push(1.0);
        phi.extend(x.row(i).iter());
        let pa = crate::drm::posterior_phi(&phi, a)?;
        let pb = crate::drm::posterior_phi(&phi, b)?;
        for k in 0..classes {
            sums[k] += (pa[k] - pb[k]).abs();
        }
    }
    Ok(sums.iter().fold(0.0f64, |m, s| m.max(s / x.nrows().max(1) as f64)))
}

/// Fits replicate `index` and evaluates everything a study reports.
pub fn run_replicate(spec: &ScenarioSpec, index: u64, options: &StudyOptions) -> ReplicateRecord {
    match replicate_inner(spec, index, options) {
        Ok(r) => r,
        Err(e) => ReplicateRecord::failed(index, e.to_string()),
    }
}

fn replicate_inner(spec: &ScenarioSpec, index: u64, options: &StudyOptions) -> Result<ReplicateRecord> {
    let rep = generate_replicate(spec, index)?;
    let data = ModelData::new(&rep.dataset, &BasisSpec::Identity)?;
    let k = spec.k;
    let mele = fit_prepared(&data, &options.em)?;
    let checks = FitChecks::of(&mele, &data);
    let truth = spec.proportions();
    let mut intervals = Vec::new();
    let mut covered = Vec::new();
    let mut elr_at_mele = Vec::new();
    let mut min_elr = f64::INFINITY;
    let mut evaluations = 0;
    if options.intervals {
        let mut extra = Vec::new();
        for c in 1..=k {
            let mut engine = ProfileEngine::new(&data, &options.em, mele.clone(), c)?;
            let ci = engine.interval(spec.level)?;
            covered.push(ci.contains(truth[c]));
            intervals.push(ci);
            if index < options.extra_level_replicates as u64 {
                for &level in &options.extra_levels {
                    extra.push(engine.interval(level)?);
                }
            }
            elr_at_mele.push(engine.elr(engine.mele_value())?);
            evaluations += engine.evaluations();
            for p in engine.curve().points {
                min_elr = min_elr.min(p.elr);
            }
        }
        intervals.extend(extra);
    }
    let scaled_variance = if options.covariance {
        let cov = plugin_covariance_prepared(&mele, &data)?;
        (1..=k).map(|c| cov.pi_scaled_variance(c)).collect()
    } else {
        Vec::new()
    };
    let labels = classify_rows(&mele.theta_hat, &rep.validation_x, &BasisSpec::Identity, &CostMatrix::uniform(k + 1))?;
    Ok(ReplicateRecord {
        index,
        error: None,
        pi_hat: mele.theta_hat.pi().to_vec(),
        log_el: mele.log_el,
        intervals,
        covered,
        min_elr,
        elr_at_mele,
        profile_evaluations: evaluations,
        scaled_variance,
        accuracy: accuracy(&labels, &rep.validation_y),
        posterior_distance: posterior_l1(&mele.theta_hat, &rep.theta_true, &rep.validation_x)?,
        boundary: !mele.diagnostics.boundary_classes.is_empty(),
        checks,
    })
}

/// One row of a metrics table (values in percent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub parameter: String,
    pub truth: f64,
    pub rb: f64,
    pub rmse: f64,
    pub cp: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Mean validation accuracy of one method at one scenario point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub scenario: String,
    pub method: String,
    pub pi_novel: f64,
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub accuracy: Vec<AccuracyRow>,
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| OslsError::InvalidInput(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| OslsError::InvalidInput(e.to_string()))
}

impl MetricsTable {
    pub fn append(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
        self.accuracy.extend(other.accuracy);
    }

    /// RB / RMSE / CP rows as RFC 4180 CSV.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.rows)
    }

    pub fn accuracy_csv(&self) -> Result<String> {
        csv_string(&self.accuracy)
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Table rows from replicate records, reduced in replicate order.
pub fn summarize(spec: &ScenarioSpec, records: &[ReplicateRecord]) -> MetricsTable {
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let failures = records.len() - ok.len();
    let n = ok.len() as f64;
    let rows = (1..=spec.k)
        .map(|c| {
            let truth = spec.pi[c - 1];
            let errs: Vec<f64> = ok.iter().map(|r| r.pi_hat[c - 1] - truth).collect();
            let bias = errs.iter().sum::<f64>() / n;
            let mse = errs.iter().map(|e| e * e).sum::<f64>() / n;
            let with_ci: Vec<bool> = ok.iter().filter_map(|r| r.covered.get(c - 1).copied()).collect();
            let cp = if with_ci.is_empty() {
                f64::NAN
            } else {
                100.0 * with_ci.iter().filter(|&&b| b).count() as f64 / with_ci.len() as f64
            };
            MetricsRow {
                scenario: spec.name.clone(),
                parameter: format!("pi_{c}"),
                truth,
                rb: 100.0 * bias / truth,
                rmse: 100.0 * mse.sqrt(),
                cp,
                replicates: ok.len(),
                failures,
            }
        })
        .collect();
    let acc: Vec<f64> = ok.iter().map(|r| r.accuracy).collect();
    let (mean, se) = mean_se(&acc);
    MetricsTable {
        rows,
        accuracy: vec![AccuracyRow {
            scenario: spec.name.clone(),
            method: "mele".into(),
            pi_novel: spec.pi[spec.k - 1],
            mean,
            se,
            replicates: ok.len(),
            failures,
        }],
    }
}

/// Result of a replication study.
#[derive(Clone, Debug)]
pub struct StudyOutcome {
    pub records: Vec<ReplicateRecord>,
    pub table: MetricsTable,
}

/// Runs `spec.replications` replicates in parallel and summarises them in
/// one row per proportion.
pub fn run_study(spec: &ScenarioSpec, options: &StudyOptions) -> Result<StudyOutcome> {
    spec.validate()?;
    options.em.validate()?;
    let records: Vec<ReplicateRecord> = (0..spec.replications as u64)
        .into_par_iter()
        .map(|r| run_replicate(spec, r, options))
        .collect();
    let table = summarize(spec, &records);
    Ok(StudyOutcome { records, table })
}

/// Proportions `(pi_0, .., pi_K)` with the known classes' test shares halved
/// and the difference moved to the baseline.
pub fn misspecified_proportions(spec: &ScenarioSpec) -> Vec<f64> {
    let mut full = spec.proportions();
    for c in 1..spec.k {
        let half = full[c] / 2.0;
        full[c] -= half;
        full[0] += half;
    }
    full
}

/// Scenario with the novel-class proportion set to `pi_novel`, other known
/// test proportions unchanged and the baseline absorbing the difference.
pub fn with_novel_proportion(spec: &ScenarioSpec, pi_novel: f64) -> ScenarioSpec {
    let mut s = spec.clone();
    s.pi[spec.k - 1] = pi_novel;
    s.name = format!("{}/pi_novel={pi_novel}", spec.name);
    s
}

fn accuracy_for(
    data: &ModelData,
    rep: &Replicate,
    em: &EmConfig,
    constraint: &ProportionConstraint,
) -> Result<f64> {
    let sol = fit_constrained(data, em, constraint, None)?;
    let labels = classify_rows(&sol.theta_hat, &rep.validation_x, &BasisSpec::Identity, &CostMatrix::uniform(data.k() + 1))?;
    Ok(accuracy(&labels, &rep.validation_y))
}

pub const CURVE_METHODS: [&str; 3] = ["mele", "known_pi", "misspecified_pi"];

/// Validation accuracy against the novel-class proportion for the MELE
/// plug-in rule, the rule fitted with the true proportions held fixed, and
/// the rule fitted with misspecified proportions held fixed.
pub fn run_accuracy_curve(spec: &ScenarioSpec, grid: &[f64], replications: usize, em: &EmConfig) -> Result<MetricsTable> {
    spec.validate()?;
    em.validate()?;
    let mut table = MetricsTable::default();
    for (g, &v) in grid.iter().enumerate() {
        let point = with_novel_proportion(spec, v);
        point.validate()?;
        let known = ProportionConstraint::All(point.proportions());
        let wrong = ProportionConstraint::All(misspecified_proportions(&point));
        let results: Vec<[Option<f64>; 3]> = (0..replications as u64)
            .into_par_iter()
            .map(|r| {
                let stream = ((g as u64) << 32) | r;
                let Ok(rep) = generate_replicate(&point, stream) else { return [None; 3] };
                let Ok(data) = ModelData::new(&rep.dataset, &BasisSpec::Identity) else { return [None; 3] };
                [
                    accuracy_for(&data, &rep, em, &ProportionConstraint::Free).ok(),
                    accuracy_for(&data, &rep, em, &known).ok(),
                    accuracy_for(&data, &rep, em, &wrong).ok(),
                ]
            })
            .collect();
        for (mi, method) in CURVE_METHODS.iter().enumerate() {
            let vals: Vec<f64> = results.iter().filter_map(|r| r[mi]).collect();
            let (mean, se) = mean_se(&vals);
            table.accuracy.push(AccuracyRow {
                scenario: spec.name.clone(),
                method: (*method).into(),
                pi_novel: v,
                mean,
                se,
                replicates: vals.len(),
                failures: replications - vals.len(),
            });
        }
    }
    Ok(table)
}

/// Split protocol for a fully labelled external dataset with classes
/// `0..=K`, class `K` playing the novel class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalSpec {
    pub name: String,
    /// Share of each known class placed in the training block.
    pub train_fraction: f64,
    /// Share of the prediction set held out for validation in each repetition.
    pub validation_fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for ExternalSpec {
    fn default() -> Self {
        Self {
            name: "external".into(),
            train_fraction: 0.5,
            validation_fraction: 0.3,
            repetitions: 100,
            seed: 20240917,
            level: 0.95,
        }
    }
}

impl ExternalSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train_fraction", self.train_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(OslsError::InvalidInput(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(OslsError::InvalidInput(format!("level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

fn shuffled(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

/// Training block of `train_fraction` of every known class; the prediction
/// set holds the rest and the whole novel class. Returns the dataset and the
/// prediction-set labels.
pub fn split_external(
    x: &DMatrix<f64>,
    y: &[usize],
    k: usize,
    spec: &ExternalSpec,
) -> Result<(OslsDataset, Vec<usize>)> {
    spec.validate()?;
    if y.len() != x.nrows() {
        return Err(OslsError::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    if let Some(&bad) = y.iter().find(|&&v| v > k) {
        return Err(OslsError::InvalidInput(format!("label {bad} outside 0..={k}")));
    }
    let mut rng = stream_rng(spec.seed, 0);
    let order = shuffled(y.len(), &mut rng);
    let mut train = Vec::new();
    let mut predict = Vec::new();
    for class in 0..=k {
        let members: Vec<usize> = order.iter().copied().filter(|&i| y[i] == class).collect();
        let take = if class == k { 0 } else { (spec.train_fraction * members.len() as f64).round() as usize };
        train.extend(members.iter().map(|&i| (class, i)).take(take));
        predict.extend(members[take..].iter().copied());
    }
    let train_rows: Vec<usize> = train.iter().map(|&(_, i)| i).collect();
    let train_y: Vec<usize> = train.iter().map(|&(c, _)| c).collect();
    let dataset = OslsDataset::new(select_rows(x, &train_rows), train_y, select_rows(x, &predict), k)?;
    Ok((dataset, predict.iter().map(|&i| y[i]).collect()))
}

/// Estimates, intervals and split-protocol accuracies on an external dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalOutcome {
    pub name: String,
    pub n: usize,
    pub m: usize,
    /// Empirical prediction-set proportions `pi_0..pi_K`.
    pub empirical_pi: Vec<f64>,
    /// `pi_hat_0..pi_hat_K`.
    pub pi_hat: Vec<f64>,
    /// Likelihood ratio intervals for `pi_0..pi_K`.
    pub intervals: Vec<ConfidenceInterval>,
    /// Validation accuracy per repetition (`NaN` when the fit failed).
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub failures: usize,
}

pub fn run_external(x: &DMatrix<f64>, y: &[usize], k: usize, spec: &ExternalSpec, em: &EmConfig) -> Result<ExternalOutcome> {
    em.validate()?;
    let (dataset, predict_y) = split_external(x, y, k, spec)?;
    let data = ModelData::new(&dataset, &BasisSpec::Identity)?;
    let mele = fit_prepared(&data, em)?;
    let intervals = (0..=k)
        .map(|c| ProfileEngine::new(&data, em, mele.clone(), c)?.interval(spec.level))
        .collect::<Result<Vec<_>>>()?;
    let m = predict_y.len();
    let empirical_pi = (0..=k).map(|c| predict_y.iter().filter(|&&v| v == c).count() as f64 / m as f64).collect();
    let held = (spec.validation_fraction * m as f64).round() as usize;
    let accuracies: Vec<f64> = (0..spec.repetitions as u64)
        .into_par_iter()
        .map(|r| {
            let order = shuffled(m, &mut stream_rng(spec.seed, r + 1));
            let (valid, test) = order.split_at(held);
            let run = || -> Result<f64> {
                let ds = OslsDataset::new(
                    dataset.train_x().clone(),
                    dataset.train_y().to_vec(),
                    select_rows(dataset.test_x(), test),
                    k,
                )?;
                let sol = fit_prepared(&ModelData::new(&ds, &BasisSpec::Identity)?, em)?;
                let labels = classify_rows(&sol.theta_hat, &select_rows(dataset.test_x(), valid), &BasisSpec::Identity, &CostMatrix::uniform(k + 1))?;
                let truth: Vec<usize> = valid.iter().map(|&i| predict_y[i]).collect();
                Ok(accuracy(&labels, &truth))
            };
            run().unwrap_or(f64::NAN)
        })
        .collect();
    let ok: Vec<f64> = accuracies.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(ExternalOutcome {
        name: spec.name.clone(),
        n: dataset.n(),
        m,
        empirical_pi,
        pi_hat: mele.theta_hat.proportions(),
        intervals,
        mean_accuracy: ok.iter().sum::<f64>() / ok.len().max(1) as f64,
        failures: accuracies.len() - ok.len(),
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drm::log_density_ratio;

    fn tiny(n: usize) -> ScenarioSpec {
        let mut s = ScenarioSpec::standard(1.0 / 3.0);
        s.n = n;
        s.m = n;
        s.m_star = 200;
        s
    }

    fn normal_log_pdf(x: &[f64], mean: &[f64]) -> f64 {
        let d = x.len() as f64;
        let q: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
        -0.5 * q - 0.5 * d * std::f64::consts::TAU.ln()
    }

    #[test]
    fn true_tilts_of_the_standard_design() {
        let spec = ScenarioSpec::standard(1.0 / 3.0);
        let theta = spec.true_theta();
        // (|mu_0|^2 - |mu_1|^2) / 2 with |mu_1|^2 = 6.
        assert!((theta.alpha(1) + 3.0).abs() < 1e-12);
        for (b, m) in theta.beta(1).iter().zip(DESIGN_MEANS[1]) {
            assert!((b - m).abs() < 1e-12);
        }
        let mut sampler = NormalSampler::new(stream_rng(1, 0));
        for _ in 0..3 {
            let x: Vec<f64> = (0..6).map(|_| 1.5 * sampler.standard_normal()).collect();
            for k in 1..=3 {
                let direct = normal_log_pdf(&x, &DESIGN_MEANS[k]) - normal_log_pdf(&x, &DESIGN_MEANS[0]);
                let model = log_density_ratio(&x, &BasisSpec::Identity, &theta, k).unwrap();
                assert!((direct - model).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_means_give_zero_tilts() {
        let mut spec = tiny(50);
        spec.means = vec![vec![0.3; 6]; 4];
        assert!(spec.true_theta().gamma_flat().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn test_labels_follow_proportions() {
        let mut spec = tiny(10);
        spec.m = 1_000_000;
        spec.m_star = 1;
        let rep = generate_replicate(&spec, 0).unwrap();
        let truth = spec.proportions();
        for (k, t) in truth.iter().enumerate() {
            let freq = rep.test_y.iter().filter(|&&y| y == k).count() as f64 / spec.m as f64;
            assert!((freq - t).abs() < 0.002, "class {k}: {freq}");
        }
    }

    #[test]
    fn replicates_are_reproducible() {
        let spec = tiny(40);
        let a = generate_replicate(&spec, 3).unwrap();
        let b = generate_replicate(&spec, 3).unwrap();
        let c = generate_replicate(&spec, 4).unwrap();
        assert_eq!(a.dataset.test_x(), b.dataset.test_x());
        assert_ne!(a.dataset.test_x(), c.dataset.test_x());
        assert_eq!(a.dataset.class_counts(), vec![14, 13, 13]);
    }

    #[test]
    fn single_replicate_metrics() {
        let mut spec = tiny(200);
        spec.replications = 1;
        let options = StudyOptions::default();
        let outcome = run_study(&spec, &options).unwrap();
        let record = &outcome.records[0];
        assert!(record.error.is_none(), "{:?}", record.error);
        for (c, row) in outcome.table.rows.iter().enumerate() {
            assert!(row.cp == 0.0 || row.cp == 100.0);
            let err = (record.pi_hat[c] - spec.pi[c]).abs();
            assert!((row.rmse - 100.0 * err).abs() < 1e-12);
        }
        assert!(record.checks.mass_error < 1e-10 && record.min_elr >= -1e-8);
    }

    #[test]
    fn misspecified_proportions_move_mass_to_baseline() {
        let spec = ScenarioSpec::standard(1.0 / 3.0);
        let wrong = misspecified_proportions(&spec);
        let expected = [0.4, 0.1, 0.1, 0.4];
        for (a, b) in wrong.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let shifted = with_novel_proportion(&spec, 0.5);
        assert!((shifted.proportions()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn vanishing_novel_class_still_completes() {
        let spec = tiny(150);
        let table = run_accuracy_curve(&spec, &[1e-3], 2, &EmConfig { n_starts: 1, ..EmConfig::default() }).unwrap();
        assert_eq!(table.accuracy.len(), CURVE_METHODS.len());
        assert!(table.accuracy.iter().all(|r| r.replicates + r.failures == 2));
    }

    #[test]
    fn external_split_sizes() {
        let y: Vec<usize> = (0..2000).map(|i| i / 500).collect();
        let x = DMatrix::from_fn(2000, 2, |r, c| (r * (c + 1)) as f64 % 7.0);
        let (ds, predict_y) = split_external(&x, &y, 3, &ExternalSpec::default()).unwrap();
        assert_eq!(ds.n(), 750);
        assert_eq!(ds.m(), 1250);
        assert_eq!(predict_y.iter().filter(|&&v| v == 3).count(), 500);
    }
}
