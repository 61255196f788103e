//! EM computation of the maximum empirical likelihood estimate.
//!
//! E-step: responsibilities `w_jk` of the test rows. M-step: proportions are
//! column means of `w`; the tilts come from a `(K+1)`-class weighted
//! multinomial logistic fit on the pooled sample (training rows carry weight
//! one on their own class, test row `j` carries `w_jk` on class `k`), whose
//! intercepts `alpha*_k` map back through
//! `alpha_k = alpha*_k - log((n_k + s_k) / (n_0 + s_0))`, `s_k = sum_j w_jk`;
//! the baseline masses are proportional to `1 / (1 + sum_k exp(alpha*_k + beta_k' phi))`.
//!
//! The same iteration with the proportion update replaced by a constrained
//! one gives the profile fits used for likelihood ratio intervals.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drm::{dot, BasisSpec, ModelData, OslsDataset, Theta};
use crate::el::{
    solve_lambda_q, test_mixture_term, train_linear_term, ElWeights, LambdaSolution,
};
use crate::error::{OslsError, Result};
use crate::logit::{fit_weighted_logit, LogitDesign, NewtonControls};
use crate::rng::{stream_rng, NormalSampler};

/// Proportions are floored here in unconstrained fits.
pub const PI_FLOOR: f64 = 1e-10;
/// Effective class weight below which a class is dropped from the M-step.
const INACTIVE_WEIGHT: f64 = 1e-12;
/// EM stops once some fitted log density ratio exceeds this.
/// EM tolerance of the reported MELE. EM converges linearly, so the
/// remaining gap is a few times the last gain.
pub const MELE_TOL: f64 = 1e-11;
/// M-step gradient tolerance while polishing. With looser inner solves the
/// log-EL gains near `MELE_TOL` drown in the M-step error and EM stops on a
/// small decrease.
pub const MELE_NEWTON_TOL: f64 = 1e-12;
const DIVERGENCE_EXPONENT: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop once the log-EL gains less than this in one iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 2000, n_starts: 5, seed: 0, newton_tol: 1e-9, newton_max_iter: 100 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(OslsError::InvalidInput(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 || self.n_starts == 0 || self.newton_max_iter == 0 {
            return Err(OslsError::InvalidInput(
                "max_iter, n_starts and newton_max_iter must be at least 1".into(),
            ));
        }
        if !(self.newton_tol > 0.0) {
            return Err(OslsError::InvalidInput("newton_tol must be positive".into()));
        }
        Ok(())
    }

    fn newton(&self) -> NewtonControls {
        NewtonControls { tol: self.newton_tol, max_iter: self.newton_max_iter }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    /// Log-EL of the iterate with masses from the M-step (constant `-N log N` dropped).
    pub log_el: f64,
    pub pi: Vec<f64>,
    pub inner_iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
}

impl EmTrace {
    /// Largest drop of the log-EL between consecutive iterations (0 if none).
    pub fn max_decrease(&self) -> f64 {
        self.iterations
            .windows(2)
            .map(|w| w[0].log_el - w[1].log_el)
            .fold(0.0, f64::max)
    }
}

/// How the mixing proportions are treated in the M-step.
#[derive(Clone, Debug, PartialEq)]
pub enum ProportionConstraint {
    Free,
    /// `pi_class = value`; `class = 0` fixes the baseline proportion.
    Fixed { class: usize, value: f64 },
    /// All of `(pi_0, .., pi_K)` held at the given values.
    All(Vec<f64>),
}

impl ProportionConstraint {
    fn validate(&self, k: usize) -> Result<()> {
        match self {
            ProportionConstraint::Free => Ok(()),
            ProportionConstraint::Fixed { class, value } => {
                if *class > k {
                    return Err(OslsError::InvalidInput(format!("class {class} outside 0..={k}")));
                }
                if !(0.0..=1.0).contains(value) {
                    return Err(OslsError::Infeasible(format!(
                        "proportion {value} outside [0, 1]"
                    )));
                }
                Ok(())
            }
            ProportionConstraint::All(pi) => {
                if pi.len() != k + 1 {
                    return Err(OslsError::DimensionMismatch { expected: k + 1, found: pi.len() });
                }
                let total: f64 = pi.iter().sum();
                if pi.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
                    return Err(OslsError::Infeasible(format!(
                        "proportions {pi:?} are not on the simplex"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Moves the proportions of `theta` onto the constraint set.
    fn project(&self, theta: &mut Theta) {
        let k = theta.k();
        match self {
            ProportionConstraint::Free => {}
            ProportionConstraint::Fixed { class, value } => {
                let mut full = theta.proportions();
                let others: f64 = (0..=k).filter(|l| l != class).map(|l| full[l]).sum();
                for l in 0..=k {
                    if l == *class {
                        full[l] = *value;
                    } else if others > 0.0 {
                        full[l] *= (1.0 - value) / others;
                    } else {
                        full[l] = (1.0 - value) / k as f64;
                    }
                }
                theta.pi_mut().copy_from_slice(&full[1..]);
            }
            ProportionConstraint::All(pi) => theta.pi_mut().copy_from_slice(&pi[1..]),
        }
    }
}

/// Diagnostics collected over a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Classes whose proportion hit the floor.
    pub boundary_classes: Vec<usize>,
    /// Fitted tilts nearly vanish (classes indistinguishable from the baseline).
    pub degenerate: bool,
    /// EM stopped because the tilts were diverging (no finite maximiser).
    pub diverged: bool,
    pub exp_clamps: usize,
    pub warnings: Vec<String>,
    /// Index of the start that produced the solution.
    pub start: usize,
}

/// Fitted maximum empirical likelihood solution.
#[derive(Clone, Debug)]
pub struct ElSolution {
    pub theta_hat: Theta,
    pub p_hat: ElWeights,
    pub lambda_hat: LambdaSolution,
    /// Profile log-EL at `theta_hat` (constant `-N log N` dropped).
    pub log_el: f64,
    pub trace: EmTrace,
    pub converged: bool,
    /// Row-major `m x (K+1)` responsibilities behind the final M-step.
    pub w: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl ElSolution {
    pub fn k(&self) -> usize {
        self.theta_hat.k()
    }

    /// Responsibility row of test observation `j`.
    pub fn responsibilities(&self, j: usize) -> &[f64] {
        let width = self.k() + 1;
        &self.w[j * width..(j + 1) * width]
    }

    /// `s_k = sum_j w_jk` for `k = 0..=K`.
    pub fn responsibility_sums(&self) -> Vec<f64> {
        column_sums(&self.w, self.k() + 1)
    }

    /// `max_k |lambda_k - (n_k + s_k) / N|`.
    pub fn lambda_identity_gap(&self, data: &ModelData) -> f64 {
        let counts = data.counts_with_novel();
        let sums = self.responsibility_sums();
        let nf = data.total() as f64;
        (1..=self.k())
            .map(|k| (self.lambda_hat.lambda[k - 1] - (counts[k] + sums[k]) / nf).abs())
            .fold(0.0, f64::max)
    }
}

fn column_sums(w: &[f64], width: usize) -> Vec<f64> {
    let mut s = vec![0.0; width];
    for row in w.chunks_exact(width) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// Test-block ratios `exp(gamma_k' phi_e(x_j))`, row-major `m x K`.
fn test_ratios(theta: &Theta, data: &ModelData, clamps: &mut usize) -> Vec<f64> {
    let k = data.k();
    let mut out = Vec::with_capacity(data.m() * k);
    for j in 0..data.m() {
        let row = data.row(data.n() + j);
        for c in 1..=k {
            out.push(crate::drm::clamped_exp(dot(theta.gamma(c), row), clamps));
        }
    }
    out
}

fn responsibilities_from_ratios(theta: &Theta, ratios: &[f64]) -> Result<Vec<f64>> {
    let k = theta.k();
    let pi = theta.pi();
    let pi0 = 1.0 - pi.iter().sum::<f64>();
    let mut w = Vec::with_capacity(ratios.len() / k * (k + 1));
    for (j, r) in ratios.chunks_exact(k).enumerate() {
        let b = pi0 + dot(pi, r);
        if b <= 0.0 || !b.is_finite() {
            return Err(OslsError::NonpositiveMixture { row: j, value: b });
        }
        let start = w.len();
        w.push(0.0);
        let mut known = 0.0;
        for c in 0..k {
            let v = pi[c] * r[c] / b;
            known += v;
            w.push(v);
        }
        w[start] = (1.0 - known).max(0.0);
    }
    Ok(w)
}

/// E-step on prepared data: row-major `m x (K+1)` responsibilities.
pub fn e_step_prepared(theta: &Theta, data: &ModelData) -> Result<Vec<f64>> {
    let mut clamps = 0;
    responsibilities_from_ratios(theta, &test_ratios(theta, data, &mut clamps))
}

/// E-step for raw test features: one row of `K + 1` responsibilities per test row.
pub fn e_step(theta: &Theta, test_x: &DMatrix<f64>, basis: &BasisSpec) -> Result<Vec<Vec<f64>>> {
    let k = theta.k();
    let mut clamps = 0;
    let mut ratios = Vec::with_capacity(test_x.nrows() * k);
    for j in 0..test_x.nrows() {
        let x: Vec<f64> = test_x.row(j).iter().copied().collect();
        let phi = crate::drm::expand_basis(&x, basis)?;
        if phi.len() != theta.dim() {
            return Err(OslsError::DimensionMismatch { expected: theta.dim(), found: phi.len() });
        }
        for c in 1..=k {
            ratios.push(crate::drm::clamped_exp(dot(theta.gamma(c), &phi), &mut clamps));
        }
    }
    let w = responsibilities_from_ratios(theta, &ratios)?;
    Ok(w.chunks_exact(k + 1).map(<[f64]>::to_vec).collect())
}

/// `pi_k = (1/m) sum_j w_jk` for `k = 1..=K`.
pub fn m_step_pi(w: &[Vec<f64>]) -> Vec<f64> {
    let width = w.first().map_or(0, Vec::len);
    let m = w.len() as f64;
    (1..width).map(|k| w.iter().map(|row| row[k]).sum::<f64>() / m).collect()
}

/// Tilt update from the weighted multinomial logistic fit.
#[derive(Clone, Debug)]
pub struct GammaUpdate {
    /// Row-major `K x (q+1)` tilts `(alpha_k, beta_k)`.
    pub gamma: Vec<f64>,
    /// `alpha*_k`; `-inf` for classes with no effective weight.
    pub alpha_star: Vec<f64>,
    /// Effective class sizes `n_k + s_k`, `k = 0..=K`.
    pub class_weights: Vec<f64>,
    pub newton_iterations: usize,
    /// Unnormalised baseline factors `1 / (1 + sum_k exp(alpha*_k + beta_k' phi(x_i)))`.
    pub baseline: Vec<f64>,
}

/// Maximises the M-step objective in the tilts, warm-started at `warm`.
pub fn m_step_gamma(
    w: &[f64],
    data: &ModelData,
    warm: &[f64],
    controls: NewtonControls,
) -> Result<GammaUpdate> {
    let k = data.k();
    let dim = data.dim();
    let width = k + 1;
    if w.len() != data.m() * width {
        return Err(OslsError::DimensionMismatch { expected: data.m() * width, found: w.len() });
    }
    let mut class_weights = data.counts_with_novel();
    for (acc, s) in class_weights.iter_mut().zip(column_sums(w, width)) {
        *acc += s;
    }
    if class_weights[0] <= 0.0 {
        return Err(OslsError::DegenerateParameter("baseline class has no weight".into()));
    }
    let active: Vec<bool> =
        (1..=k).map(|c| class_weights[c] > INACTIVE_WEIGHT * data.total() as f64).collect();
    let log_ratio = |c: usize| (class_weights[c] / class_weights[0]).ln();

    let mut targets = vec![0.0; data.total() * width];
    for (i, &y) in data.labels().iter().enumerate() {
        targets[i * width + y] = 1.0;
    }
    targets[data.n() * width..].copy_from_slice(w);

    let mut init = warm.to_vec();
    for c in 1..=k {
        if active[c - 1] {
            init[(c - 1) * dim] += log_ratio(c);
        }
    }
    let design = LogitDesign::new(data.design(), dim, data.outer_products());
    let fit = fit_weighted_logit(&design, &targets, k, &active, &init, controls)?;

    let mut gamma = fit.coef;
    let mut alpha_star = vec![f64::NEG_INFINITY; k];
    for c in 1..=k {
        if active[c - 1] {
            alpha_star[c - 1] = gamma[(c - 1) * dim];
            gamma[(c - 1) * dim] -= log_ratio(c);
        }
    }
    Ok(GammaUpdate {
        gamma,
        alpha_star,
        class_weights,
        newton_iterations: fit.iterations,
        baseline: fit.p0,
    })
}

/// Baseline masses `p_i` proportional to
/// `[1 + sum_k exp(alpha*_k + beta_k' phi(x_i))]^{-1}`, normalised to sum to
/// one. At the logistic optimum the normalising constant is `n_0 + s_0`.
pub fn m_step_p(alpha_star: &[f64], beta: &[Vec<f64>], data: &ModelData) -> Result<ElWeights> {
    let k = data.k();
    if alpha_star.len() != k || beta.len() != k {
        return Err(OslsError::DimensionMismatch { expected: k, found: alpha_star.len() });
    }
    let mut clamps = 0;
    let mut p: Vec<f64> = data
        .rows()
        .map(|row| {
            let mut denom = 1.0;
            for c in 0..k {
                if alpha_star[c].is_finite() {
                    let eta = alpha_star[c] + dot(&beta[c], &row[1..]);
                    denom += crate::drm::clamped_exp(eta, &mut clamps);
                }
            }
            1.0 / denom
        })
        .collect();
    normalise(&mut p);
    Ok(ElWeights { p })
}

fn normalise(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
}

/// Logistic fit of the training block alone; gives `gamma_1..gamma_{K-1}`
/// and sets `gamma_K` to their average.
fn training_start(data: &ModelData, controls: NewtonControls) -> Result<Vec<f64>> {
    let k = data.k();
    let dim = data.dim();
    let width = k + 1;
    let mut targets = vec![0.0; data.total() * width];
    for (i, &y) in data.labels().iter().enumerate() {
        targets[i * width + y] = 1.0;
    }
    let active: Vec<bool> = (1..=k).map(|c| c < k).collect();
    let design = LogitDesign::new(data.design(), dim, data.outer_products());
    let fit = fit_weighted_logit(&design, &targets, k, &active, &vec![0.0; k * dim], controls)?;
    let counts = data.counts_with_novel();
    let mut gamma = fit.coef;
    for c in 1..k {
        gamma[(c - 1) * dim] -= (counts[c] / counts[0]).ln();
    }
    if k > 1 {
        for d in 0..dim {
            let avg = (1..k).map(|c| gamma[(c - 1) * dim + d]).sum::<f64>() / (k - 1) as f64;
            gamma[(k - 1) * dim + d] = avg;
        }
    }
    Ok(gamma)
}

/// Initial value for start `s`: start 0 perturbs the novel-class tilt
/// slightly and uses uniform proportions; later starts draw both at random.
fn start_theta(base: &[f64], data: &ModelData, seed: u64, s: usize) -> Theta {
    let k = data.k();
    let dim = data.dim();
    let mut sampler = NormalSampler::new(stream_rng(seed, s as u64));
    let scale = if s == 0 { 0.1 } else { 1.0 };
    let mut gamma = base.to_vec();
    for d in 0..dim {
        gamma[(k - 1) * dim + d] += scale * sampler.standard_normal();
    }
    let pi = if s == 0 {
        vec![1.0 / (k + 1) as f64; k]
    } else {
        let draws: Vec<f64> = (0..=k).map(|_| sampler.exponential()).collect();
        let total: f64 = draws.iter().sum();
        let uniform = 1.0 / (k + 1) as f64;
        draws[1..].iter().map(|e| 0.5 * e / total + 0.5 * uniform).collect()
    };
    Theta::from_parts(k, dim, gamma, pi)
}

fn update_proportions(
    constraint: &ProportionConstraint,
    sums: &[f64],
    m: f64,
    boundary: &mut Vec<usize>,
) -> Vec<f64> {
    let k = sums.len() - 1;
    match constraint {
        ProportionConstraint::Free => {
            let mut pi: Vec<f64> = sums[1..].iter().map(|s| s / m).collect();
            for (c, p) in pi.iter_mut().enumerate() {
                if *p < PI_FLOOR {
                    *p = PI_FLOOR;
                    if !boundary.contains(&(c + 1)) {
                        boundary.push(c + 1);
                    }
                }
            }
            let total: f64 = pi.iter().sum();
            if 1.0 - total < PI_FLOOR {
                let scale = (1.0 - PI_FLOOR) / total;
                pi.iter_mut().for_each(|p| *p *= scale);
                if !boundary.contains(&0) {
                    boundary.push(0);
                }
            }
            pi
        }
        ProportionConstraint::Fixed { class, value } => {
            let others: f64 = (0..=k).filter(|l| l != class).map(|l| sums[l]).sum();
            (1..=k)
                .map(|l| {
                    if l == *class {
                        *value
                    } else if others > 0.0 {
                        (1.0 - value) * sums[l] / others
                    } else {
                        (1.0 - value) / k as f64
                    }
                })
                .collect()
        }
        ProportionConstraint::All(pi) => pi[1..].to_vec(),
    }
}

/// One EM run from `init`.
pub fn run_em(
    data: &ModelData,
    config: &EmConfig,
    constraint: &ProportionConstraint,
    init: Theta,
) -> Result<ElSolution> {
    let k = data.k();
    let dim = data.dim();
    let m = data.m() as f64;
    let nf = data.total() as f64;
    let controls = config.newton();
    if data.m() == 0 {
        return Err(OslsError::InvalidInput("cannot fit without test rows".into()));
    }
    let mut theta = init;
    constraint.project(&mut theta);
    let mut diagnostics = FitDiagnostics::default();
    let mut clamps = 0;
    let mut ratios = test_ratios(&theta, data, &mut clamps);
    let mut trace = EmTrace::default();
    let mut converged = false;
    let mut w = Vec::new();

    for r in 1..=config.max_iter {
        w = responsibilities_from_ratios(&theta, &ratios)?;
        let sums = column_sums(&w, k + 1);
        let pi = update_proportions(constraint, &sums, m, &mut diagnostics.boundary_classes);
        let update = m_step_gamma(&w, data, theta.gamma_flat(), controls)?;
        let mut next = Theta::from_parts(k, dim, update.gamma, pi);

        let mut baseline = update.baseline;
        normalise(&mut baseline);
        // Classes that dropped out keep their slope; their intercept makes
        // the class density integrate to one under the new masses.
        for c in 1..=k {
            if !update.alpha_star[c - 1].is_finite() {
                let mass: f64 = data
                    .rows()
                    .zip(&baseline)
                    .map(|(row, p)| p * crate::drm::clamped_exp(dot(&next.gamma(c)[1..], &row[1..]), &mut clamps))
                    .sum();
                next.gamma_mut(c)[0] = -mass.ln();
            }
        }

        let peak = data
            .rows()
            .flat_map(|row| (1..=k).map(move |c| (c, row)))
            .fold(f64::NEG_INFINITY, |acc, (c, row)| acc.max(dot(next.gamma(c), row)));
        if peak > DIVERGENCE_EXPONENT {
            diagnostics.degenerate = true;
            diagnostics.diverged = true;
            diagnostics.warnings.push(format!(
                "tilts diverging at iteration {r} (log density ratio {peak:.1}); the likelihood \
                 has no finite maximiser and the last finite iterate is reported"
            ));
            break;
        }
        ratios = test_ratios(&next, data, &mut clamps);
        let log_el = train_linear_term(&next, data)
            + test_mixture_term(&next, data, &ratios_pooled_view(&ratios, data))?
            + baseline.iter().map(|p| (nf * p).ln()).sum::<f64>();
        let dpi = next
            .pi()
            .iter()
            .zip(theta.pi())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        let previous = trace.iterations.last().map(|it| it.log_el);
        trace.iterations.push(EmIteration {
            iteration: r,
            log_el,
            pi: next.pi().to_vec(),
            inner_iterations: update.newton_iterations,
        });
        theta = next;
        if let Some(prev) = previous {
            let pi_moving = !matches!(constraint, ProportionConstraint::All(_));
            if log_el - prev < config.tol || (pi_moving && dpi < config.tol / 10.0) {
                converged = true;
                break;
            }
        }
    }
    finish(data, theta, w, trace, converged, diagnostics, clamps)
}

/// Pads test ratios so `test_mixture_term` can index pooled rows.
fn ratios_pooled_view(test: &[f64], data: &ModelData) -> Vec<f64> {
    let mut pooled = vec![0.0; data.n() * data.k()];
    pooled.extend_from_slice(test);
    pooled
}

fn finish(
    data: &ModelData,
    theta: Theta,
    w: Vec<f64>,
    trace: EmTrace,
    converged: bool,
    mut diagnostics: FitDiagnostics,
    mut clamps: usize,
) -> Result<ElSolution> {
    let k = data.k();
    let capped = !converged && !diagnostics.diverged;
    let ratios = data.ratios(&theta, &mut clamps);
    let q: Vec<f64> = ratios.iter().map(|r| r - 1.0).collect();
    let mut lambda_hat = solve_lambda_q(&q, k)?;
    lambda_hat.clamps = clamps;
    let nf = data.total() as f64;
    let mut log_el = train_linear_term(&theta, data) + test_mixture_term(&theta, data, &ratios)?;
    let mut p = Vec::with_capacity(data.total());
    for i in 0..data.total() {
        let a = 1.0 + dot(&lambda_hat.lambda, &q[i * k..(i + 1) * k]);
        log_el -= a.ln();
        p.push(1.0 / (nf * a));
    }
    let threshold = 4.0 / nf.sqrt();
    let betas: Vec<&[f64]> = (1..=k).map(|c| theta.beta(c)).collect();
    let mut smallest = betas.iter().map(|b| norm(b)).fold(f64::INFINITY, f64::min);
    for a in 0..k {
        for b in a + 1..k {
            smallest = smallest.min(distance(betas[a], betas[b]));
        }
    }
    if smallest < threshold {
        diagnostics.degenerate = true;
        diagnostics.warnings.push(format!(
            "fitted slopes nearly coincide (min distance {smallest:.3e}); proportions are \
             weakly identified"
        ));
    }
    if !diagnostics.boundary_classes.is_empty() {
        diagnostics.boundary_classes.sort_unstable();
        diagnostics.warnings.push(format!(
            "proportions of classes {:?} reached the boundary floor {PI_FLOOR:e}",
            diagnostics.boundary_classes
        ));
    }
    if capped {
        diagnostics.warnings.push(format!(
            "EM stopped at the iteration cap ({} iterations)",
            trace.iterations.len()
        ));
    }
    diagnostics.exp_clamps = clamps;
    Ok(ElSolution {
        theta_hat: theta,
        p_hat: ElWeights { p },
        lambda_hat,
        log_el,
        trace,
        converged,
        w,
        diagnostics,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fit under a proportion constraint. With `warm`, a single EM run starts
/// from it (projected onto the constraint); otherwise `config.n_starts`
/// seeded starts run in parallel and the best log-EL wins.
pub fn fit_constrained(
    data: &ModelData,
    config: &EmConfig,
    constraint: &ProportionConstraint,
    warm: Option<&Theta>,
) -> Result<ElSolution> {
    config.validate()?;
    constraint.validate(data.k())?;
    if data.m() == 0 {
        return Err(OslsError::InvalidInput("cannot fit without test rows".into()));
    }
    if let Some(theta) = warm {
        if theta.k() != data.k() || theta.dim() != data.dim() {
            return Err(OslsError::DimensionMismatch { expected: data.dim(), found: theta.dim() });
        }
        return run_em(data, config, constraint, theta.clone());
    }
    let base = training_start(data, config.newton())?;
    let results: Vec<Result<ElSolution>> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| {
            let init = start_theta(&base, data, config.seed, s);
            run_em(data, config, constraint, init).map(|mut sol| {
                sol.diagnostics.start = s;
                sol
            })
        })
        .collect();
    let mut best: Option<ElSolution> = None;
    let mut failures = Vec::new();
    for (s, res) in results.into_iter().enumerate() {
        match res {
            Ok(sol) => {
                if best.as_ref().is_none_or(|b| sol.log_el > b.log_el) {
                    best = Some(sol);
                }
            }
            Err(e) => failures.push(format!("start {s}: {e}")),
        }
    }
    best.ok_or_else(|| OslsError::AllStartsFailed {
        starts: config.n_starts,
        details: failures.join("; "),
    })
}

/// Best of `config.n_starts` EM runs, each stopped at `config.tol`.
pub fn fit_em(data: &ModelData, config: &EmConfig) -> Result<ElSolution> {
    fit_constrained(data, config, &ProportionConstraint::Free, None)
}

/// Continues EM from `sol` down to `MELE_TOL`. The trace of the extra
/// iterations is appended to the original one. The original is kept if the
/// continuation ends lower or if its tilts were already diverging.
pub fn polish(data: &ModelData, config: &EmConfig, sol: &ElSolution) -> Result<ElSolution> {
    if sol.diagnostics.diverged {
        return Ok(sol.clone());
    }
    let tight = EmConfig {
        tol: config.tol.min(MELE_TOL),
        max_iter: config.max_iter.max(20_000),
        newton_tol: config.newton_tol.min(MELE_NEWTON_TOL),
        ..config.clone()
    };
    let mut refined = run_em(data, &tight, &ProportionConstraint::Free, sol.theta_hat.clone())?;
    if refined.log_el < sol.log_el {
        return Ok(sol.clone());
    }
    let offset = sol.trace.iterations.last().map_or(0, |it| it.iteration);
    let mut iterations = sol.trace.iterations.clone();
    iterations.extend(refined.trace.iterations.drain(..).map(|mut it| {
        it.iteration += offset;
        it
    }));
    refined.trace.iterations = iterations;
    refined.diagnostics.start = sol.diagnostics.start;
    Ok(refined)
}

pub fn fit_prepared(data: &ModelData, config: &EmConfig) -> Result<ElSolution> {
    polish(data, config, &fit_em(data, config)?)
}

/// Maximum empirical likelihood fit: best of `config.n_starts` EM runs,
/// continued to `MELE_TOL`.
pub fn fit(dataset: &OslsDataset, basis: &BasisSpec, config: &EmConfig) -> Result<ElSolution> {
    fit_prepared(&ModelData::new(dataset, basis)?, config)
}

/// Fit with `pi_k` held at `value` (`k = 0` holds the baseline proportion).
pub fn fit_with_fixed_pi(
    dataset: &OslsDataset,
    basis: &BasisSpec,
    config: &EmConfig,
    k: usize,
    value: f64,
) -> Result<ElSolution> {
    let data = ModelData::new(dataset, basis)?;
    fit_constrained(&data, config, &ProportionConstraint::Fixed { class: k, value }, None)
}

/// Fit with every proportion `(pi_0..pi_K)` held at known values; only the
/// tilts and baseline masses are estimated.
pub fn fit_with_fixed_proportions(
    dataset: &OslsDataset,
    basis: &BasisSpec,
    config: &EmConfig,
    proportions: &[f64],
) -> Result<ElSolution> {
    let data = ModelData::new(dataset, basis)?;
    fit_constrained(&data, config, &ProportionConstraint::All(proportions.to_vec()), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::el::profile_log_el_prepared;
    use crate::sim::{generate_replicate, ScenarioSpec};

    fn small_spec(n: usize) -> ScenarioSpec {
        let mut s = ScenarioSpec::standard(1.0 / 3.0);
        s.n = n;
        s.m = n;
        s.m_star = 10;
        s
    }

    #[test]
    fn e_step_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[0.3, -1.2]);
        let theta = Theta::zeros(2, 2, vec![0.3, 0.5]).unwrap();
        for row in e_step(&theta, &x, &BasisSpec::Identity).unwrap() {
            for (a, b) in row.iter().zip([0.2, 0.3, 0.5]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let theta = Theta::new(vec![vec![0.4, 1.0]], vec![1.0]).unwrap();
        for row in e_step(&theta, &x, &BasisSpec::Identity).unwrap() {
            assert_eq!(row[1], 1.0);
        }
        // exp(gamma' phi_e) = 3 at x = ln 3.
        let x = DMatrix::from_row_slice(1, 1, &[3f64.ln()]);
        let theta = Theta::new(vec![vec![0.0, 1.0]], vec![0.5]).unwrap();
        let w = e_step(&theta, &x, &BasisSpec::Identity).unwrap();
        assert!((w[0][1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn m_step_pi_examples() {
        let w = vec![vec![0.5, 0.5], vec![0.1, 0.9], vec![0.4, 0.6]];
        assert!((m_step_pi(&w)[0] - 2.0 / 3.0).abs() < 1e-15);
        let w = vec![vec![0.2, 0.3, 0.5]; 4];
        let pi = m_step_pi(&w);
        assert!((pi[0] - 0.3).abs() < 1e-15 && (pi[1] - 0.5).abs() < 1e-15);
        assert_eq!(m_step_pi(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]), vec![0.0, 0.5]);
    }

    #[test]
    fn m_step_p_zero_tilts_are_uniform() {
        let ds = OslsDataset::from_rows(&[vec![0.1], vec![0.7]], vec![0, 0], &[vec![-0.3], vec![1.1]], 1).unwrap();
        let data = ModelData::new(&ds, &BasisSpec::Identity).unwrap();
        let p = m_step_p(&[0.0], &[vec![0.0]], &data).unwrap();
        for v in &p.p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let ds = OslsDataset::from_rows(
            &[vec![0.1], vec![0.7], vec![2.0]],
            vec![0, 1, 0],
            &[vec![-0.3], vec![1.1], vec![0.4]],
            2,
        )
        .unwrap();
        let data = ModelData::new(&ds, &BasisSpec::Identity).unwrap();
        let p = m_step_p(&[0.0, 0.0], &[vec![0.0], vec![0.0]], &data).unwrap();
        for v in &p.p {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_proportion_allocation() {
        let sums = [30.0, 20.0, 10.0, 40.0];
        let pi = update_proportions(&ProportionConstraint::Fixed { class: 1, value: 0.3 }, &sums, 100.0, &mut Vec::new());
        let others = 30.0 + 10.0 + 40.0;
        assert_eq!(pi[0], 0.3);
        assert!((pi[1] - 0.7 * 10.0 / others).abs() < 1e-15);
        assert!((pi[2] - 0.7 * 40.0 / others).abs() < 1e-15);
    }

    #[test]
    fn fixed_proportion_allocation_matches_constrained_optimiser() {
        let fixtures: serde_json::Value =
            serde_json::from_str(include_str!("../tests/fixtures/oracle.json")).unwrap();
        let case = &fixtures["pi_block"][0];
        let sums: Vec<f64> = case["sums"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let constraint = ProportionConstraint::Fixed { class: 1, value: case["value"].as_f64().unwrap() };
        let pi = update_proportions(&constraint, &sums, sums.iter().sum(), &mut Vec::new());
        let pi0 = 1.0 - pi.iter().sum::<f64>();
        for (ours, key) in [(pi0, "pi_0"), (pi[1], "pi_2"), (pi[2], "pi_3")] {
            assert!((ours - case[key].as_f64().unwrap()).abs() < 1e-7, "{key}");
        }
    }

    #[test]
    fn constraint_validation() {
        let ds = OslsDataset::from_rows(&[vec![0.1], vec![0.7]], vec![0, 0], &[vec![-0.3], vec![1.1]], 1).unwrap();
        let data = ModelData::new(&ds, &BasisSpec::Identity).unwrap();
        let cfg = EmConfig::default();
        assert!(fit_constrained(&data, &cfg, &ProportionConstraint::Fixed { class: 2, value: 0.1 }, None).is_err());
        assert!(fit_constrained(&data, &cfg, &ProportionConstraint::Fixed { class: 1, value: 1.5 }, None).is_err());
        assert!(fit_constrained(&data, &cfg, &ProportionConstraint::All(vec![0.5, 0.6]), None).is_err());
        assert!(EmConfig { tol: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn fit_satisfies_constraints_and_is_monotone() {
        let rep = generate_replicate(&small_spec(300), 7).unwrap();
        let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
        let sol = fit_prepared(&data, &EmConfig { n_starts: 2, ..EmConfig::default() }).unwrap();
        assert!(sol.converged);
        assert!((sol.p_hat.total() - 1.0).abs() < 1e-10);
        assert!(sol.trace.max_decrease() <= 1e-10);
        assert!(sol.lambda_identity_gap(&data) < 1e-6);
        let direct = profile_log_el_prepared(&sol.theta_hat, &data).unwrap().value;
        assert!((direct - sol.log_el).abs() < 1e-8);
        for (a, b) in sol.theta_hat.pi().iter().zip([0.2, 0.2, 0.4]) {
            assert!((a - b).abs() < 0.12, "{:?}", sol.theta_hat.pi());
        }
    }

    #[test]
    fn mele_is_a_fixed_point() {
        let rep = generate_replicate(&small_spec(200), 3).unwrap();
        let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
        let cfg = EmConfig { tol: 1e-12, n_starts: 1, ..EmConfig::default() };
        let sol = fit_prepared(&data, &cfg).unwrap();
        let again = run_em(&data, &EmConfig { max_iter: 2, ..cfg }, &ProportionConstraint::Free, sol.theta_hat.clone()).unwrap();
        for (a, b) in again.theta_hat.to_vector().iter().zip(sol.theta_hat.to_vector()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((again.log_el - sol.log_el).abs() < 1e-8);
    }

    #[test]
    fn fixing_pi_at_mele_recovers_it() {
        let rep = generate_replicate(&small_spec(200), 11).unwrap();
        let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
        let cfg = EmConfig { tol: 1e-10, n_starts: 2, ..EmConfig::default() };
        let sol = fit_prepared(&data, &cfg).unwrap();
        let at = sol.theta_hat.proportion(3);
        let fixed = fit_constrained(&data, &cfg, &ProportionConstraint::Fixed { class: 3, value: at }, Some(&sol.theta_hat)).unwrap();
        assert!((fixed.log_el - sol.log_el).abs() < 1e-6);
        let zero = fit_constrained(&data, &cfg, &ProportionConstraint::Fixed { class: 3, value: 0.0 }, Some(&sol.theta_hat)).unwrap();
        assert!(zero.log_el < sol.log_el - 1.0);
    }

    #[test]
    fn test_permutation_invariance() {
        let rep = generate_replicate(&small_spec(150), 5).unwrap();
        // Gains well above the rounding noise of the log-EL, so both runs
        // stop at the same iteration.
        let cfg = EmConfig { tol: 1e-8, n_starts: 1, ..EmConfig::default() };
        let a = fit_em(&ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap(), &cfg).unwrap();
        let perm: Vec<usize> = (0..rep.dataset.m()).rev().collect();
        let permuted = rep.dataset.with_test_permutation(&perm);
        let b = fit_em(&ModelData::new(&permuted, &BasisSpec::Identity).unwrap(), &cfg).unwrap();
        for (x, y) in a.theta_hat.to_vector().iter().zip(b.theta_hat.to_vector()) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn polish_extends_the_trace_and_meets_the_identity() {
        let rep = generate_replicate(&small_spec(150), 5).unwrap();
        let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
        let cfg = EmConfig { n_starts: 1, ..EmConfig::default() };
        let raw = fit_em(&data, &cfg).unwrap();
        let sol = fit_prepared(&data, &cfg).unwrap();
        assert!(sol.log_el >= raw.log_el);
        assert!(sol.trace.iterations.len() >= raw.trace.iterations.len());
        assert!(sol.trace.iterations.windows(2).all(|w| w[1].iteration == w[0].iteration + 1));
        assert!(sol.trace.max_decrease() < 1e-10);
        assert!(sol.lambda_identity_gap(&data) < 1e-6);
    }

    #[test]
    fn identical_classes_warn_instead_of_failing() {
        let mut spec = small_spec(200);
        spec.means = vec![vec![0.0; 6]; 4];
        let rep = generate_replicate(&spec, 1).unwrap();
        let sol = fit(&rep.dataset, &BasisSpec::Identity, &EmConfig { n_starts: 1, ..EmConfig::default() }).unwrap();
        assert!(sol.diagnostics.degenerate);
        assert!(!sol.diagnostics.warnings.is_empty());
        assert!(sol.diagnostics.warnings.iter().all(|w| !w.contains("iteration cap")));
        assert_eq!(sol.diagnostics.diverged, !sol.converged);
    }

    #[test]
    fn starts_are_reproducible() {
        let rep = generate_replicate(&small_spec(150), 2).unwrap();
        let cfg = EmConfig { n_starts: 3, seed: 9, ..EmConfig::default() };
        let a = fit(&rep.dataset, &BasisSpec::Identity, &cfg).unwrap();
        let b = fit(&rep.dataset, &BasisSpec::Identity, &cfg).unwrap();
        assert_eq!(a.theta_hat, b.theta_hat);
        assert_eq!(a.log_el.to_bits(), b.log_el.to_bits());
    }
}
