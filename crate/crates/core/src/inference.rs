//! Likelihood ratio inference for the mixing proportions and the plug-in
//! asymptotic covariance of the MELE.
//!
//! `R_k(v) = 2 {l(theta_hat) - l(theta_hat_k(v))}` where `theta_hat_k(v)`
//! maximises the profile log-EL with `pi_k = v`. The level-`1 - a` interval
//! is `{v : R_k(v) <= chi2_1(1 - a)}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::drm::{dot, BasisSpec, ModelData, OslsDataset, Theta};
use crate::el::profile_log_el_prepared;
pub use crate::em::MELE_TOL;
use crate::em::{fit_constrained, fit_prepared, ElSolution, EmConfig, ProportionConstraint};
use crate::error::{OslsError, Result};

/// EM tolerance for the constrained fits along a profile.
pub const PROFILE_TOL: f64 = 1e-8;
/// First expansion step when searching for an interval endpoint.
pub const BRACKET_STEP: f64 = 0.02;
const ROOT_TOL_R: f64 = 1e-5;
const ROOT_TOL_V: f64 = 1e-10;
const MAX_ROOT_STEPS: usize = 60;

/// Standard normal quantile: Acklam's rational approximation followed by
/// one Halley step against `erfc`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OslsError::InvalidInput(format!("probability {p} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] =
        [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996e0, 3.754408661907416e0];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    let e = 0.5 * erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x -= u / (1.0 + x * u / 2.0);
    Ok(x)
}

/// Quantile of the chi-square distribution with one degree of freedom at
/// `level`, i.e. `(Phi^{-1}((1 + level) / 2))^2`.
pub fn chi2_quantile(level: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&level) {
        return Err(OslsError::InvalidInput(format!("level {level} outside [0, 1)")));
    }
    if level == 0.0 {
        return Ok(0.0);
    }
    Ok(normal_quantile((1.0 + level) / 2.0)?.powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElrPoint {
    pub value: f64,
    pub elr: f64,
    pub log_el: f64,
}

/// Evaluated points of `R_k`, sorted by value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElrCurve {
    pub k: usize,
    pub mele_value: f64,
    pub points: Vec<ElrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub k: usize,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub mele_value: f64,
    /// No crossing below the MELE before 0.
    pub lower_truncated: bool,
    /// No crossing above the MELE before 1.
    pub upper_truncated: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

struct CachedPoint {
    value: f64,
    log_el: f64,
    theta: Theta,
}

/// Profile of `R_k` around a fitted MELE. Constrained fits are cached and
/// each new one starts from the cached solution with the nearest `pi_k`.
pub struct ProfileEngine<'a> {
    data: &'a ModelData,
    config: EmConfig,
    mele: ElSolution,
    k: usize,
    cache: Vec<CachedPoint>,
}

impl<'a> ProfileEngine<'a> {
    /// `mele` should come from `fit_prepared` (or be converged as tightly);
    /// otherwise `R` can dip below zero near the MELE.
    pub fn new(data: &'a ModelData, config: &EmConfig, mele: ElSolution, k: usize) -> Result<Self> {
        config.validate()?;
        if k > data.k() {
            return Err(OslsError::InvalidInput(format!("class {k} outside 0..={}", data.k())));
        }
        let config = EmConfig { tol: config.tol.min(PROFILE_TOL), max_iter: config.max_iter.max(20_000), ..config.clone() };
        let cache = vec![CachedPoint {
            value: mele.theta_hat.proportion(k),
            log_el: mele.log_el,
            theta: mele.theta_hat.clone(),
        }];
        Ok(Self { data, config, mele, k, cache })
    }

    pub fn mele(&self) -> &ElSolution {
        &self.mele
    }

    pub fn mele_value(&self) -> f64 {
        self.mele.theta_hat.proportion(self.k)
    }

    /// Number of constrained fits run so far.
    pub fn evaluations(&self) -> usize {
        self.cache.len() - 1
    }

    /// `R_k(value)`.
    pub fn elr(&mut self, value: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&value) {
            return Err(OslsError::Infeasible(format!("proportion {value} outside [0, 1]")));
        }
        let constraint = ProportionConstraint::Fixed { class: self.k, value };
        let sol = match self.extrapolated_start(value) {
            Some(start) => fit_constrained(self.data, &self.config, &constraint, Some(&start))
                .or_else(|_| {
                    let warm = self.nearest(value).theta.clone();
                    fit_constrained(self.data, &self.config, &constraint, Some(&warm))
                })?,
            None => {
                let warm = self.nearest(value).theta.clone();
                fit_constrained(self.data, &self.config, &constraint, Some(&warm))?
            }
        };
        let log_el = sol.log_el;
        self.cache.push(CachedPoint { value, log_el, theta: sol.theta_hat });
        Ok(2.0 * (self.mele.log_el - log_el))
    }

    fn nearest(&self, value: f64) -> &CachedPoint {
        self.cache
            .iter()
            .min_by(|a, b| (a.value - value).abs().total_cmp(&(b.value - value).abs()))
            .expect("cache holds the MELE")
    }

    /// Linear inter/extrapolation in `pi_k` through the two cached
    /// solutions nearest to `value`.
    fn extrapolated_start(&self, value: f64) -> Option<Theta> {
        let mut order: Vec<&CachedPoint> = self.cache.iter().collect();
        order.sort_by(|a, b| (a.value - value).abs().total_cmp(&(b.value - value).abs()));
        let (a, b) = (order.first()?, order.get(1)?);
        let span = b.value - a.value;
        if span.abs() < 1e-8 || (value - a.value).abs() > 2.0 * span.abs() {
            return None;
        }
        let t = (value - a.value) / span;
        let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p + t * (q - p)).collect() };
        let gamma = lerp(a.theta.gamma_flat(), b.theta.gamma_flat());
        let pi = lerp(a.theta.pi(), b.theta.pi());
        if pi.iter().any(|p| !(0.0..=1.0).contains(p)) || pi.iter().sum::<f64>() > 1.0 {
            return None;
        }
        let k = a.theta.k();
        Theta::new(gamma.chunks(a.theta.dim()).map(<[f64]>::to_vec).collect(), pi)
            .ok()
            .filter(|th| th.k() == k)
    }

    /// All evaluations so far (including the MELE itself at `R = 0`).
    pub fn curve(&self) -> ElrCurve {
        let mut points: Vec<ElrPoint> = self
            .cache
            .iter()
            .map(|c| ElrPoint { value: c.value, elr: 2.0 * (self.mele.log_el - c.log_el), log_el: c.log_el })
            .collect();
        points.sort_by(|a, b| a.value.total_cmp(&b.value));
        ElrCurve { k: self.k, mele_value: self.mele_value(), points }
    }

    /// Evaluates `R_k` on `grid` in order of distance from the MELE so warm
    /// starts stay close.
    pub fn evaluate_grid(&mut self, grid: &[f64]) -> Result<ElrCurve> {
        let centre = self.mele_value();
        let mut order: Vec<f64> = grid.to_vec();
        order.sort_by(|a, b| (a - centre).abs().total_cmp(&(b - centre).abs()));
        for v in order {
            self.elr(v)?;
        }
        Ok(self.curve())
    }

    fn endpoint(&mut self, target: f64, side: f64, first_step: f64) -> Result<(f64, bool)> {
        let bound = if side > 0.0 { 1.0 } else { 0.0 };
        let centre = self.mele_value();
        if centre == bound {
            return Ok((bound, true));
        }
        let dist = |v: f64| (v - centre) * side;
        // Farthest evaluated point on this side still inside the interval,
        // and the nearest one already outside.
        let mut inner = (centre, 0.0);
        let mut outer: Option<(f64, f64)> = None;
        for c in self.cache.iter().skip(1) {
            let d = dist(c.value);
            if d <= 0.0 {
                continue;
            }
            let r = 2.0 * (self.mele.log_el - c.log_el);
            if r < target {
                if d > dist(inner.0) {
                    inner = (c.value, r);
                }
            } else if outer.is_none_or(|(v, _)| d < dist(v)) {
                outer = Some((c.value, r));
            }
        }
        if outer.is_some_and(|(v, _)| dist(v) < dist(inner.0)) {
            outer = None;
        }
        // sqrt(R) is close to linear in v, so secant steps on
        // g(v) = sqrt(R(v)) - sqrt(target) converge fast.
        let g = |r: f64| r.max(0.0).sqrt() - target.sqrt();
        let mut step = first_step;
        let mut outer = match outer {
            Some(o) => o,
            None => loop {
                let v = (inner.0 + side * step).clamp(0.0, 1.0);
                let r = self.elr(v)?;
                if r >= target {
                    break (v, r);
                }
                inner = (v, r);
                if v == bound {
                    return Ok((bound, true));
                }
                // Aim a little past the secant prediction of the crossing.
                let d = dist(v);
                let predicted = if r > 0.0 { d * (target / r).sqrt() } else { 2.0 * d };
                step = (1.05 * predicted - d).clamp(0.25 * BRACKET_STEP, 4.0 * d.max(BRACKET_STEP));
            },
        };
        if (outer.1 - target).abs() < ROOT_TOL_R {
            return Ok((outer.0, false));
        }
        // Illinois regula falsi inside the bracket.
        let (mut g_in, mut g_out) = (g(inner.1), g(outer.1));
        let mut last_side = 0i8;
        for _ in 0..MAX_ROOT_STEPS {
            if dist(outer.0) - dist(inner.0) < ROOT_TOL_V {
                break;
            }
            let mut v = inner.0 + (outer.0 - inner.0) * g_in / (g_in - g_out);
            if !v.is_finite() || dist(v) <= dist(inner.0) || dist(v) >= dist(outer.0) {
                v = 0.5 * (inner.0 + outer.0);
            }
            let r = self.elr(v)?;
            if (r - target).abs() < ROOT_TOL_R {
                return Ok((v, false));
            }
            if r < target {
                inner = (v, r);
                g_in = g(r);
                if last_side == -1 {
                    g_out *= 0.5;
                }
                last_side = -1;
            } else {
                outer = (v, r);
                g_out = g(r);
                if last_side == 1 {
                    g_in *= 0.5;
                }
                last_side = 1;
            }
        }
        let v = if (outer.1 - target).abs() <= (target - inner.1).abs() { outer.0 } else { inner.0 };
        Ok((v, false))
    }

    /// Likelihood ratio interval at `level`.
    pub fn interval(&mut self, level: f64) -> Result<ConfidenceInterval> {
        if !(level > 0.0 && level < 1.0) {
            return Err(OslsError::InvalidInput(format!("level {level} outside (0, 1)")));
        }
        let target = chi2_quantile(level)?;
        let centre = self.mele_value();
        let (upper, upper_truncated) = self.endpoint(target, 1.0, BRACKET_STEP)?;
        // The other side starts from the mirror image of this endpoint.
        let mirrored = if upper_truncated { BRACKET_STEP } else { (upper - centre).max(1e-4) };
        let (lower, lower_truncated) = self.endpoint(target, -1.0, mirrored)?;
        Ok(ConfidenceInterval {
            k: self.k,
            level,
            lower: lower.min(centre),
            upper: upper.max(centre),
            mele_value: centre,
            lower_truncated,
            upper_truncated,
        })
    }
}

/// `R_k(value)` for a fresh fit of `dataset`.
pub fn elr(
    dataset: &OslsDataset,
    basis: &BasisSpec,
    config: &EmConfig,
    k: usize,
    value: f64,
) -> Result<f64> {
    let data = ModelData::new(dataset, basis)?;
    let mele = fit_prepared(&data, config)?;
    ProfileEngine::new(&data, config, mele, k)?.elr(value)
}

/// Likelihood ratio interval for `pi_k` from a prepared MELE.
pub fn elr_confidence_interval_prepared(
    data: &ModelData,
    config: &EmConfig,
    mele: &ElSolution,
    k: usize,
    level: f64,
) -> Result<ConfidenceInterval> {
    ProfileEngine::new(data, config, mele.clone(), k)?.interval(level)
}

/// Likelihood ratio interval for `pi_k` (`k = 0` is the baseline proportion).
pub fn elr_confidence_interval(
    dataset: &OslsDataset,
    basis: &BasisSpec,
    config: &EmConfig,
    k: usize,
    level: f64,
) -> Result<ConfidenceInterval> {
    let data = ModelData::new(dataset, basis)?;
    let mele = fit_prepared(&data, config)?;
    elr_confidence_interval_prepared(&data, config, &mele, k, level)
}

/// Plug-in estimate of the asymptotic covariance of `sqrt(N)(theta_hat - theta)`.
#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    /// `-[[W11 - W13 W33^{-1} W31, W12], [W21, W22]]`.
    pub w_star: DMatrix<f64>,
    /// `W_star^{-1} / N`: covariance of `theta_hat` itself.
    pub sigma_hat: DMatrix<f64>,
    pub w11: DMatrix<f64>,
    pub w12: DMatrix<f64>,
    pub w13: DMatrix<f64>,
    pub w22: DMatrix<f64>,
    pub w23: DMatrix<f64>,
    pub w33: DMatrix<f64>,
    /// Row labels: `alpha_k`, `beta_k_j` per class, then `pi_k`.
    pub index: Vec<String>,
    /// 2-norm condition number of `W_star`.
    pub condition: f64,
    pub n_total: usize,
}

impl CovarianceEstimate {
    fn pi_offset(&self, k: usize) -> usize {
        self.index.len() - k
    }

    /// Standard error of `pi_hat_k`; `k = 0` uses `pi_0 = 1 - sum pi_k`.
    pub fn pi_standard_error(&self, k: usize) -> f64 {
        let kk = self.index.iter().filter(|s| s.starts_with("pi_")).count();
        let off = self.pi_offset(kk);
        if k == 0 {
            let mut v = 0.0;
            for a in 0..kk {
                for b in 0..kk {
                    v += self.sigma_hat[(off + a, off + b)];
                }
            }
            v.max(0.0).sqrt()
        } else {
            self.sigma_hat[(off + k - 1, off + k - 1)].max(0.0).sqrt()
        }
    }

    /// Asymptotic variance of `sqrt(N)(pi_hat_k - pi_k)`.
    pub fn pi_scaled_variance(&self, k: usize) -> f64 {
        self.pi_standard_error(k).powi(2) * self.n_total as f64
    }
}

fn symmetric_inverse(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < 1e14) {
        return Err(OslsError::Singular { what: what.into(), condition });
    }
    let inv = m.clone().try_inverse().ok_or_else(|| OslsError::Singular {
        what: what.into(),
        condition,
    })?;
    Ok(((&inv + inv.transpose()) * 0.5, condition))
}

/// Plug-in covariance: each expectation under the baseline is replaced by
/// the fitted masses `sum_i p_hat_i (.)(x_i)` with `theta_hat`, `lambda_hat`
/// and `c = m / N` plugged in (`c_K = 0` for the novel class).
pub fn plugin_covariance_prepared(solution: &ElSolution, data: &ModelData) -> Result<CovarianceEstimate> {
    let theta = &solution.theta_hat;
    let k = data.k();
    let dim = data.dim();
    if theta.k() != k || theta.dim() != dim || solution.p_hat.p.len() != data.total() {
        return Err(OslsError::DimensionMismatch { expected: data.total(), found: solution.p_hat.p.len() });
    }
    let g = k * dim;
    let c = data.m() as f64 / data.total() as f64;
    let lambda = &solution.lambda_hat.lambda;
    let pi = theta.pi();
    let pi0 = 1.0 - pi.iter().sum::<f64>();

    let mut w11 = DMatrix::zeros(g, g);
    let mut w12 = DMatrix::zeros(g, k);
    let mut w13 = DMatrix::zeros(g, k);
    let mut w22 = DMatrix::zeros(k, k);
    let mut w33 = DMatrix::zeros(k, k);
    let mut clamps = 0;
    let mut s = vec![0.0; k];
    for (i, p) in solution.p_hat.p.iter().enumerate() {
        let phi = data.row(i);
        for a in 0..k {
            s[a] = crate::drm::clamped_exp(dot(theta.gamma(a + 1), phi), &mut clamps);
        }
        let q: Vec<f64> = s.iter().map(|v| v - 1.0).collect();
        let a_i = 1.0 + dot(lambda, &q);
        let b_i = pi0 + dot(pi, &s);
        for a in 0..k {
            for b in 0..k {
                let mut coef = lambda[a] * s[a] * lambda[b] * s[b] / a_i
                    - c * pi[a] * s[a] * pi[b] * s[b] / b_i;
                if a == b {
                    coef -= (lambda[a] - c * pi[a]) * s[a];
                }
                let coef = p * coef;
                for r in 0..dim {
                    for col in 0..dim {
                        w11[(a * dim + r, b * dim + col)] += coef * phi[r] * phi[col];
                    }
                }
                let c12 = p * (if a == b { c * s[a] } else { 0.0 } - c * pi[a] * s[a] * q[b] / b_i);
                let c13 = p * (lambda[a] * s[a] * q[b] / a_i - if a == b { s[a] } else { 0.0 });
                for r in 0..dim {
                    w12[(a * dim + r, b)] += c12 * phi[r];
                    w13[(a * dim + r, b)] += c13 * phi[r];
                }
                w22[(a, b)] -= p * c * q[a] * q[b] / b_i;
                w33[(a, b)] += p * q[a] * q[b] / a_i;
            }
        }
    }
    let (w33_inv, _) = symmetric_inverse(&w33, "W33")?;
    let schur = &w11 - &w13 * &w33_inv * w13.transpose();
    let mut w_star = DMatrix::zeros(g + k, g + k);
    w_star.view_mut((0, 0), (g, g)).copy_from(&(-&schur));
    w_star.view_mut((0, g), (g, k)).copy_from(&(-&w12));
    w_star.view_mut((g, 0), (k, g)).copy_from(&(-w12.transpose()));
    w_star.view_mut((g, g), (k, k)).copy_from(&(-&w22));
    let asym = (&w_star - w_star.transpose()).abs().max();
    if asym > 1e-8 * w_star.abs().max().max(1.0) {
        return Err(OslsError::Singular { what: format!("W_star asymmetric by {asym:e}"), condition: f64::NAN });
    }
    w_star = (&w_star + w_star.transpose()) * 0.5;
    let (inv, condition) = symmetric_inverse(&w_star, "W_star")?;
    let sigma_hat = inv / data.total() as f64;
    if sigma_hat.diagonal().iter().any(|v| !(*v > 0.0)) {
        return Err(OslsError::Singular { what: "Sigma_hat has a nonpositive diagonal".into(), condition });
    }
    let mut index = Vec::with_capacity(g + k);
    for a in 1..=k {
        index.push(format!("alpha_{a}"));
        for j in 1..dim {
            index.push(format!("beta_{a}_{j}"));
        }
    }
    for a in 1..=k {
        index.push(format!("pi_{a}"));
    }
    Ok(CovarianceEstimate {
        w_star,
        sigma_hat,
        w11,
        w12,
        w13,
        w22,
        w23: DMatrix::zeros(k, k),
        w33,
        index,
        condition,
        n_total: data.total(),
    })
}

pub fn plugin_covariance(
    solution: &ElSolution,
    dataset: &OslsDataset,
    basis: &BasisSpec,
) -> Result<CovarianceEstimate> {
    plugin_covariance_prepared(solution, &ModelData::new(dataset, basis)?)
}

/// Wald interval `pi_hat_k +/- z se`, clipped to `[0, 1]`.
pub fn wald_interval(
    solution: &ElSolution,
    cov: &CovarianceEstimate,
    k: usize,
    level: f64,
) -> Result<ConfidenceInterval> {
    let z = chi2_quantile(level)?.sqrt();
    let centre = solution.theta_hat.proportion(k);
    let half = z * cov.pi_standard_error(k);
    Ok(ConfidenceInterval {
        k,
        level,
        lower: (centre - half).max(0.0),
        upper: (centre + half).min(1.0),
        mele_value: centre,
        lower_truncated: centre - half < 0.0,
        upper_truncated: centre + half > 1.0,
    })
}

/// Numerical checks of the model's identifiability conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Smallest eigenvalue of `(1/N) sum_i phi_e(x_i) phi_e(x_i)'`.
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub second_moment_flagged: bool,
    /// `(a, b, ||beta_a - beta_b||)` over classes `0..=K` with `beta_0 = 0`.
    pub beta_distances: Vec<(usize, usize, f64)>,
    pub beta_flagged: Vec<(usize, usize)>,
    pub messages: Vec<String>,
}

/// Distances below this (times `1/sqrt(N)`) flag nearly equal slopes.
const BETA_SEPARATION: f64 = 4.0;

pub fn assumption_diagnostics(
    dataset: &OslsDataset,
    basis: &BasisSpec,
    theta: Option<&Theta>,
) -> Result<AssumptionReport> {
    let data = ModelData::new(dataset, basis)?;
    let dim = data.dim();
    let mut m = DMatrix::zeros(dim, dim);
    for row in data.rows() {
        let v = DVector::from_column_slice(row);
        m += &v * v.transpose();
    }
    m /= data.total() as f64;
    let eig = m.symmetric_eigen().eigenvalues;
    let min_eigenvalue = eig.min();
    let max_eigenvalue = eig.max();
    let mut messages = Vec::new();
    let second_moment_flagged = min_eigenvalue <= 1e-10 * max_eigenvalue.max(1.0);
    if second_moment_flagged {
        messages.push(format!(
            "second-moment matrix of the basis is (nearly) singular: min eigenvalue {min_eigenvalue:e}"
        ));
    }
    let mut beta_distances = Vec::new();
    let mut beta_flagged = Vec::new();
    if let Some(theta) = theta {
        let zero = vec![0.0; dim - 1];
        let beta = |k: usize| if k == 0 { zero.as_slice() } else { theta.beta(k) };
        let threshold = BETA_SEPARATION / (data.total() as f64).sqrt();
        for a in 0..=theta.k() {
            for b in a + 1..=theta.k() {
                let d = beta(a).iter().zip(beta(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                beta_distances.push((a, b, d));
                if d < threshold {
                    beta_flagged.push((a, b));
                    messages.push(format!(
                        "classes {a} and {b} have nearly equal slopes (distance {d:.3e})"
                    ));
                }
            }
        }
    }
    Ok(AssumptionReport {
        min_eigenvalue,
        max_eigenvalue,
        second_moment_flagged,
        beta_distances,
        beta_flagged,
        messages,
    })
}

/// Central-difference Hessian of the profile log-EL in `theta` (tilts then
/// proportions). Used to cross-check the plug-in covariance.
pub fn profile_hessian(theta: &Theta, data: &ModelData, step: f64) -> Result<DMatrix<f64>> {
    let base = theta.to_vector();
    let k = theta.k();
    let dim = theta.dim();
    let n = base.len();
    let eval = |v: &[f64]| -> Result<f64> {
        let gamma = (0..k).map(|a| v[a * dim..(a + 1) * dim].to_vec()).collect();
        let t = Theta::new(gamma, v[k * dim..].to_vec())?;
        Ok(profile_log_el_prepared(&t, data)?.value)
    };
    let f0 = eval(&base)?;
    let mut h = DMatrix::zeros(n, n);
    let mut v = base.clone();
    for i in 0..n {
        for j in i..n {
            let val = if i == j {
                v[i] = base[i] + step;
                let fp = eval(&v)?;
                v[i] = base[i] - step;
                let fm = eval(&v)?;
                v[i] = base[i];
                (fp - 2.0 * f0 + fm) / (step * step)
            } else {
                let mut corner = |si: f64, sj: f64| -> Result<f64> {
                    v[i] = base[i] + si * step;
                    v[j] = base[j] + sj * step;
                    let f = eval(&v);
                    v[i] = base[i];
                    v[j] = base[j];
                    f
                };
                (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)? + corner(-1.0, -1.0)?)
                    / (4.0 * step * step)
            };
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_replicate, ScenarioSpec};

    #[test]
    fn chi_square_quantiles() {
        assert!((chi2_quantile(0.95).unwrap() - 3.841458820694124).abs() < 1e-9);
        assert!((chi2_quantile(0.99).unwrap() - 6.634896601021214).abs() < 1e-9);
        assert_eq!(chi2_quantile(0.0).unwrap(), 0.0);
        assert!(chi2_quantile(1.0).is_err());
        assert!((normal_quantile(0.5).unwrap()).abs() < 1e-15);
        assert!((normal_quantile(1e-10).unwrap() + 6.361340902404056).abs() < 1e-9);
    }

    fn replicate(n: usize, index: u64) -> (ModelData, ElSolution, EmConfig) {
        let mut spec = ScenarioSpec::standard(1.0 / 3.0);
        spec.n = n;
        spec.m = n;
        spec.m_star = 10;
        let rep = generate_replicate(&spec, index).unwrap();
        let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
        let config = EmConfig { n_starts: 2, ..EmConfig::default() };
        let mele = fit_prepared(&data, &config).unwrap();
        (data, mele, config)
    }

    #[test]
    fn interval_brackets_the_mele_and_nests() {
        let (data, mele, config) = replicate(400, 4);
        let mut engine = ProfileEngine::new(&data, &config, mele, 3).unwrap();
        let centre = engine.mele_value();
        assert!(engine.elr(centre).unwrap().abs() < 1e-6);
        let ci95 = engine.interval(0.95).unwrap();
        let ci50 = engine.interval(0.5).unwrap();
        assert!(ci95.contains(centre) && ci50.contains(centre));
        assert!(ci95.lower <= ci50.lower && ci50.upper <= ci95.upper);
        let target = chi2_quantile(0.95).unwrap();
        assert!((engine.elr(ci95.upper).unwrap() - target).abs() < 1e-3);
        assert!((engine.elr(ci95.lower).unwrap() - target).abs() < 1e-3);
        assert!(engine.curve().points.iter().all(|p| p.elr >= -1e-8));
    }

    #[test]
    fn profile_dominates_fixed_fits() {
        let (data, mele, config) = replicate(300, 8);
        let mut engine = ProfileEngine::new(&data, &config, mele.clone(), 1).unwrap();
        for v in [0.05, 0.15, 0.3] {
            assert!(engine.elr(v).unwrap() >= -1e-8);
        }
    }

    #[test]
    fn plugin_covariance_blocks() {
        let (data, mele, _) = replicate(400, 2);
        let cov = plugin_covariance_prepared(&mele, &data).unwrap();
        assert!(cov.w23.iter().all(|v| *v == 0.0));
        assert_eq!(cov.index.len(), cov.w_star.nrows());
        let sym = (&cov.sigma_hat - cov.sigma_hat.transpose()).amax();
        assert!(sym < 1e-12 * cov.sigma_hat.amax());
        for k in 0..=3 {
            let se = cov.pi_standard_error(k);
            assert!(se > 0.0 && se < 0.2, "se of pi_{k} = {se}");
        }
    }

    #[test]
    fn wald_interval_is_clipped() {
        let (data, mele, _) = replicate(300, 1);
        let cov = plugin_covariance_prepared(&mele, &data).unwrap();
        let ci = wald_interval(&mele, &cov, 3, 0.95).unwrap();
        assert!(ci.lower >= 0.0 && ci.upper <= 1.0 && ci.contains(ci.mele_value));
    }

    #[test]
    fn second_moment_flag() {
        let ds = OslsDataset::from_rows(
            &[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]],
            vec![0, 0, 0],
            &[vec![4.0, 8.0]],
            1,
        )
        .unwrap();
        let r = assumption_diagnostics(&ds, &BasisSpec::Identity, None).unwrap();
        assert!(r.second_moment_flagged);
    }
}
