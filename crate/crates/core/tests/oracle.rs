//! Cross-checks against optimisers and distributions that share no code
//! with the crate. Frozen values live in `fixtures/oracle.json`
//! (regenerated by `fixtures/make_oracle.py`).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use oslsel::el::{el_weights, fitted_cdf, profile_log_el, solve_lambda};
use oslsel::em::{fit_prepared, m_step_gamma};
use oslsel::inference::{chi2_quantile, plugin_covariance_prepared, profile_hessian};
use oslsel::logit::NewtonControls;
use oslsel::sim::{generate_replicate, ScenarioSpec};
use oslsel::{BasisSpec, EmConfig, ModelData, OslsDataset, Theta};

fn fixtures() -> Value {
    serde_json::from_str(include_str!("fixtures/oracle.json")).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

#[test]
fn profile_log_el_matches_primal_maximisation() {
    for case in fixtures()["primal"].as_array().unwrap() {
        let train = floats(&case["train"]);
        let test = floats(&case["test"]);
        let ds = OslsDataset::new(column(&train), vec![0; train.len()], column(&test), 1).unwrap();
        let theta = Theta::new(
            vec![vec![case["alpha"].as_f64().unwrap(), case["beta"].as_f64().unwrap()]],
            vec![case["pi"].as_f64().unwrap()],
        )
        .unwrap();
        let value = profile_log_el(&theta, &ds, &BasisSpec::Identity).unwrap();
        let expected = case["profile_log_el"].as_f64().unwrap();
        assert!((value - expected).abs() < 1e-4, "{value} vs {expected}");

        let lambda = solve_lambda(&theta, &ds, &BasisSpec::Identity).unwrap();
        let p = el_weights(&theta, &lambda.lambda, &ds, &BasisSpec::Identity).unwrap();
        for (a, b) in p.p.iter().zip(floats(&case["masses"])) {
            assert!((a - b).abs() < 1e-4, "mass {a} vs {b}");
        }
    }
}

#[test]
fn m_step_matches_generic_optimiser() {
    for case in fixtures()["m_step"].as_array().unwrap() {
        let train = floats(&case["train"]);
        let test = floats(&case["test"]);
        let w1 = floats(&case["w1"]);
        let ds = OslsDataset::new(column(&train), vec![0; train.len()], column(&test), 1).unwrap();
        let data = ModelData::new(&ds, &BasisSpec::Identity).unwrap();
        let w: Vec<f64> = w1.iter().flat_map(|&v| [1.0 - v, v]).collect();
        let controls = NewtonControls { tol: 1e-12, max_iter: 100 };
        let update = m_step_gamma(&w, &data, &[0.0, 0.0], controls).unwrap();
        let close = |a: f64, key: &str| {
            let b = case[key].as_f64().unwrap();
            assert!((a - b).abs() < 1e-5, "{key}: {a} vs {b}");
        };
        close(update.alpha_star[0], "alpha_star");
        close(update.gamma[0], "alpha");
        close(update.gamma[1], "beta");
    }
}

fn gradient_and_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len();
    let at = |shifts: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in shifts {
            y[i] += d;
        }
        f(&y)
    };
    let f0 = f(x);
    let grad = (0..n).map(|i| (at(&[(i, h)]) - at(&[(i, -h)])) / (2.0 * h)).collect();
    let hess = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            (at(&[(i, h)]) - 2.0 * f0 + at(&[(i, -h)])) / (h * h)
        } else {
            (at(&[(i, h), (j, h)]) - at(&[(i, h), (j, -h)]) - at(&[(i, -h), (j, h)])
                + at(&[(i, -h), (j, -h)]))
                / (4.0 * h * h)
        }
    });
    (grad, hess)
}

#[test]
fn training_only_profile_peaks_at_logit_fit() {
    let case = &fixtures()["training_logit"];
    let x = floats(&case["x"]);
    let y: Vec<usize> = case["y"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    let coef = floats(&case["coef"]);
    let ds = OslsDataset::training_only(column(&x), y.clone(), 3).unwrap();
    let counts = ds.class_counts();
    // Logit intercepts absorb log(n_k / n_0); the novel class stays flat.
    let start: Vec<f64> = (0..2)
        .flat_map(|c| [coef[2 * c] - (counts[c + 1] as f64 / counts[0] as f64).ln(), coef[2 * c + 1]])
        .collect();
    let value = |g: &[f64]| {
        let theta = Theta::new(vec![g[0..2].to_vec(), g[2..4].to_vec(), vec![0.0, 0.0]], vec![0.2, 0.2, 0.2]).unwrap();
        profile_log_el(&theta, &ds, &BasisSpec::Identity).unwrap()
    };
    let (grad, hess) = gradient_and_hessian(&value, &start, 1e-4);
    let step = hess.clone().lu().solve(&nalgebra::DVector::from_vec(grad.clone())).unwrap();
    assert!(step.amax() < 1e-4, "Newton step to the profile maximum {step:?}");
    assert!(hess.symmetric_eigen().eigenvalues.max() < 0.0);
    assert!(OslsDataset::training_only(column(&x), y, 3).is_ok());
}

#[test]
fn mele_dominates_random_perturbations() {
    let mut spec = ScenarioSpec::standard(1.0 / 3.0);
    spec.n = 300;
    spec.m = 300;
    spec.m_star = 10;
    let rep = generate_replicate(&spec, 12).unwrap();
    let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
    let config = EmConfig { n_starts: 2, ..EmConfig::default() };
    let mele = fit_prepared(&data, &config).unwrap();
    let best = profile_log_el(&mele.theta_hat, &rep.dataset, &BasisSpec::Identity).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let dim = mele.theta_hat.dim();
    let mut tried = 0;
    while tried < 100 {
        let scale = 0.05;
        let gamma: Vec<Vec<f64>> = (1..=3)
            .map(|c| mele.theta_hat.gamma(c).iter().map(|g| g + scale * (rng.random::<f64>() - 0.5)).collect())
            .collect();
        let pi: Vec<f64> = mele.theta_hat.pi().iter().map(|p| p + scale * (rng.random::<f64>() - 0.5)).collect();
        let Ok(theta) = Theta::new(gamma, pi) else { continue };
        assert_eq!(theta.dim(), dim);
        let v = profile_log_el(&theta, &rep.dataset, &BasisSpec::Identity).unwrap();
        assert!(v <= best + 1e-9, "perturbation beat the MELE: {v} > {best}");
        tried += 1;
    }
}

#[test]
fn plugin_information_matches_profile_hessian() {
    let mut spec = ScenarioSpec::standard(1.0 / 3.0);
    spec.m_star = 10;
    let rep = generate_replicate(&spec, 0).unwrap();
    let data = ModelData::new(&rep.dataset, &BasisSpec::Identity).unwrap();
    let config = EmConfig { n_starts: 2, ..EmConfig::default() };
    let mele = fit_prepared(&data, &config).unwrap();
    let cov = plugin_covariance_prepared(&mele, &data).unwrap();
    let hess = profile_hessian(&mele.theta_hat, &data, 1e-4).unwrap();
    let information = -hess / data.total() as f64;
    let rel = (&information - &cov.w_star).norm() / cov.w_star.norm();
    assert!(rel < 0.05, "relative difference {rel}");
}

#[test]
fn fitted_cdf_of_shifted_normal_hits_its_median() {
    // Labelled N(0,1) and N(1,1) samples; the test block adds a novel N(-1.5,1).
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut normal = oslsel::rng::NormalSampler::new(&mut rng);
    let per_class = 1500;
    let train: Vec<f64> = (0..2 * per_class)
        .map(|i| if i < per_class { 0.0 } else { 1.0 } + normal.standard_normal())
        .collect();
    let train_y: Vec<usize> = (0..2 * per_class).map(|i| usize::from(i >= per_class)).collect();
    let test: Vec<f64> = (0..2000)
        .map(|_| {
            let u = normal.uniform();
            let mean = if u < 0.3 { 0.0 } else if u < 0.6 { 1.0 } else { -1.5 };
            mean + normal.standard_normal()
        })
        .collect();
    let ds = OslsDataset::new(column(&train), train_y, column(&test), 2).unwrap();
    assert_eq!(ds.total(), 5000);
    let sol = oslsel::fit(&ds, &BasisSpec::Identity, &EmConfig { n_starts: 2, ..EmConfig::default() }).unwrap();
    let f0 = fitted_cdf(&sol, &ds, &BasisSpec::Identity, 0).unwrap();
    let f1 = fitted_cdf(&sol, &ds, &BasisSpec::Identity, 1).unwrap();
    assert!((f1.total_mass() - 1.0).abs() < 1e-8);
    assert!((f0.total_mass() - 1.0).abs() < 1e-8);
    assert!((f1.eval(&[1.0]) - 0.5).abs() < 0.03, "F1(1) = {}", f1.eval(&[1.0]));
    assert!((f0.eval(&[0.0]) - 0.5).abs() < 0.03, "F0(0) = {}", f0.eval(&[0.0]));
}

#[test]
fn chi_square_quantile_matches_statrs() {
    let dist = ChiSquared::new(1.0).unwrap();
    for level in [0.5, 0.8, 0.9, 0.95, 0.975, 0.99, 0.999] {
        let ours = chi2_quantile(level).unwrap();
        let theirs = dist.inverse_cdf(level);
        assert!((ours - theirs).abs() < 1e-8 * theirs.max(1.0), "{level}: {ours} vs {theirs}");
    }
}
