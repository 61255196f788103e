use std::ffi::CStr;
use std::ptr;

use oslsel::sim::{generate_replicate, ScenarioSpec};
use oslsel_ffi::*;

fn row_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(oslsel_last_error()) }.to_string_lossy().into_owned()
}

fn small_dataset() -> (*mut OslselDataset, oslsel::sim::Replicate) {
    let mut spec = ScenarioSpec::standard(1.0 / 3.0);
    spec.n = 300;
    spec.m = 300;
    spec.m_star = 50;
    let rep = generate_replicate(&spec, 2).unwrap();
    let ds = &rep.dataset;
    let tx = row_major(ds.train_x());
    let ty: Vec<u32> = ds.train_y().iter().map(|&v| v as u32).collect();
    let sx = row_major(ds.test_x());
    let mut handle = ptr::null_mut();
    let status = unsafe {
        oslsel_dataset_new(tx.as_ptr(), ty.as_ptr(), ds.n(), sx.as_ptr(), ds.m(), ds.dim(), 3, &mut handle)
    };
    assert_eq!(status, OslselStatus::Ok, "{}", last_error());
    (handle, rep)
}

#[test]
fn fit_matches_the_rust_api() {
    let (ds, rep) = small_dataset();
    let mut options = oslsel_fit_options_default();
    options.n_starts = 2;
    let mut fit = ptr::null_mut();
    assert_eq!(unsafe { oslsel_fit(ds, options, &mut fit) }, OslselStatus::Ok, "{}", last_error());

    let config = oslsel::EmConfig { n_starts: 2, ..oslsel::EmConfig::default() };
    let data = oslsel::ModelData::new(&rep.dataset, &oslsel::BasisSpec::Identity).unwrap();
    let direct = oslsel::em::fit_prepared(&data, &config).unwrap();

    unsafe {
        assert_eq!(oslsel_fit_known_classes(fit), 3);
        assert_eq!(oslsel_fit_tilt_len(fit), 7);
        let mut pi = [0.0; 4];
        assert_eq!(oslsel_fit_proportions(fit, pi.as_mut_ptr(), 4), OslselStatus::Ok);
        assert_eq!(pi[1..], direct.theta_hat.pi()[..]);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut gamma = vec![0.0; 21];
        assert_eq!(oslsel_fit_tilts(fit, gamma.as_mut_ptr(), 21), OslselStatus::Ok);
        assert_eq!(gamma, direct.theta_hat.gamma_flat());

        let mut log_el = 0.0;
        assert_eq!(oslsel_fit_log_el(fit, &mut log_el), OslselStatus::Ok);
        assert_eq!(log_el, direct.log_el);

        let x = row_major(&rep.validation_x);
        let mut post = [0.0; 4];
        assert_eq!(oslsel_posterior(fit, x.as_ptr(), 6, post.as_mut_ptr()), OslselStatus::Ok);
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut labels = vec![0u32; 50];
        assert_eq!(oslsel_classify(fit, x.as_ptr(), 50, 6, labels.as_mut_ptr()), OslselStatus::Ok);
        let best = post.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(labels[0] as usize, best);

        let (mut lo, mut hi) = (0.0, 0.0);
        assert_eq!(oslsel_interval(fit, 3, 0.95, &mut lo, &mut hi), OslselStatus::Ok, "{}", last_error());
        assert!(lo < pi[3] && pi[3] < hi);

        oslsel_fit_free(fit);
        oslsel_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut out = ptr::null_mut();
        let status = oslsel_dataset_new(ptr::null(), ptr::null(), 3, ptr::null(), 2, 1, 1, &mut out);
        assert_eq!(status, OslselStatus::NullPointer);
        assert!(out.is_null());
        assert!(last_error().contains("train_x"));

        let x = [0.0, 1.0, 2.0];
        let y = [0u32, 0, 5];
        let t = [0.5, 1.5];
        let status = oslsel_dataset_new(x.as_ptr(), y.as_ptr(), 3, t.as_ptr(), 2, 1, 1, &mut out);
        assert_eq!(status, OslselStatus::InvalidArgument);
        assert!(!last_error().is_empty());

        let (ds, _) = small_dataset();
        assert!(last_error().is_empty());
        let mut options = oslsel_fit_options_default();
        options.tol = -1.0;
        let mut fit = ptr::null_mut();
        assert_eq!(oslsel_fit(ds, options, &mut fit), OslselStatus::InvalidArgument);
        assert!(fit.is_null());
        assert_eq!(oslsel_fit(ptr::null(), oslsel_fit_options_default(), &mut fit), OslselStatus::NullPointer);
        assert_eq!(oslsel_fit_known_classes(ptr::null()), 0);
        oslsel_dataset_free(ds);
        oslsel_dataset_free(ptr::null_mut());
        oslsel_fit_free(ptr::null_mut());

        let version = CStr::from_ptr(oslsel_version()).to_str().unwrap();
        assert_eq!(version, env!("CARGO_PKG_VERSION"));
    }
}
