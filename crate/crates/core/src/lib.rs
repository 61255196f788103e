//! Open-set label shift estimation under a density ratio model.
//!
//! A labelled training sample from classes `0..K-1` and an unlabelled test
//! sample that may also contain a class `K` never seen in training. Class
//! densities are exponential tilts of the baseline `f_0`:
//! `f_k(x) = f_0(x) exp(alpha_k + beta_k' phi(x))`. The crate estimates the
//! tilts, the test mixing proportions and `f_0` by maximum empirical
//! likelihood, gives likelihood ratio intervals for the proportions, and
//! classifies test rows by the plug-in Bayes rule.

pub mod drm;
pub mod el;
pub mod em;
pub mod error;
pub mod logit;
pub mod rng;
pub mod sim;
pub mod inference;
pub mod classify;
pub mod io;
pub mod cli;

pub use drm::{expand_basis, BasisSpec, ModelData, OslsDataset, Theta};
pub use el::{ElWeights, EmpiricalCdf, LambdaSolution};
pub use em::{fit, fit_with_fixed_pi, fit_with_fixed_proportions, ElSolution, EmConfig};
pub use error::{OslsError, Result};
