//! Step-size selection for numerical ODE solvers inside Bayesian inverse
//! problems, driven by Bayes factors between approximate and exact models.

pub mod bayes;
pub mod evidence;
pub mod harness;
pub mod mcmc;
pub mod models;
pub mod ode;
pub mod regress;
pub mod stats;
