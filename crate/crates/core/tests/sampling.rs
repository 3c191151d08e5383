mod common;

use odebayes::bayes::{FnDensity, LogDensity};
use odebayes::evidence::{gelfand_dey, gelfand_dey_kde, harmonic_mean, quadrature_marginal, EvidenceMethod, GridSpec, KdeConfig};
use odebayes::harness::ExperimentSpec;
use odebayes::mcmc::{effective_sample_size, mh_run, ProposalConfig};
use odebayes::models::ModelKind;
use odebayes::ode::{Method, SolverConfig};
use std::path::Path;

/// Largest gap between the empirical CDF of `xs` and `cdf`.
fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn metropolis_draws_pass_kolmogorov_smirnov_against_target() {
    // N(2, 0.5²) target; thinning every 40th draw leaves near-independent
    // samples so the one-sample KS bound applies
    let target = FnDensity::new(1, |x: &[f64]| -0.5 * ((x[0] - 2.0) / 0.5).powi(2));
    let chain = mh_run(&target, &[0.0], &ProposalConfig::new(vec![1.0]), 170_000, 10_000, 11).unwrap();
    let mut thinned: Vec<f64> = chain.coordinate(0).into_iter().step_by(40).collect();
    let n = thinned.len() as f64;
    let d = ks_statistic(&mut thinned, |x| common::normal_cdf((x - 2.0) / 0.5));
    // critical value at the 0.1% level
    let critical = 1.95 / n.sqrt();
    assert!(d < critical, "KS statistic {d} exceeds {critical} (n = {n})");
}

#[test]
fn two_dimensional_chain_recovers_correlated_gaussian() {
    let rho: f64 = 0.6;
    let det = 1.0 - rho * rho;
    let target = FnDensity::new(2, move |x: &[f64]| -0.5 * (x[0] * x[0] - 2.0 * rho * x[0] * x[1] + x[1] * x[1]) / det);
    let chain = mh_run(&target, &[0.0, 0.0], &ProposalConfig::new(vec![1.0, 1.0]), 110_000, 10_000, 3).unwrap();
    let (a, b) = (chain.coordinate(0), chain.coordinate(1));
    let corr = odebayes::stats::correlation(&a, &b);
    let ess = effective_sample_size(&chain, 0);
    assert!((corr - rho).abs() < 5.0 / ess.sqrt(), "corr {corr}, ess {ess}");
    assert!(odebayes::stats::mean(&a).abs() < 5.0 / ess.sqrt());
}

#[test]
fn gelfand_dey_is_invariant_to_the_weighting_density() {
    let model = common::conjugate(30, 2.0, 0.0, 3.0, 5);
    let post = &model.posterior;
    let chain = mh_run(post, &[model.post_mean], &ProposalConfig::new(vec![2.4 * model.post_sd]), 60_000, 10_000, 8).unwrap();
    let (m, s) = (model.post_mean, model.post_sd);
    let mut estimates = Vec::new();
    // normal weighting densities of several widths
    for width in [0.5, 0.8, 1.0] {
        let sd = width * s;
        let alpha = FnDensity::new(1, move |x: &[f64]| {
            -0.5 * ((x[0] - m) / sd).powi(2) - sd.ln() - 0.5 * common::LN_2PI
        });
        estimates.push(gelfand_dey(&chain.energies, &alpha, &chain.draws, EvidenceMethod::GelfandDeyKde).unwrap());
    }
    for shrink in [0.3, 0.5, 1.0] {
        estimates.push(gelfand_dey_kde(&chain, &KdeConfig { shrink, ..KdeConfig::default() }).unwrap());
    }
    for e in &estimates {
        // α equal to the posterior makes every term identical and the
        // estimate exact up to rounding
        let tol = (4.0 * e.mc_standard_error).max(1e-10);
        assert!((e.log_marginal - model.log_evidence).abs() < tol, "{} vs {} (se {})", e.log_marginal, model.log_evidence, e.mc_standard_error);
    }
}

#[test]
fn harmonic_mean_is_unstable_where_kde_weighting_is_not() {
    let model = common::conjugate(50, 1.0, 0.0, 10.0, 2);
    let post = &model.posterior;
    let chain = mh_run(post, &[model.post_mean], &ProposalConfig::new(vec![2.4 * model.post_sd]), 22_000, 2_000, 4).unwrap();
    let gd = gelfand_dey_kde(&chain, &KdeConfig::default()).unwrap();
    let hm = harmonic_mean(&chain, &post.prior).unwrap();
    assert!(hm.mc_standard_error > gd.mc_standard_error);
    assert!((gd.log_marginal - model.log_evidence).abs() < 4.0 * gd.mc_standard_error);
    // the prior is 20 posterior sds wide; the harmonic mean overshoots
    assert!(hm.log_marginal - model.log_evidence > 0.5, "{} vs {}", hm.log_marginal, model.log_evidence);
}

#[test]
fn logistic_gelfand_dey_agrees_with_quadrature() {
    let spec = ExperimentSpec::default_for(ModelKind::Logistic);
    let data = spec.dataset(Path::new(".")).unwrap();
    let post = spec.posterior(&data, Some(SolverConfig::new(Method::Rk4, 0.1).unwrap())).unwrap();
    let quad = quadrature_marginal(&post, &GridSpec::default()).unwrap();
    for seed in [1, 2, 3] {
        let chain = odebayes::harness::run_chain(&spec, &data, 0.1, seed).unwrap();
        let gd = gelfand_dey_kde(&chain, &spec.kde).unwrap();
        let z = (gd.log_marginal - quad.log_marginal) / gd.mc_standard_error;
        assert!(z.abs() < 3.5, "seed {seed}: z = {z}");
    }
}

#[test]
fn quadrature_matches_closed_form_evidence() {
    for seed in 0..5 {
        let model = common::conjugate(20, 0.5, 1.0, 2.0, seed);
        let q = quadrature_marginal(&model.posterior, &GridSpec::default()).unwrap();
        assert!((q.log_marginal - model.log_evidence).abs() < 1e-7, "seed {seed}");
        assert!(model.posterior.dim() == 1);
    }
}
