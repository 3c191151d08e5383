use odebayes::bayes::Posterior;
use odebayes::evidence::{quadrature_marginal, GridSpec};
use odebayes::harness::ExperimentSpec;
use odebayes::models::ModelKind;
use odebayes::ode::{Method, SolverConfig};
use odebayes::regress::{bf_report, fit_curve, posterior_discrepancy, EvidencePoint, Statistic, SweepPoint};
use std::path::Path;

fn grid() -> GridSpec {
    GridSpec { rel_tol: 1e-10, ..GridSpec::default() }
}

fn logistic(sigma: f64) -> (ExperimentSpec, odebayes::bayes::Dataset) {
    let mut spec = ExperimentSpec::default_for(ModelKind::Logistic);
    spec.sigma = sigma;
    let data = spec.dataset(Path::new(".")).unwrap();
    (spec, data)
}

fn numerical(spec: &ExperimentSpec, data: &odebayes::bayes::Dataset, method: Method, h: f64) -> Posterior {
    spec.posterior(data, Some(SolverConfig::new(method, h).unwrap())).unwrap()
}

fn quad_points(spec: &ExperimentSpec, data: &odebayes::bayes::Dataset, method: Method, hs: &[f64]) -> Vec<EvidencePoint> {
    hs.iter()
        .map(|&h| {
            let q = quadrature_marginal(&numerical(spec, data, method, h), &grid()).unwrap();
            EvidencePoint { h, log_marginal: q.log_marginal, se: 1e-6, order: method.order() }
        })
        .collect()
}

#[test]
fn rk2_marginal_error_quarters_when_step_halves() {
    let (spec, data) = logistic(1.0);
    let exact = quadrature_marginal(&spec.posterior(&data, None).unwrap(), &grid()).unwrap().log_marginal;
    let hs = [0.05, 0.025, 0.0125, 0.00625];
    let errs: Vec<f64> = quad_points(&spec, &data, Method::Rk2, &hs)
        .iter()
        .map(|p| 1.0 - (p.log_marginal - exact).exp())
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((4.0 / 1.5..=4.0 * 1.5).contains(&ratio), "{errs:?}");
    }
}

#[test]
fn rk2_and_rk4_extrapolate_to_the_same_exact_marginal() {
    let (spec, data) = logistic(1.0);
    let exact = quadrature_marginal(&spec.posterior(&data, None).unwrap(), &grid()).unwrap().log_marginal;
    let rk4 = fit_curve(&quad_points(&spec, &data, Method::Rk4, &[0.2, 0.1, 0.05, 0.025]), 4).unwrap();
    let rk2 = fit_curve(&quad_points(&spec, &data, Method::Rk2, &[0.05, 0.025, 0.0125, 0.00625]), 2).unwrap();
    assert!((rk4.log_a - exact).abs() < 2e-3, "rk4 {} vs {exact}", rk4.log_a);
    assert!((rk2.log_a - exact).abs() < 2e-3, "rk2 {} vs {exact}", rk2.log_a);
    assert!((rk4.log_a - rk2.log_a).abs() < 2e-3);
}

#[test]
fn posterior_total_variation_shrinks_at_solver_order() {
    let (spec, data) = logistic(1.0);
    let exact = spec.posterior(&data, None).unwrap();
    let tol = GridSpec { rel_tol: 1e-4, ..GridSpec::default() };
    let tv: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|&h| posterior_discrepancy(&numerical(&spec, &data, Method::Rk4, h), &exact, Statistic::TotalVariation, &tol).unwrap())
        .collect();
    for w in tv.windows(2) {
        let ratio = w[0] / w[1];
        assert!((16.0 / 1.5..=16.0 * 1.5).contains(&ratio), "{tv:?}");
    }
}

#[test]
fn coarse_noisy_data_tolerates_coarser_steps() {
    // with identical quadrature marginals as inputs, σ = 30 flags a step at
    // least as coarse as σ = 1
    let hs = [0.4, 0.2, 0.1, 0.05, 0.025];
    let recommended = |sigma: f64| {
        let (spec, data) = logistic(sigma);
        let points = quad_points(&spec, &data, Method::Rk4, &hs);
        let sweep: Vec<SweepPoint> = points.iter().map(|&point| SweepPoint { point, cpu_seconds: 1.0 / point.h }).collect();
        let (_, report) = bf_report(&sweep, &points[1..], 0.99).unwrap();
        report.recommended.unwrap().h
    };
    let (fine, coarse) = (recommended(1.0), recommended(30.0));
    assert_eq!(fine, 0.2);
    assert_eq!(coarse, 0.4);
}
