mod common;

use odebayes::bayes::max_discrepancy_dh;
use odebayes::models::{logistic_exact, GlucoseParams, GlucoseSystem, LogisticParams, LogisticSystem};
use odebayes::ode::{estimate_order, integrate, observe_at, Method, OdeSystem, SolverConfig, SolverError, StateVector};
use odebayes::stats::ols_slope;
use proptest::prelude::*;

/// `dx/dt = k x`.
struct Linear;

impl OdeSystem for Linear {
    fn dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn rhs(&self, x: &[f64], _t: f64, theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * x[0];
    }
    fn observe(&self, x: &[f64]) -> f64 {
        x[0]
    }
    fn initial_state(&self) -> StateVector {
        StateVector(vec![1.0])
    }
}

fn logistic() -> LogisticSystem {
    LogisticSystem::from(LogisticParams::default())
}

#[test]
fn logistic_closed_form_matches_independent_oracle() {
    let p = LogisticParams::default();
    for i in 0..=100 {
        let t = 0.1 * i as f64;
        let got = logistic_exact(t, &p);
        let want = common::logistic_oracle(t, p.lambda, p.capacity, p.x0);
        assert!((got - want).abs() <= 1e-12 * want, "t={t}: {got} vs {want}");
    }
}

#[test]
fn logistic_orders_match_nominal() {
    let system = logistic();
    let hs = [0.1, 0.05, 0.025, 0.0125];
    let oracle = |t: f64| StateVector(vec![common::logistic_oracle(t, 1.0, 1000.0, 100.0)]);
    for (method, want, tol) in [(Method::Euler, 1.0, 0.1), (Method::Rk2, 2.0, 0.2), (Method::Rk4, 4.0, 0.3)] {
        let p = estimate_order(&system, &[1.0], method, &hs, 10.0, oracle).unwrap();
        assert!((p - want).abs() <= tol, "{method}: {p}");
    }
}

#[test]
fn observation_discrepancy_shrinks_at_solver_order() {
    // the maximal observation error over the data times follows the same
    // h^p law as the state error
    let system = logistic();
    let times: Vec<f64> = (0..26).map(|i| 0.4 * i as f64).collect();
    let hs = [0.1, 0.05, 0.025, 0.0125];
    for (method, want) in [(Method::Euler, 1.0), (Method::Rk2, 2.0), (Method::Rk4, 4.0)] {
        let logs: Vec<(f64, f64)> = hs
            .iter()
            .map(|&h| {
                let cfg = SolverConfig::new(method, h).unwrap();
                let d = max_discrepancy_dh(&times, &[1.0], &system, &cfg, &system).unwrap();
                (h.ln(), d.ln())
            })
            .collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) = logs.into_iter().unzip();
        let slope = ols_slope(&xs, &ys);
        assert!((slope - want).abs() < 0.15 * want, "{method}: {slope}");
    }
}

#[test]
fn misaligned_observation_time_is_rejected() {
    let cfg = SolverConfig::new(Method::Rk4, 0.3).unwrap();
    let err = observe_at(&logistic(), &[1.0], &cfg, &[0.0, 0.4]).unwrap_err();
    assert!(matches!(err, SolverError::GridMismatch { .. }), "{err:?}");
}

#[test]
fn glucose_digestive_compartment_decays_exponentially() {
    let params = GlucoseParams::default();
    let system = GlucoseSystem::new(params, 90.0, 200.0);
    for h in [0.02, 0.01, 0.005] {
        let cfg = SolverConfig::new(Method::Rk4, h).unwrap();
        let traj = integrate(&system, &[params.theta0], &cfg, 0.0, 2.0).unwrap();
        let worst = traj
            .grid
            .iter()
            .zip(&traj.states)
            .map(|(t, x)| (x.0[3] - 200.0 * (-t / params.theta2).exp()).abs())
            .fold(0.0, f64::max);
        // global RK4 error on dD/dt = −D/θ2 is bounded by C·h⁴
        assert!(worst < 200.0 * (h / params.theta2).powi(4), "h={h}: {worst}");
    }
}

proptest! {
    #[test]
    fn single_steps_on_linear_field_are_taylor_polynomials(k in -3.0f64..3.0, h in 0.001f64..0.5) {
        let z = k * h;
        let cases = [
            (Method::Euler, 1.0 + z),
            (Method::Rk2, 1.0 + z + z * z / 2.0),
            (Method::Rk4, 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0),
        ];
        for (method, want) in cases {
            let cfg = SolverConfig::new(method, h).unwrap();
            let x = integrate(&Linear, &[k], &cfg, 0.0, h).unwrap();
            prop_assert!((x.last().0[0] - want).abs() < 1e-13, "{}", method);
        }
    }

    #[test]
    fn observe_at_agrees_with_full_trajectory(n_steps in 1usize..200, every in 1usize..10, lambda in 0.2f64..2.0) {
        let h = 0.05;
        let cfg = SolverConfig::new(Method::Rk4, h).unwrap();
        let system = logistic();
        let traj = integrate(&system, &[lambda], &cfg, 0.0, h * n_steps as f64).unwrap();
        let idx: Vec<usize> = (0..=n_steps).step_by(every).collect();
        let times: Vec<f64> = idx.iter().map(|&i| h * i as f64).collect();
        let obs = observe_at(&system, &[lambda], &cfg, &times).unwrap();
        for (i, y) in idx.iter().zip(obs) {
            prop_assert_eq!(y, traj.states[*i].0[0]);
        }
    }

    #[test]
    fn rk4_logistic_stays_between_x0_and_capacity(lambda in 0.1f64..3.0, h in prop::sample::select(vec![0.4, 0.2, 0.1, 0.05])) {
        let cfg = SolverConfig::new(Method::Rk4, h).unwrap();
        let traj = integrate(&logistic(), &[lambda], &cfg, 0.0, 10.0).unwrap();
        for x in &traj.states {
            prop_assert!(x.0[0] >= 100.0 - 1e-9 && x.0[0] <= 1000.0 + 1e-9);
        }
    }
}
