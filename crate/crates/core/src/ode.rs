//! Fixed-step explicit one-step integrators (Euler, midpoint RK2, classical RK4).
//!
//! Observation times must sit exactly on the solver grid `t0 + k h`; a step
//! size that does not divide the observation gaps is rejected up front rather
//! than interpolated.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Relative tolerance used when checking that a time lands on the solver grid.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// Errors below this threshold are treated as exact when estimating the order.
const DEGENERATE_ERROR: f64 = 1e-13;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SolverError {
    #[error("non-finite state at t = {t} (step {step}) for parameters {theta:?}")]
    NonFiniteState { t: f64, step: usize, theta: Vec<f64> },
    #[error("time {time} is not a node of the grid t0 = {t0}, h = {h}")]
    GridMismatch { time: f64, t0: f64, h: f64 },
    #[error("invalid step size {0}")]
    InvalidStep(f64),
    #[error("order estimate needs at least 3 step sizes, got {0}")]
    TooFewSteps(usize),
    #[error("all errors are below {DEGENERATE_ERROR:e}; order is unidentifiable")]
    DegenerateFit,
}

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk2,
    Rk4,
}

impl Method {
    /// Global order of accuracy.
    pub fn order(self) -> u32 {
        match self {
            Method::Euler => 1,
            Method::Rk2 => 2,
            Method::Rk4 => 4,
        }
    }

    fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Rk2 => 2,
            Method::Rk4 => 4,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Euler => "euler",
            Method::Rk2 => "rk2",
            Method::Rk4 => "rk4",
        };
        f.write_str(name)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" | "rk1" => Ok(Method::Euler),
            "rk2" | "midpoint" => Ok(Method::Rk2),
            "rk4" => Ok(Method::Rk4),
            other => Err(format!("unknown solver '{other}' (expected euler, rk2 or rk4)")),
        }
    }
}

/// Solver method plus a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub h: f64,
}

impl SolverConfig {
    pub fn new(method: Method, h: f64) -> Result<Self, SolverError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(SolverError::InvalidStep(h));
        }
        Ok(Self { method, h })
    }

    pub fn order(&self) -> u32 {
        self.method.order()
    }

    /// Number of steps from `t0` to `t`, if `t` is a grid node.
    pub fn steps_to(&self, t0: f64, t: f64) -> Result<usize, SolverError> {
        let ratio = (t - t0) / self.h;
        let k = ratio.round();
        let scale = ratio.abs().max(1.0);
        if k < 0.0 || (ratio - k).abs() > GRID_TOLERANCE * scale {
            return Err(SolverError::GridMismatch { time: t, t0, h: self.h });
        }
        Ok(k as usize)
    }

    /// Checks that every time is a grid node and returns the step indices.
    pub fn align(&self, t0: f64, times: &[f64]) -> Result<Vec<usize>, SolverError> {
        times.iter().map(|&t| self.steps_to(t0, t)).collect()
    }
}

/// State of an ODE system at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to another state of the same dimension.
    pub fn distance(&self, other: &StateVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        StateVector(v)
    }
}

/// Right-hand side `dX/dt = F(X, t, θ)` together with the observation map and
/// initial condition.
pub trait OdeSystem: Send + Sync {
    /// State dimension.
    fn dim(&self) -> usize;

    /// Number of parameters `θ` the right-hand side expects.
    fn param_dim(&self) -> usize;

    /// Writes `F(x, t, θ)` into `out` (length `dim()`).
    fn rhs(&self, x: &[f64], t: f64, theta: &[f64], out: &mut [f64]);

    /// Scalar observable `f(x)`.
    fn observe(&self, x: &[f64]) -> f64;

    fn initial_time(&self) -> f64 {
        0.0
    }

    fn initial_state(&self) -> StateVector;
}

impl<S: OdeSystem + ?Sized> OdeSystem for std::sync::Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn rhs(&self, x: &[f64], t: f64, theta: &[f64], out: &mut [f64]) {
        (**self).rhs(x, t, theta, out)
    }
    fn observe(&self, x: &[f64]) -> f64 {
        (**self).observe(x)
    }
    fn initial_time(&self) -> f64 {
        (**self).initial_time()
    }
    fn initial_state(&self) -> StateVector {
        (**self).initial_state()
    }
}

/// Grid times and the numerical states at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Vec<f64>,
    pub states: Vec<StateVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn last(&self) -> &StateVector {
        self.states.last().expect("trajectory has at least one node")
    }
}

/// Stage buffers reused across steps so the inner loop does not allocate.
pub struct Stepper {
    method: Method,
    dim: usize,
    /// Four stage slopes followed by the stage argument, `dim` each.
    buf: Vec<f64>,
}

impl Stepper {
    pub fn new(method: Method, dim: usize) -> Self {
        Self { method, dim, buf: vec![0.0; 5 * dim] }
    }

    /// Advances `x` in place by one step. Returns `false` if any entry of the
    /// new state is not finite.
    pub fn step<S: OdeSystem + ?Sized>(
        &mut self,
        system: &S,
        x: &mut [f64],
        t: f64,
        h: f64,
        theta: &[f64],
    ) -> bool {
        let (k, tmp) = self.buf.split_at_mut(4 * self.dim);
        let (k12, k34) = k.split_at_mut(2 * self.dim);
        let (k1, k2) = k12.split_at_mut(self.dim);
        let (k3, k4) = k34.split_at_mut(self.dim);
        match self.method {
            Method::Euler => {
                system.rhs(x, t, theta, k1);
                for (xi, ki) in x.iter_mut().zip(k1.iter()) {
                    *xi += h * ki;
                }
            }
            Method::Rk2 => {
                system.rhs(x, t, theta, k1);
                for i in 0..x.len() {
                    tmp[i] = x[i] + 0.5 * h * k1[i];
                }
                system.rhs(tmp, t + 0.5 * h, theta, k2);
                for (xi, ki) in x.iter_mut().zip(k2.iter()) {
                    *xi += h * ki;
                }
            }
            Method::Rk4 => {
                system.rhs(x, t, theta, k1);
                for i in 0..x.len() {
                    tmp[i] = x[i] + 0.5 * h * k1[i];
                }
                system.rhs(tmp, t + 0.5 * h, theta, k2);
                for i in 0..x.len() {
                    tmp[i] = x[i] + 0.5 * h * k2[i];
                }
                system.rhs(tmp, t + 0.5 * h, theta, k3);
                for i in 0..x.len() {
                    tmp[i] = x[i] + h * k3[i];
                }
                system.rhs(tmp, t + h, theta, k4);
                for i in 0..x.len() {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        x.iter().all(|v| v.is_finite())
    }

    pub fn rhs_evaluations_per_step(&self) -> usize {
        self.method.stages()
    }
}

fn single_step<S: OdeSystem + ?Sized>(
    method: Method,
    system: &S,
    x: &StateVector,
    t: f64,
    h: f64,
    theta: &[f64],
) -> Result<StateVector, SolverError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(SolverError::InvalidStep(h));
    }
    let mut stepper = Stepper::new(method, x.len());
    let mut next = x.0.clone();
    if stepper.step(system, &mut next, t, h, theta) {
        Ok(StateVector(next))
    } else {
        Err(SolverError::NonFiniteState { t, step: 0, theta: theta.to_vec() })
    }
}

/// One explicit Euler step: `x + h F(x, t, θ)`.
pub fn step_euler<S: OdeSystem + ?Sized>(
    system: &S,
    x: &StateVector,
    t: f64,
    h: f64,
    theta: &[f64],
) -> Result<StateVector, SolverError> {
    single_step(Method::Euler, system, x, t, h, theta)
}

/// One explicit midpoint step: `x + h F(x + h/2 F(x, t), t + h/2)`.
pub fn step_rk2<S: OdeSystem + ?Sized>(
    system: &S,
    x: &StateVector,
    t: f64,
    h: f64,
    theta: &[f64],
) -> Result<StateVector, SolverError> {
    single_step(Method::Rk2, system, x, t, h, theta)
}

/// One classical fourth-order Runge-Kutta step.
pub fn step_rk4<S: OdeSystem + ?Sized>(
    system: &S,
    x: &StateVector,
    t: f64,
    h: f64,
    theta: &[f64],
) -> Result<StateVector, SolverError> {
    single_step(Method::Rk4, system, x, t, h, theta)
}

/// Integrates from `t0` to `t_end`, keeping every grid node.
pub fn integrate<S: OdeSystem + ?Sized>(
    system: &S,
    theta: &[f64],
    config: &SolverConfig,
    t0: f64,
    t_end: f64,
) -> Result<Trajectory, SolverError> {
    let n_steps = config.steps_to(t0, t_end)?;
    let x0 = system.initial_state();
    let mut stepper = Stepper::new(config.method, x0.len());
    let mut x = x0.0.clone();
    let mut grid = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    grid.push(t0);
    states.push(x0);
    for i in 0..n_steps {
        let t = t0 + i as f64 * config.h;
        if !stepper.step(system, &mut x, t, config.h, theta) {
            return Err(SolverError::NonFiniteState {
                t: t + config.h,
                step: i + 1,
                theta: theta.to_vec(),
            });
        }
        grid.push(t0 + (i + 1) as f64 * config.h);
        states.push(StateVector(x.clone()));
    }
    Ok(Trajectory { grid, states })
}

/// Observable `f(X^h(t_i))` at each requested time, which must be ascending
/// grid nodes at or after the system's initial time.
pub fn observe_at<S: OdeSystem + ?Sized>(
    system: &S,
    theta: &[f64],
    config: &SolverConfig,
    times: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let t0 = system.initial_time();
    let x0 = system.initial_state();
    let mut stepper = Stepper::new(config.method, x0.len());
    let mut x = x0.0;
    let mut out = Vec::with_capacity(times.len());
    let mut node = 0usize;
    for &t in times {
        let target = config.steps_to(t0, t)?;
        while node < target {
            let t = t0 + node as f64 * config.h;
            if !stepper.step(system, &mut x, t, config.h, theta) {
                return Err(SolverError::NonFiniteState {
                    t: t + config.h,
                    step: node + 1,
                    theta: theta.to_vec(),
                });
            }
            node += 1;
        }
        out.push(system.observe(&x));
    }
    Ok(out)
}

/// Empirical global order: least-squares slope of `log ‖error(t_check)‖`
/// against `log h`.
pub fn estimate_order<S, O>(
    system: &S,
    theta: &[f64],
    method: Method,
    h_list: &[f64],
    t_check: f64,
    oracle: O,
) -> Result<f64, SolverError>
where
    S: OdeSystem + ?Sized,
    O: Fn(f64) -> StateVector,
{
    if h_list.len() < 3 {
        return Err(SolverError::TooFewSteps(h_list.len()));
    }
    let t0 = system.initial_time();
    let exact = oracle(t_check);
    let mut points = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let config = SolverConfig::new(method, h)?;
        let traj = integrate(system, theta, &config, t0, t_check)?;
        let err = traj.last().distance(&exact);
        points.push((h.ln(), err));
    }
    if points.iter().all(|&(_, e)| e < DEGENERATE_ERROR) {
        return Err(SolverError::DegenerateFit);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.max(f64::MIN_POSITIVE).ln()).collect();
    Ok(crate::stats::ols_slope(&xs, &ys))
}
