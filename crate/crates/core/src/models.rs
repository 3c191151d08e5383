//! Forward models: logistic growth (with a closed-form solution) and a
//! four-compartment glucose–insulin minimal model.

use crate::ode::{OdeSystem, StateVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Forward map with a closed-form solution, used as the exact reference model.
pub trait ExactSolution: Send + Sync {
    fn param_dim(&self) -> usize;

    /// `f(X_θ(t))` computed without a numerical solver.
    fn exact_observation(&self, t: f64, theta: &[f64]) -> f64;
}

/// Model selector used in experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Glucose,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Logistic => f.write_str("logistic"),
            ModelKind::Glucose => f.write_str("glucose"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(ModelKind::Logistic),
            "glucose" => Ok(ModelKind::Glucose),
            other => Err(format!("unknown model '{other}' (expected logistic or glucose)")),
        }
    }
}

// ---------------------------------------------------------------------------
// Logistic growth
// ---------------------------------------------------------------------------

/// Logistic growth `dX/dt = λ X (1 − X/K)`, `X(0) = X0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub lambda: f64,
    #[serde(rename = "K")]
    pub capacity: f64,
    #[serde(rename = "X0")]
    pub x0: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self { lambda: 1.0, capacity: 1000.0, x0: 100.0 }
    }
}

impl LogisticParams {
    pub fn is_valid(&self) -> bool {
        self.lambda > 0.0 && self.capacity > 0.0 && self.x0 > 0.0
    }
}

pub fn logistic_rhs(x: f64, params: &LogisticParams) -> f64 {
    params.lambda * x * (1.0 - x / params.capacity)
}

/// Closed-form logistic solution, written as `K / (1 + (K/X0 − 1) e^{−λt})`
/// so that large `λt` saturates to `K` instead of overflowing.
pub fn logistic_exact(t: f64, params: &LogisticParams) -> f64 {
    let LogisticParams { lambda, capacity, x0 } = *params;
    let decay = (-lambda * t).exp();
    capacity / (1.0 + (capacity / x0 - 1.0) * decay)
}

/// Logistic system with known `K` and `X0`; the single inferred parameter is
/// the growth rate `θ = [λ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticSystem {
    pub capacity: f64,
    pub x0: f64,
}

impl LogisticSystem {
    pub fn new(capacity: f64, x0: f64) -> Self {
        Self { capacity, x0 }
    }

    fn params(&self, lambda: f64) -> LogisticParams {
        LogisticParams { lambda, capacity: self.capacity, x0: self.x0 }
    }

    pub fn exact_state(&self, t: f64, theta: &[f64]) -> StateVector {
        StateVector(vec![logistic_exact(t, &self.params(theta[0]))])
    }
}

impl From<LogisticParams> for LogisticSystem {
    fn from(p: LogisticParams) -> Self {
        Self::new(p.capacity, p.x0)
    }
}

impl OdeSystem for LogisticSystem {
    fn dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &[f64], _t: f64, theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * x[0] * (1.0 - x[0] / self.capacity);
    }

    fn observe(&self, x: &[f64]) -> f64 {
        x[0]
    }

    fn initial_state(&self) -> StateVector {
        StateVector(vec![self.x0])
    }
}

impl ExactSolution for LogisticSystem {
    fn param_dim(&self) -> usize {
        1
    }

    fn exact_observation(&self, t: f64, theta: &[f64]) -> f64 {
        logistic_exact(t, &self.params(theta[0]))
    }
}

// ---------------------------------------------------------------------------
// Glucose–insulin minimal model
// ---------------------------------------------------------------------------

/// Default digestive glucose load `D(0)`; the source data does not state it.
pub const DEFAULT_GLUCOSE_LOAD: f64 = 200.0;

/// Parameters of the minimal model. `theta0` (insulin production gain) is the
/// inferred one; the rest are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlucoseParams {
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub a: f64,
    pub b: f64,
    pub gb: f64,
}

impl Default for GlucoseParams {
    fn default() -> Self {
        Self { theta0: 10.0, theta1: 26.6, theta2: 0.2, a: 1.0, b: 2.0, gb: 80.0 }
    }
}

impl GlucoseParams {
    pub fn is_valid(&self) -> bool {
        [self.theta0, self.theta1, self.theta2, self.a, self.b, self.gb]
            .iter()
            .all(|&v| v > 0.0)
    }
}

/// Derivative of `(G, I, L, D)`:
///
/// ```text
/// dG/dt = (L − I) G + D/θ2
/// dI/dt = θ0 (G/Gb − 1)⁺ − I/a
/// dL/dt = θ1 (1 − G/Gb)⁺ − L/b
/// dD/dt = −D/θ2
/// ```
pub fn glucose_rhs(x: &[f64], params: &GlucoseParams) -> [f64; 4] {
    let (g, i, l, d) = (x[0], x[1], x[2], x[3]);
    let p = params;
    [
        (l - i) * g + d / p.theta2,
        p.theta0 * (g / p.gb - 1.0).max(0.0) - i / p.a,
        p.theta1 * (1.0 - g / p.gb).max(0.0) - l / p.b,
        -d / p.theta2,
    ]
}

/// Glucose system with initial state `(G0, 0, 0, D0)` and inferred `θ = [θ0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSystem {
    pub params: GlucoseParams,
    pub g0: f64,
    pub d0: f64,
}

impl GlucoseSystem {
    pub fn new(params: GlucoseParams, g0: f64, d0: f64) -> Self {
        Self { params, g0, d0 }
    }
}

impl OdeSystem for GlucoseSystem {
    fn dim(&self) -> usize {
        4
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &[f64], _t: f64, theta: &[f64], out: &mut [f64]) {
        let params = GlucoseParams { theta0: theta[0], ..self.params };
        out.copy_from_slice(&glucose_rhs(x, &params));
    }

    /// Blood glucose, the first compartment.
    fn observe(&self, x: &[f64]) -> f64 {
        x[0]
    }

    fn initial_state(&self) -> StateVector {
        StateVector(vec![self.g0, 0.0, 0.0, self.d0])
    }
}

/// Observation map of any system.
pub fn observation_f<S: OdeSystem + ?Sized>(system: &S, x: &StateVector) -> f64 {
    system.observe(x.as_slice())
}

/// `y_i = θ + ε_i`: a constant-mean model whose evidence is available in
/// closed form under a normal prior. Used to check evidence estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConstantMean;

impl ExactSolution for ConstantMean {
    fn param_dim(&self) -> usize {
        1
    }

    fn exact_observation(&self, _t: f64, theta: &[f64]) -> f64 {
        theta[0]
    }
}
