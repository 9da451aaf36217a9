use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Explicit Runge-Kutta integrators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    /// Runge-Kutta-Fehlberg 4(5) with embedded error control.
    Fehlberg,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Euler, Method::Midpoint, Method::Rk4, Method::Fehlberg];

    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Fehlberg)
    }

    /// Classical order of the propagated solution.
    pub fn order(self) -> u32 {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 | Method::Fehlberg => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Fehlberg => "fehlberg",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown solver method `{s}`")))
    }
}

/// Integration method and its step or tolerance settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig<T> {
    pub method: Method,
    /// Step length for the fixed-step methods.
    pub step_size: T,
    /// Tolerances for the adaptive method.
    pub rtol: T,
    pub atol: T,
    /// Upper bound on step attempts; reaching it is an error.
    pub max_steps: usize,
}

pub const DEFAULT_MAX_STEPS: usize = 1000;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            method: Method::Midpoint,
            step_size: T::c(0.25),
            rtol: T::c(DEFAULT_TOLERANCE),
            atol: T::c(DEFAULT_TOLERANCE),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn fixed(method: Method, step_size: T) -> Self {
        SolverConfig {
            method,
            step_size,
            ..Self::default()
        }
    }

    pub fn fehlberg(rtol: T, atol: T) -> Self {
        SolverConfig {
            method: Method::Fehlberg,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.rtol > T::zero() && self.atol > T::zero()) {
            return bad("rtol and atol must be > 0");
        }
        if !self.method.is_adaptive() && !(self.step_size > T::zero() && self.step_size.is_finite()) {
            return bad("step_size must be > 0 for fixed-step methods");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        Ok(())
    }
}

/// Solver effort counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    /// Accepted steps.
    pub steps_taken: usize,
    /// Rejected adaptive attempts.
    pub rejected_steps: usize,
    /// Right-hand-side evaluations.
    pub nfe: usize,
}

impl SolveStats {
    pub fn attempts(&self) -> usize {
        self.steps_taken + self.rejected_steps
    }
}

/// States at the requested sample times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    /// Sample times in integration order, starting at `t0` and ending at `t1`.
    pub times: Vec<T>,
    pub states: Vec<Tensor<T>>,
    pub stats: SolveStats,
}

impl<T: Scalar> Trajectory<T> {
    pub fn steps_taken(&self) -> usize {
        self.stats.steps_taken
    }

    pub fn final_state(&self) -> &Tensor<T> {
        self.states.last().expect("trajectory holds at least h0")
    }

    /// State at a sample time, matched exactly.
    pub fn state_at(&self, t: T) -> Option<&Tensor<T>> {
        self.times.iter().position(|&s| s == t).map(|i| &self.states[i])
    }
}
