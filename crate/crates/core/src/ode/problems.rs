//! Built-in initial value problems with closed-form solutions.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ode::{odeint_fn, SolverConfig, Trajectory};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Problem {
    /// `y' = y`, `y(0) = 1` on `[0, 1]`.
    ExpGrowth,
    /// `y' = cos(t)·y`, `y(0) = 1` on `[0, 3]`.
    CosGrowth,
    /// `x' = v, v' = −x` from `(1, 0)` on `[0, 2π]`.
    Oscillator,
}

impl Problem {
    pub const ALL: [Problem; 3] = [Problem::ExpGrowth, Problem::CosGrowth, Problem::Oscillator];

    pub fn name(self) -> &'static str {
        match self {
            Problem::ExpGrowth => "exp-growth",
            Problem::CosGrowth => "cos-growth",
            Problem::Oscillator => "oscillator",
        }
    }

    pub fn interval(self) -> (f64, f64) {
        match self {
            Problem::ExpGrowth => (0.0, 1.0),
            Problem::CosGrowth => (0.0, 3.0),
            Problem::Oscillator => (0.0, std::f64::consts::TAU),
        }
    }

    pub fn initial(self) -> Tensor<f64> {
        self.exact(0.0)
    }

    pub fn rhs(self, t: f64, y: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(match self {
            Problem::ExpGrowth => y.clone(),
            Problem::CosGrowth => y.scale(t.cos()),
            Problem::Oscillator => {
                let d = y.data();
                Tensor::new([2], vec![d[1], -d[0]])?
            }
        })
    }

    pub fn exact(self, t: f64) -> Tensor<f64> {
        let v = match self {
            Problem::ExpGrowth => vec![t.exp()],
            Problem::CosGrowth => vec![t.sin().exp()],
            Problem::Oscillator => vec![t.cos(), -t.sin()],
        };
        let n = v.len();
        Tensor::new([n], v).expect("length matches")
    }

    pub fn solve(self, config: &SolverConfig<f64>) -> Result<Trajectory<f64>> {
        let (t0, t1) = self.interval();
        odeint_fn(|t, y| self.rhs(t, y), &self.initial(), t0, t1, &[], config)
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Problem::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown problem `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// A solved problem with its error against the closed form.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub problem: String,
    pub method: String,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub state_norms: Vec<f64>,
    pub steps_taken: usize,
    pub rejected_steps: usize,
    pub nfe: usize,
    pub exact_final: Vec<f64>,
    /// Max-abs difference between the final state and the closed form.
    pub final_error: f64,
}

impl SolveReport {
    pub fn run(problem: Problem, config: &SolverConfig<f64>) -> Result<Self> {
        let traj = problem.solve(config)?;
        let exact = problem.exact(problem.interval().1);
        let last = traj.final_state();
        let final_error = last
            .data()
            .iter()
            .zip(exact.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(SolveReport {
            problem: problem.name().into(),
            method: config.method.name().into(),
            states: traj.states.iter().map(|s| s.data().to_vec()).collect(),
            state_norms: traj.states.iter().map(|s| s.data().iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
            times: traj.times,
            steps_taken: traj.stats.steps_taken,
            rejected_steps: traj.stats.rejected_steps,
            nfe: traj.stats.nfe,
            exact_final: exact.data().to_vec(),
            final_error,
        })
    }
}
