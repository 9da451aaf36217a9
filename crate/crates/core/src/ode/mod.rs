//! Explicit ODE integrators and adjoint sensitivities for
//! `dh/dt = g(h, t; θ)`.
//!
//! Three ways to run a solve:
//! - [`odeint`] on plain tensors (inference, reference solutions);
//! - [`odeint_graph`], which unrolls every solver stage onto a [`Graph`]
//!   so ordinary backprop differentiates the discrete solve;
//! - [`odeint_adjoint_op`], which records the whole solve as one node whose
//!   backward pass integrates the adjoint system ([`adjoint_backward`]),
//!   keeping memory independent of the number of steps.

mod config;
mod integrate;
pub mod problems;

use std::rc::Rc;

pub use config::{Method, SolveStats, SolverConfig, Trajectory, DEFAULT_MAX_STEPS, DEFAULT_TOLERANCE};

use integrate::{integrate, StateSpace};

use crate::autodiff::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Right-hand side `g(h, t; θ)` expressed as operations on a graph, so the
/// same definition serves forward solves, unrolled backprop and
/// vector-Jacobian products.
pub trait OdeFunc<T: Scalar> {
    /// Records `g(h, t; θ)`. `params` binds every name in the problem's
    /// parameter set. The result must have the shape of `h`.
    fn eval(&self, graph: &Graph<T>, params: &Bound, t: T, h: Var) -> Result<Var>;
}

impl<T: Scalar, F> OdeFunc<T> for F
where
    F: Fn(&Graph<T>, &Bound, T, Var) -> Result<Var>,
{
    fn eval(&self, graph: &Graph<T>, params: &Bound, t: T, h: Var) -> Result<Var> {
        self(graph, params, t, h)
    }
}

/// Initial value problem over `[t0, t1]` (either orientation).
#[derive(Clone, Debug)]
pub struct OdeProblem<T, F> {
    pub dynamics: F,
    pub params: ParamSet<T>,
    pub h0: Tensor<T>,
    pub t0: T,
    pub t1: T,
}

/// Gradients returned by [`adjoint_backward`].
#[derive(Clone, Debug)]
pub struct AdjointGradients<T> {
    pub grad_h0: Tensor<T>,
    pub grad_params: ParamSet<T>,
    pub stats: SolveStats,
}

/// Builds the monotone sample-time list `t0, eval_times…, t1`.
pub(crate) fn sample_times<T: Scalar>(t0: T, t1: T, eval_times: &[T]) -> Result<Vec<T>> {
    let dir = if t1 >= t0 { T::one() } else { -T::one() };
    let mut times = vec![t0];
    for &t in eval_times {
        let last = *times.last().expect("non-empty");
        if (t - t0) * dir < T::zero() || (t1 - t) * dir < T::zero() {
            return Err(Error::Config(format!(
                "eval time {t} outside [{t0}, {t1}]"
            )));
        }
        if (t - last) * dir < T::zero() {
            return Err(Error::Config("eval times must be sorted along the integration direction".into()));
        }
        if t != last {
            times.push(t);
        }
    }
    if *times.last().expect("non-empty") != t1 {
        times.push(t1);
    }
    Ok(times)
}

/// State space of tuples of tensors with a closure right-hand side.
struct TupleSpace<F> {
    rhs: F,
}

impl<T, F> StateSpace<T> for TupleSpace<F>
where
    T: Scalar,
    F: FnMut(T, &[Rc<Tensor<T>>]) -> Result<Vec<Tensor<T>>>,
{
    type State = Vec<Rc<Tensor<T>>>;

    fn rhs(&mut self, t: T, y: &Self::State) -> Result<Self::State> {
        let out = (self.rhs)(t, y)?;
        if out.len() != y.len() || out.iter().zip(y).any(|(o, s)| o.shape() != s.shape()) {
            return Err(Error::shape("ode rhs", "dynamics output shape differs from state shape"));
        }
        Ok(out.into_iter().map(Rc::new).collect())
    }

    fn combine(&mut self, y: &Self::State, terms: &[(T, &Self::State)]) -> Result<Self::State> {
        let mut out = Vec::with_capacity(y.len());
        for (i, base) in y.iter().enumerate() {
            let mut acc = (**base).clone();
            for (c, k) in terms {
                if *c != T::zero() {
                    acc.axpy(*c, &k[i])?;
                }
            }
            out.push(Rc::new(acc));
        }
        Ok(out)
    }

    fn values(&self, y: &Self::State) -> Vec<Rc<Tensor<T>>> {
        y.clone()
    }
}

/// Solves a problem whose right-hand side is a plain tensor closure.
pub fn odeint_fn<T: Scalar>(
    mut rhs: impl FnMut(T, &Tensor<T>) -> Result<Tensor<T>>,
    h0: &Tensor<T>,
    t0: T,
    t1: T,
    eval_times: &[T],
    config: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    let times = sample_times(t0, t1, eval_times)?;
    let mut space = TupleSpace {
        rhs: |t: T, y: &[Rc<Tensor<T>>]| Ok(vec![rhs(t, &y[0])?]),
    };
    let (states, stats) = integrate(&mut space, vec![Rc::new(h0.clone())], &times, config)?;
    let states = states
        .into_iter()
        .map(|s| Rc::try_unwrap(s.into_iter().next().expect("one component")).unwrap_or_else(|rc| (*rc).clone()))
        .collect();
    Ok(Trajectory {
        times,
        states,
        stats,
    })
}

/// Evaluates `g` once on a gradient-free tape.
pub fn eval_dynamics<T: Scalar, F: OdeFunc<T>>(
    f: &F,
    params: &ParamSet<T>,
    t: T,
    h: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = Graph::no_grad();
    let bound = params.bind_constant(&g);
    let hv = g.constant(h.clone());
    let out = f.eval(&g, &bound, t, hv)?;
    Ok((*g.value(out)).clone())
}

/// Solves `problem`, reporting the state at `t0`, each of `eval_times`
/// and `t1`.
pub fn odeint<T: Scalar, F: OdeFunc<T>>(
    problem: &OdeProblem<T, F>,
    config: &SolverConfig<T>,
    eval_times: &[T],
) -> Result<Trajectory<T>> {
    odeint_fn(
        |t, h| eval_dynamics(&problem.dynamics, &problem.params, t, h),
        &problem.h0,
        problem.t0,
        problem.t1,
        eval_times,
        config,
    )
}

/// Integrates the augmented system `(h, a, a_θ)` from `t1` back to `t0`:
///
/// ```text
/// dh/dt   =  g(h, t; θ)
/// da/dt   = -aᵀ ∂g/∂h
/// da_θ/dt = -aᵀ ∂g/∂θ
/// ```
///
/// starting from `(h(t1), ∂L/∂h(t1), 0)`. The dynamics are re-evaluated on
/// a fresh tape at every stage, so only the augmented state is stored.
pub fn adjoint_backward<T: Scalar, F: OdeFunc<T>>(
    problem: &OdeProblem<T, F>,
    config: &SolverConfig<T>,
    h1: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<AdjointGradients<T>> {
    if h1.shape() != problem.h0.shape() || grad_output.shape() != h1.shape() {
        return Err(Error::shape(
            "adjoint_backward",
            format!(
                "h0 {:?}, h1 {:?}, grad {:?}",
                problem.h0.shape(),
                h1.shape(),
                grad_output.shape()
            ),
        ));
    }
    let names: Vec<String> = problem.params.names().map(str::to_string).collect();
    let mut state = vec![Rc::new(h1.clone()), Rc::new(grad_output.clone())];
    state.extend(problem.params.iter().map(|(_, v)| Rc::new(Tensor::zeros_like(v))));

    let mut space = TupleSpace {
        rhs: |t: T, y: &[Rc<Tensor<T>>]| -> Result<Vec<Tensor<T>>> {
            let g = Graph::new();
            let hv = g.leaf((*y[0]).clone());
            let bound = problem.params.bind(&g);
            let out = problem.dynamics.eval(&g, &bound, t, hv)?;
            let grads = g.backward_from(out, (*y[1]).clone())?;
            let mut d = Vec::with_capacity(y.len());
            d.push((*g.value(out)).clone());
            d.push(neg_or_zero(grads.get(hv), &y[0]));
            for (name, shape_ref) in names.iter().zip(&y[2..]) {
                d.push(neg_or_zero(grads.get(bound.get(name)?), shape_ref));
            }
            Ok(d)
        },
    };
    let times = [problem.t1, problem.t0];
    let (states, stats) = integrate(&mut space, state, &times, config)?;
    let last = states.into_iter().last().expect("two samples");
    let mut grad_params = ParamSet::new();
    for (name, v) in names.iter().zip(&last[2..]) {
        grad_params.set(name.clone(), (**v).clone());
    }
    Ok(AdjointGradients {
        grad_h0: (*last[1]).clone(),
        grad_params,
        stats,
    })
}

fn neg_or_zero<T: Scalar>(g: Option<&Tensor<T>>, like: &Tensor<T>) -> Tensor<T> {
    match g {
        Some(g) => g.scale(-T::one()),
        None => Tensor::zeros_like(like),
    }
}

struct GraphSpace<'g, T: Scalar, F> {
    graph: &'g Graph<T>,
    func: &'g F,
    params: &'g Bound,
}

impl<T: Scalar, F: OdeFunc<T>> StateSpace<T> for GraphSpace<'_, T, F> {
    type State = Var;

    fn rhs(&mut self, t: T, y: &Var) -> Result<Var> {
        let out = self.func.eval(self.graph, self.params, t, *y)?;
        if self.graph.shape(out) != self.graph.shape(*y) {
            return Err(Error::shape("ode rhs", "dynamics output shape differs from state shape"));
        }
        Ok(out)
    }

    fn combine(&mut self, y: &Var, terms: &[(T, &Var)]) -> Result<Var> {
        let mut all = vec![(T::one(), *y)];
        all.extend(terms.iter().filter(|(c, _)| *c != T::zero()).map(|(c, v)| (*c, **v)));
        if all.len() == 1 {
            return Ok(*y);
        }
        self.graph.lincomb(&all)
    }

    fn values(&self, y: &Var) -> Vec<Rc<Tensor<T>>> {
        vec![self.graph.value(*y)]
    }
}

/// Unrolls the solve onto `graph`; returns one node per sample time
/// (`t0`, `eval_times…`, `t1`). Backprop through the result differentiates
/// the discrete solver exactly.
pub fn odeint_graph<T: Scalar, F: OdeFunc<T>>(
    graph: &Graph<T>,
    func: &F,
    params: &Bound,
    h0: Var,
    t0: T,
    t1: T,
    eval_times: &[T],
    config: &SolverConfig<T>,
) -> Result<(Vec<T>, Vec<Var>, SolveStats)> {
    let times = sample_times(t0, t1, eval_times)?;
    let mut space = GraphSpace {
        graph,
        func,
        params,
    };
    let (states, stats) = integrate(&mut space, h0, &times, config)?;
    Ok((times, states, stats))
}

/// Records the solve `h0 ↦ h(t1)` as a single graph node whose backward
/// pass runs [`adjoint_backward`]. `params` names the graph nodes standing
/// for θ; their gradients come from the adjoint integral.
pub fn odeint_adjoint_op<T, F>(
    graph: &Graph<T>,
    func: F,
    params: &Bound,
    h0: Var,
    t0: T,
    t1: T,
    config: &SolverConfig<T>,
) -> Result<(Var, SolveStats)>
where
    T: Scalar,
    F: OdeFunc<T> + Clone + 'static,
{
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let vars: Vec<Var> = params.iter().map(|(_, v)| v).collect();
    let mut theta = ParamSet::new();
    for (n, &v) in names.iter().zip(&vars) {
        theta.set(n.clone(), (*graph.value(v)).clone());
    }
    let problem = OdeProblem {
        dynamics: func,
        params: theta,
        h0: (*graph.value(h0)).clone(),
        t0,
        t1,
    };
    let traj = odeint(&problem, config, &[])?;
    let stats = traj.stats;
    let h1 = traj.states.into_iter().last().expect("final state");

    let mut inputs = vec![h0];
    inputs.extend(&vars);
    let config = config.clone();
    let dynamics = problem.dynamics;
    let out = graph.record(
        "odeint_adjoint",
        &inputs,
        h1,
        Box::new(move |c| {
            let mut params = ParamSet::new();
            for (n, v) in names.iter().zip(&c.inputs[1..]) {
                params.set(n.clone(), (**v).clone());
            }
            let problem = OdeProblem {
                dynamics: dynamics.clone(),
                params,
                h0: (*c.inputs[0]).clone(),
                t0,
                t1,
            };
            let adj = adjoint_backward(&problem, &config, c.output, c.grad)?;
            let mut grads = vec![Some(adj.grad_h0)];
            for n in &names {
                grads.push(Some(adj.grad_params.get(n)?.clone()));
            }
            Ok(grads)
        }),
    )?;
    Ok((out, stats))
}

/// Empirical convergence order of a fixed-step method: the mean of
/// `log2(err(h) / err(h/2))` over a ladder of `levels` halvings starting at
/// `base_step`, with the error measured at `t1` against `exact`.
pub fn convergence_order<T: Scalar>(
    method: Method,
    mut rhs: impl FnMut(T, &Tensor<T>) -> Result<Tensor<T>>,
    h0: &Tensor<T>,
    t0: T,
    t1: T,
    exact: &Tensor<T>,
    base_step: T,
    levels: usize,
) -> Result<f64> {
    if method.is_adaptive() {
        return Err(Error::Config("convergence order needs a fixed-step method".into()));
    }
    if levels < 2 {
        return Err(Error::Config("need at least two step sizes".into()));
    }
    let mut errors = Vec::with_capacity(levels);
    let mut step = base_step;
    for _ in 0..levels {
        let mut cfg = SolverConfig::fixed(method, step);
        cfg.max_steps = usize::MAX;
        let traj = odeint_fn(&mut rhs, h0, t0, t1, &[], &cfg)?;
        let err = traj.final_state().zip_map(exact, |a, b| a - b)?.max_abs();
        errors.push(err.as_f64());
        step = step * T::c(0.5);
    }
    let rates: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}
