//! Runge-Kutta stepping shared by every state representation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ode::config::{Method, SolveStats, SolverConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A vector space the integrator can step in: plain tensors, tensor
/// tuples (adjoint augmented state) or recorded graph nodes.
pub(crate) trait StateSpace<T: Scalar> {
    type State: Clone;

    fn rhs(&mut self, t: T, y: &Self::State) -> Result<Self::State>;

    /// `y + Σ cᵢ·kᵢ`.
    fn combine(&mut self, y: &Self::State, terms: &[(T, &Self::State)]) -> Result<Self::State>;

    /// Flat views of the state's component tensors.
    fn values(&self, y: &Self::State) -> Vec<Rc<Tensor<T>>>;
}

// RKF45 tableau.
const FEHLBERG_C: [f64; 6] = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
const FEHLBERG_A: [&[f64]; 6] = [
    &[],
    &[0.25],
    &[3.0 / 32.0, 9.0 / 32.0],
    &[1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0],
    &[439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0],
    &[-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const FEHLBERG_B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];
const FEHLBERG_B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

struct Counter<'a, T: Scalar, S: StateSpace<T>> {
    space: &'a mut S,
    stats: SolveStats,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar, S: StateSpace<T>> Counter<'_, T, S> {
    fn rhs(&mut self, t: T, y: &S::State) -> Result<S::State> {
        self.stats.nfe += 1;
        self.space.rhs(t, y)
    }
}

/// Number of uniform fixed steps covering `span`.
pub(crate) fn fixed_step_count<T: Scalar>(span: T, step: T) -> usize {
    let ratio = (span.abs() / step).as_f64();
    if ratio == 0.0 {
        return 0;
    }
    // tolerate rounding in ratios such as 1.0 / 0.1
    (ratio - 1e-9).ceil().max(1.0) as usize
}

/// Integrates through `times` (monotone, `times[0]` is the start) and
/// returns the state at each of them; `states[0]` is `y0` itself.
pub(crate) fn integrate<T: Scalar, S: StateSpace<T>>(
    space: &mut S,
    y0: S::State,
    times: &[T],
    cfg: &SolverConfig<T>,
) -> Result<(Vec<S::State>, SolveStats)> {
    cfg.validate()?;
    let mut ctr = Counter {
        space,
        stats: SolveStats::default(),
        _t: std::marker::PhantomData,
    };
    let mut out = Vec::with_capacity(times.len());
    out.push(y0.clone());
    if times.len() < 2 {
        return Ok((out, ctr.stats));
    }
    let mut y = y0;
    if cfg.method.is_adaptive() {
        let span = times[times.len() - 1] - times[0];
        let mut dt = initial_step(&mut ctr, times[0], &y, span, cfg)?;
        for w in times.windows(2) {
            y = fehlberg_segment(&mut ctr, y, w[0], w[1], &mut dt, cfg)?;
            out.push(y.clone());
        }
    } else {
        for w in times.windows(2) {
            let n = fixed_step_count(w[1] - w[0], cfg.step_size);
            if ctr.stats.steps_taken + n > cfg.max_steps {
                return Err(Error::MaxStepsExceeded {
                    max_steps: cfg.max_steps,
                    t: w[0].as_f64(),
                });
            }
            if n > 0 {
                let dt = (w[1] - w[0]) / T::from_usize_lossy(n);
                for i in 0..n {
                    let t = w[0] + T::from_usize_lossy(i) * dt;
                    y = fixed_step(&mut ctr, cfg.method, t, &y, dt)?;
                    ctr.stats.steps_taken += 1;
                    check_finite(&*ctr.space, &y, t + dt)?;
                }
            }
            out.push(y.clone());
        }
    }
    Ok((out, ctr.stats))
}

fn check_finite<T: Scalar, S: StateSpace<T>>(space: &S, y: &S::State, t: T) -> Result<()> {
    if space.values(y).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t: t.as_f64() })
    }
}

fn fixed_step<T: Scalar, S: StateSpace<T>>(
    ctr: &mut Counter<'_, T, S>,
    method: Method,
    t: T,
    y: &S::State,
    dt: T,
) -> Result<S::State> {
    let half = T::c(0.5);
    match method {
        Method::Euler => {
            let k1 = ctr.rhs(t, y)?;
            ctr.space.combine(y, &[(dt, &k1)])
        }
        Method::Midpoint => {
            let k1 = ctr.rhs(t, y)?;
            let mid = ctr.space.combine(y, &[(half * dt, &k1)])?;
            let k2 = ctr.rhs(t + half * dt, &mid)?;
            ctr.space.combine(y, &[(dt, &k2)])
        }
        Method::Rk4 => {
            let k1 = ctr.rhs(t, y)?;
            let y2 = ctr.space.combine(y, &[(half * dt, &k1)])?;
            let k2 = ctr.rhs(t + half * dt, &y2)?;
            let y3 = ctr.space.combine(y, &[(half * dt, &k2)])?;
            let k3 = ctr.rhs(t + half * dt, &y3)?;
            let y4 = ctr.space.combine(y, &[(dt, &k3)])?;
            let k4 = ctr.rhs(t + dt, &y4)?;
            let sixth = dt / T::c(6.0);
            let third = dt / T::c(3.0);
            ctr.space
                .combine(y, &[(sixth, &k1), (third, &k2), (third, &k3), (sixth, &k4)])
        }
        Method::Fehlberg => unreachable!("adaptive method stepped as fixed"),
    }
}

/// Root-mean-square of `Σ cᵢ·kᵢ` scaled componentwise by
/// `atol + rtol·max(|a|, |b|)`.
fn scaled_rms<T: Scalar>(
    terms: &[(T, &[Rc<Tensor<T>>])],
    a: &[Rc<Tensor<T>>],
    b: &[Rc<Tensor<T>>],
    rtol: T,
    atol: T,
) -> T {
    let mut acc = T::zero();
    let mut n = 0usize;
    for comp in 0..a.len() {
        let (av, bv) = (a[comp].data(), b[comp].data());
        for i in 0..av.len() {
            let e: T = terms.iter().map(|(c, k)| *c * k[comp].data()[i]).sum();
            let sc = atol + rtol * av[i].abs().max(bv[i].abs());
            let r = e / sc;
            acc += r * r;
            n += 1;
        }
    }
    (acc / T::from_usize_lossy(n.max(1))).sqrt()
}

/// Starting step from the local behaviour of the right-hand side.
fn initial_step<T: Scalar, S: StateSpace<T>>(
    ctr: &mut Counter<'_, T, S>,
    t0: T,
    y0: &S::State,
    span: T,
    cfg: &SolverConfig<T>,
) -> Result<T> {
    let dir = span.signum();
    let yv = ctr.space.values(y0);
    let f0 = ctr.rhs(t0, y0)?;
    let f0v = ctr.space.values(&f0);
    let d0 = scaled_rms(&[(T::one(), &yv)], &yv, &yv, cfg.rtol, cfg.atol);
    let d1 = scaled_rms(&[(T::one(), &f0v)], &yv, &yv, cfg.rtol, cfg.atol);
    let small = T::c(1e-5);
    let h0 = if d0 < small || d1 < small {
        T::c(1e-6)
    } else {
        T::c(0.01) * d0 / d1
    };
    let y1 = ctr.space.combine(y0, &[(dir * h0, &f0)])?;
    let f1 = ctr.rhs(t0 + dir * h0, &y1)?;
    let f1v = ctr.space.values(&f1);
    let d2 = scaled_rms(&[(T::one(), &f1v), (-T::one(), &f0v)], &yv, &yv, cfg.rtol, cfg.atol) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= T::c(1e-15) {
        T::c(1e-6).max(h0 * T::c(1e-3))
    } else {
        (T::c(0.01) / dmax).powf(T::c(0.2))
    };
    Ok(dir * (T::c(100.0) * h0).min(h1).min(span.abs()))
}

/// Deepest dyadic refinement of a segment.
const MAX_LEVEL: u32 = 48;

/// Level `k` whose step `span / 2^k` is the largest not exceeding `want`.
fn level_for<T: Scalar>(span: T, want: T) -> u32 {
    let r = (span.abs() / want.abs()).as_f64();
    if !r.is_finite() {
        return MAX_LEVEL + 1;
    }
    r.log2().ceil().max(0.0) as u32
}

// Steps are restricted to dyadic fractions of the segment, aligned to their
// own size, so a tighter tolerance refines the mesh of a looser one.
fn fehlberg_segment<T: Scalar, S: StateSpace<T>>(
    ctr: &mut Counter<'_, T, S>,
    mut y: S::State,
    ta: T,
    tb: T,
    dt: &mut T,
    cfg: &SolverConfig<T>,
) -> Result<S::State> {
    let span = tb - ta;
    if span == T::zero() {
        return Ok(y);
    }
    let mut level = level_for(span, *dt);
    // position is `pos / 2^level` of the span
    let mut pos: u64 = 0;
    loop {
        if level > MAX_LEVEL {
            let t = ta + span * T::c(pos as f64 / 2f64.powi(level.min(MAX_LEVEL) as i32));
            return Err(Error::StepUnderflow {
                t: t.as_f64(),
                step: (span / T::c(2f64.powi(level as i32))).as_f64(),
            });
        }
        let denom = 1u64 << level;
        if pos >= denom {
            break;
        }
        if ctr.stats.attempts() >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                t: (ta + span * T::c(pos as f64 / denom as f64)).as_f64(),
            });
        }
        let t = ta + span * T::c(pos as f64 / denom as f64);
        let h = span / T::c(denom as f64);

        let mut ks: Vec<S::State> = Vec::with_capacity(6);
        for s in 0..6 {
            let stage = if s == 0 {
                y.clone()
            } else {
                let terms: Vec<(T, &S::State)> = FEHLBERG_A[s]
                    .iter()
                    .zip(&ks)
                    .map(|(&a, k)| (T::c(a) * h, k))
                    .collect();
                ctr.space.combine(&y, &terms)?
            };
            let k = ctr.rhs(t + T::c(FEHLBERG_C[s]) * h, &stage)?;
            ks.push(k);
        }
        let terms5: Vec<(T, &S::State)> = FEHLBERG_B5
            .iter()
            .zip(&ks)
            .filter(|(&b, _)| b != 0.0)
            .map(|(&b, k)| (T::c(b) * h, k))
            .collect();
        let y_new = ctr.space.combine(&y, &terms5)?;

        let kv: Vec<Vec<Rc<Tensor<T>>>> = ks.iter().map(|k| ctr.space.values(k)).collect();
        let err_terms: Vec<(T, &[Rc<Tensor<T>>])> = FEHLBERG_B5
            .iter()
            .zip(FEHLBERG_B4)
            .zip(&kv)
            .map(|((&b5, b4), k)| (T::c(b5 - b4) * h, k.as_slice()))
            .collect();
        let ratio = scaled_rms(
            &err_terms,
            &ctr.space.values(&y),
            &ctr.space.values(&y_new),
            cfg.rtol,
            cfg.atol,
        );

        let accept = ratio.is_finite() && ratio <= T::one();
        let factor = if !ratio.is_finite() {
            T::c(MIN_FACTOR)
        } else if ratio == T::zero() {
            T::c(MAX_FACTOR)
        } else {
            (T::c(SAFETY) * ratio.powf(T::c(-0.2)))
                .max(T::c(MIN_FACTOR))
                .min(T::c(MAX_FACTOR))
        };
        if accept {
            check_finite(&*ctr.space, &y_new, t + h)?;
            y = y_new;
            pos += 1;
            ctr.stats.steps_taken += 1;
            *dt = h * factor;
            let mut next = level_for(span, *dt).min(MAX_LEVEL);
            if next > level {
                pos <<= next - level;
            } else {
                // coarsen only as far as alignment allows
                while level > next && pos % 2 == 0 {
                    pos >>= 1;
                    level -= 1;
                }
                next = level;
            }
            level = next;
        } else {
            ctr.stats.rejected_steps += 1;
            *dt = h * factor.min(T::one());
            let next = level_for(span, *dt).max(level + 1);
            pos <<= (next - level).min(63);
            level = next;
        }
    }
    Ok(y)
}
