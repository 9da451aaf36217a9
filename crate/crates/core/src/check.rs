//! Finite-difference gradient checking.
//!
//! Only forward evaluations are used, which keeps these checks independent
//! of the reverse sweep they validate.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::ParamSet;
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// Central difference `(f(x + εeᵢ) - f(x - εeᵢ)) / 2ε` at a single coordinate.
pub fn central_difference<T: Scalar>(
    f: &mut impl FnMut(&ParamSet<T>) -> Result<T>,
    at: &ParamSet<T>,
    name: &str,
    index: usize,
    step: f64,
) -> Result<f64> {
    let mut p = at.clone();
    let orig = p.get(name)?.data()[index];
    p.get_mut(name)?.data_mut()[index] = orig + T::c(step);
    let plus = f(&p)?.as_f64();
    p.get_mut(name)?.data_mut()[index] = orig - T::c(step);
    let minus = f(&p)?.as_f64();
    Ok((plus - minus) / (2.0 * step))
}

/// Compares `analytic` against central differences at up to
/// `per_tensor` random coordinates of every entry.
pub fn probe_gradients<T: Scalar>(
    mut f: impl FnMut(&ParamSet<T>) -> Result<T>,
    at: &ParamSet<T>,
    analytic: &ParamSet<T>,
    per_tensor: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Probe>> {
    let mut probes = Vec::new();
    for (name, value) in at.iter() {
        let n = value.len();
        let picks = sample(rng, n, per_tensor.min(n)).into_vec();
        for index in picks {
            let numeric = central_difference(&mut f, at, name, index, step)?;
            probes.push(Probe {
                name: name.to_string(),
                index,
                analytic: analytic.get(name)?.data()[index].as_f64(),
                numeric,
            });
        }
    }
    Ok(probes)
}

/// Largest relative error per entry between two gradient sets, measured
/// against the largest magnitude of the reference entry.
pub fn tensorwise_rel_err<T: Scalar>(
    candidate: &ParamSet<T>,
    reference: &ParamSet<T>,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, r) in reference.iter() {
        let c = candidate.get(name)?;
        let diff = c.zip_map(r, |a, b| a - b)?.max_abs().as_f64();
        let scale = r.max_abs().as_f64().max(c.max_abs().as_f64()).max(REL_FLOOR);
        out.push((name.to_string(), diff / scale));
    }
    Ok(out)
}
