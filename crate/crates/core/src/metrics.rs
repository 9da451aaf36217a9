//! Endpoint error, Fl-all outlier rate and the color-wheel flow rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::{FlowField, ValidMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, valid: &ValidMask, op: &'static str) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            op,
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    valid.check_matches(gt, op)?;
    if valid.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Per-pixel endpoint errors at valid pixels, with the matching `|gt|`.
fn endpoint_errors<'a, T: Scalar>(
    pred: &'a FlowField<T>,
    gt: &'a FlowField<T>,
    valid: &'a ValidMask,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.vectors()
        .zip(gt.vectors())
        .zip(valid.bits())
        .filter(|(_, &ok)| ok)
        .map(|((p, g), _)| {
            let (px, py, gx, gy) = (p.0.as_f64(), p.1.as_f64(), g.0.as_f64(), g.1.as_f64());
            ((px - gx).hypot(py - gy), gx.hypot(gy))
        })
}

/// Mean Euclidean distance between `pred` and `gt` over valid pixels.
pub fn epe<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, valid: &ValidMask) -> Result<f64> {
    check(pred, gt, valid, "epe")?;
    let (sum, n) = endpoint_errors(pred, gt, valid).fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    Ok(sum / n as f64)
}

pub const FL_ABS_THRESHOLD: f64 = 3.0;
pub const FL_REL_THRESHOLD: f64 = 0.05;

/// Percentage of valid pixels whose endpoint error exceeds both 3 px and
/// 5 % of the ground-truth magnitude.
pub fn fl_all<T: Scalar>(pred: &FlowField<T>, gt: &FlowField<T>, valid: &ValidMask) -> Result<f64> {
    check(pred, gt, valid, "fl_all")?;
    let (out, n) = endpoint_errors(pred, gt, valid).fold((0usize, 0usize), |(o, n), (e, m)| {
        let outlier = e > FL_ABS_THRESHOLD && e > FL_REL_THRESHOLD * m;
        (o + outlier as usize, n + 1)
    });
    Ok(100.0 * out as f64 / n as f64)
}

const WHEEL_SEGMENTS: [(usize, [i32; 3], [i32; 3]); 6] = [
    // length, base color, per-step direction
    (15, [255, 0, 0], [0, 1, 0]),    // red → yellow
    (6, [255, 255, 0], [-1, 0, 0]),  // yellow → green
    (4, [0, 255, 0], [0, 0, 1]),     // green → cyan
    (11, [0, 255, 255], [0, -1, 0]), // cyan → blue
    (13, [0, 0, 255], [1, 0, 0]),    // blue → magenta
    (6, [255, 0, 255], [0, 0, -1]),  // magenta → red
];

/// The 55-entry Middlebury color wheel, values in `[0, 255]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for (len, base, dir) in WHEEL_SEGMENTS {
        for i in 0..len {
            let step = (255 * i / len) as i32;
            wheel.push([0, 1, 2].map(|c| (base[c] + dir[c] * step) as f64));
        }
    }
    wheel
}

/// Renders a flow field as RGB in `[0, 1]`: hue from `atan2(dy, dx)`
/// (angle 0 is the wheel's first, red entry), saturation from
/// `|f| / max_norm`. Zero flow is white; vectors beyond `max_norm` are
/// darkened. `max_norm` defaults to the largest vector in the field.
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>, max_norm: Option<f64>) -> Tensor<f64> {
    let wheel = color_wheel();
    let n = wheel.len() as f64;
    let max = max_norm.unwrap_or_else(|| flow.max_norm().as_f64());
    let mut out = Vec::with_capacity(flow.height() * flow.width() * 3);
    for (dx, dy) in flow.vectors() {
        let (dx, dy) = (dx.as_f64(), dy.as_f64());
        let mag = dx.hypot(dy);
        let rad = if max > 0.0 { mag / max } else { 0.0 };
        let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
        let fk = (theta / std::f64::consts::TAU * n).min(n - 1e-9);
        let k0 = fk.floor() as usize % wheel.len();
        let k1 = (k0 + 1) % wheel.len();
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
            let col = if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            };
            out.push(col);
        }
    }
    Tensor::new([flow.height(), flow.width(), 3], out).expect("length matches")
}

/// Metrics of one evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: Option<u64>,
    pub epe: f64,
    pub fl_all: f64,
    pub solver_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub steps_mean: f64,
    pub steps_max: usize,
    pub nfe_mean: f64,
}

/// Aggregate evaluation over a set of pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean of the per-sample EPEs, in pixels.
    pub epe: f64,
    /// Mean of the per-sample Fl-all percentages.
    pub fl_all: f64,
    pub samples: Vec<SampleRecord>,
    pub config: serde_json::Value,
    pub solver: SolverSummary,
}

impl EvalReport {
    /// Aggregates per-sample records; `nfe` holds the matching function
    /// evaluation counts.
    pub fn from_samples(samples: Vec<SampleRecord>, nfe: &[usize], config: serde_json::Value) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("evaluation needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let solver = SolverSummary {
            steps_mean: samples.iter().map(|s| s.solver_steps as f64).sum::<f64>() / n,
            steps_max: samples.iter().map(|s| s.solver_steps).max().unwrap_or(0),
            nfe_mean: nfe.iter().sum::<usize>() as f64 / nfe.len().max(1) as f64,
        };
        Ok(EvalReport {
            epe: samples.iter().map(|s| s.epe).sum::<f64>() / n,
            fl_all: samples.iter().map(|s| s.fl_all).sum::<f64>() / n,
            samples,
            config,
            solver,
        })
    }
}
