use rand::Rng;

/// Smallest blob width, in pixels.
pub const MIN_BLOB_SIGMA: f64 = 16.0;
const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_ITERS: usize = 500;

/// One Gaussian bump of the backward displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: [f64; 2],
    pub amplitude: [f64; 2],
    pub sigma: f64,
}

/// A smooth motion between two frames, defined both as the forward flow
/// `f` at frame-1 positions and the backward displacement `b` at frame-2
/// positions, related by `x + f(x) = y ⇔ x = y − b(y)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Motion {
    Translation([f64; 2]),
    /// `f(x) = A·(x − c) + t`.
    Affine {
        a: [[f64; 2]; 2],
        center: [f64; 2],
        t: [f64; 2],
    },
    /// `b(y) = Σ Aₖ·exp(−|y − μₖ|² / 2σₖ²)`.
    Blobs(Vec<Blob>),
}

impl Motion {
    /// Random translation with `|t| ≤ max`, uniform over the disc.
    pub fn random_translation(max: f64, rng: &mut impl Rng) -> Motion {
        let r = max * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        Motion::Translation([r * phi.cos(), r * phi.sin()])
    }

    /// Random affine motion whose flow stays within `max` over the image.
    pub fn random_affine(width: usize, height: usize, max: f64, rng: &mut impl Rng) -> Motion {
        let center = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        let radius = center[0].hypot(center[1]).max(1.0);
        // linear part and offset each use at most half the budget
        let lin = 0.5 * max / radius;
        let mut a = [[0.0; 2]; 2];
        for row in &mut a {
            for v in row.iter_mut() {
                *v = rng.random_range(-lin..lin) / 2.0;
            }
        }
        let Motion::Translation(t) = Motion::random_translation(0.5 * max, rng) else {
            unreachable!()
        };
        Motion::Affine { a, center, t }
    }

    /// One to three blobs with `Σ|Aₖ| ≤ max` and widths of at least
    /// [`MIN_BLOB_SIGMA`] (and of `max`), which keeps the backward field a
    /// contraction so the forward flow is a unique fixed point.
    pub fn random_blobs(width: usize, height: usize, max: f64, rng: &mut impl Rng) -> Motion {
        let k = rng.random_range(1..=3);
        let budget = max * rng.random_range(0.5..=1.0);
        let shares: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = shares.iter().sum();
        let sigma_lo = MIN_BLOB_SIGMA.max(max);
        let blobs = shares
            .iter()
            .map(|s| {
                let mag = budget * s / total;
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                Blob {
                    center: [
                        rng.random_range(0.0..width as f64),
                        rng.random_range(0.0..height as f64),
                    ],
                    amplitude: [mag * phi.cos(), mag * phi.sin()],
                    sigma: rng.random_range(sigma_lo..2.0 * sigma_lo),
                }
            })
            .collect();
        Motion::Blobs(blobs)
    }

    /// Backward displacement `b(y)`: frame 2 at `y` shows frame 1 at `y − b(y)`.
    pub fn backward(&self, y: [f64; 2]) -> [f64; 2] {
        match self {
            Motion::Translation(t) => *t,
            Motion::Affine { a, center, t } => {
                // x = c + (I + A)⁻¹ (y − c − t)
                let (m00, m01, m10, m11) = (1.0 + a[0][0], a[0][1], a[1][0], 1.0 + a[1][1]);
                let det = m00 * m11 - m01 * m10;
                let r = [y[0] - center[0] - t[0], y[1] - center[1] - t[1]];
                let x = [
                    center[0] + (m11 * r[0] - m01 * r[1]) / det,
                    center[1] + (-m10 * r[0] + m00 * r[1]) / det,
                ];
                [y[0] - x[0], y[1] - x[1]]
            }
            Motion::Blobs(blobs) => {
                let mut b = [0.0; 2];
                for bl in blobs {
                    let dx = y[0] - bl.center[0];
                    let dy = y[1] - bl.center[1];
                    let w = (-(dx * dx + dy * dy) / (2.0 * bl.sigma * bl.sigma)).exp();
                    b[0] += bl.amplitude[0] * w;
                    b[1] += bl.amplitude[1] * w;
                }
                b
            }
        }
    }

    /// Forward flow `f(x)`, the solution of `f = b(x + f)`.
    pub fn forward(&self, x: [f64; 2]) -> [f64; 2] {
        match self {
            Motion::Translation(t) => *t,
            Motion::Affine { a, center, t } => {
                let r = [x[0] - center[0], x[1] - center[1]];
                [
                    a[0][0] * r[0] + a[0][1] * r[1] + t[0],
                    a[1][0] * r[0] + a[1][1] * r[1] + t[1],
                ]
            }
            Motion::Blobs(_) => {
                let mut f = [0.0; 2];
                for _ in 0..FIXED_POINT_ITERS {
                    let next = self.backward([x[0] + f[0], x[1] + f[1]]);
                    let change = (next[0] - f[0]).abs().max((next[1] - f[1]).abs());
                    f = next;
                    if change <= FIXED_POINT_TOL {
                        break;
                    }
                }
                f
            }
        }
    }
}
