use rand::Rng;

/// Lattice spacing of the coarsest octave, in pixels.
const BASE_PERIOD: f64 = 16.0;

/// Multi-octave value noise: random lattice values blended with a quintic
/// fade, octave `o` at spacing `16 / 2^o` px and weight `2^-o`. Values lie
/// in `[0, 1]` everywhere, including outside the image.
#[derive(Clone, Debug)]
pub struct ValueNoise {
    octaves: Vec<Lattice>,
    total_weight: f64,
}

#[derive(Clone, Debug)]
struct Lattice {
    spacing: f64,
    weight: f64,
    cols: usize,
    rows: usize,
    values: Vec<f64>,
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl Lattice {
    fn at(&self, x: f64, y: f64) -> f64 {
        // lattice is periodic so any real position is defined
        let gx = x / self.spacing;
        let gy = y / self.spacing;
        let (x0, y0) = (gx.floor(), gy.floor());
        let (tx, ty) = (fade(gx - x0), fade(gy - y0));
        let wrap = |v: f64, n: usize| v.rem_euclid(n as f64) as usize;
        let (c0, r0) = (wrap(x0, self.cols), wrap(y0, self.rows));
        let (c1, r1) = ((c0 + 1) % self.cols, (r0 + 1) % self.rows);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        let top = v(r0, c0) + (v(r0, c1) - v(r0, c0)) * tx;
        let bottom = v(r1, c0) + (v(r1, c1) - v(r1, c0)) * tx;
        top + (bottom - top) * ty
    }
}

impl ValueNoise {
    pub fn new(width: usize, height: usize, octaves: usize, rng: &mut impl Rng) -> Self {
        let mut total_weight = 0.0;
        let octaves = (0..octaves)
            .map(|o| {
                let spacing = BASE_PERIOD / 2f64.powi(o as i32);
                let weight = 0.5f64.powi(o as i32);
                total_weight += weight;
                // a margin of lattice cells keeps the period beyond the image
                let cols = (width as f64 / spacing).ceil() as usize + 4;
                let rows = (height as f64 / spacing).ceil() as usize + 4;
                let values = (0..cols * rows).map(|_| rng.random::<f64>()).collect();
                Lattice {
                    spacing,
                    weight,
                    cols,
                    rows,
                    values,
                }
            })
            .collect();
        ValueNoise {
            octaves,
            total_weight,
        }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.octaves.iter().map(|l| l.weight * l.at(x, y)).sum();
        (s / self.total_weight).clamp(0.0, 1.0)
    }
}
