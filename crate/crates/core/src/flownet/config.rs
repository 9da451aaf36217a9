use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{Method, SolverConfig, DEFAULT_MAX_STEPS, DEFAULT_TOLERANCE};
use crate::scalar::Scalar;

macro_rules! name_enum {
    ($ty:ident, $what:literal, $($variant:ident => $name:literal),+ $(,)?) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$variant => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Config(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }
    };
}

/// Right-hand side network of the latent ODE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsKind {
    Transformer,
    GruOde,
}

name_enum!(RhsKind, "rhs kind", Transformer => "transformer", GruOde => "gru_ode");

/// How the matched flow is refined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refiner {
    /// Global matching only.
    None,
    /// Discrete ConvGRU iterations.
    Gru,
    /// One latent ODE solve over `[0, 1]`.
    Ode,
}

name_enum!(Refiner, "refiner", None => "none", Gru => "gru", Ode => "ode");

/// How gradients flow through the ODE solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Backprop through the unrolled solver steps.
    Direct,
    /// Adjoint sensitivity solve backward in time.
    Adjoint,
}

name_enum!(GradientMode, "gradient mode", Direct => "direct", Adjoint => "adjoint");

/// Serializable solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub method: Method,
    pub step_size: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            method: Method::Midpoint,
            step_size: 0.25,
            rtol: DEFAULT_TOLERANCE,
            atol: DEFAULT_TOLERANCE,
            max_steps: DEFAULT_MAX_STEPS,
        }
    }
}

impl SolverSpec {
    pub fn to_config<T: Scalar>(&self) -> SolverConfig<T> {
        SolverConfig {
            method: self.method,
            step_size: T::c(self.step_size),
            rtol: T::c(self.rtol),
            atol: T::c(self.atol),
            max_steps: self.max_steps,
        }
    }
}

/// Architecture hyper-parameters. Stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder downsampling factor `n` (a power of two).
    pub downsample: usize,
    /// Matching feature width `D`.
    pub feature_dim: usize,
    pub d_inp: usize,
    pub d_hid: usize,
    pub d_out: usize,
    pub mixing_depth: usize,
    pub rhs: RhsKind,
    pub refiner: Refiner,
    pub gru_iterations: usize,
    pub lookup_radius: usize,
    pub pyramid_levels: usize,
    pub solver: SolverSpec,
    pub decoder_zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            downsample: 8,
            feature_dim: 32,
            d_inp: 32,
            d_hid: 32,
            d_out: 32,
            mixing_depth: 2,
            rhs: RhsKind::Transformer,
            refiner: Refiner::Ode,
            gru_iterations: 4,
            lookup_radius: 2,
            pyramid_levels: 4,
            solver: SolverSpec::default(),
            decoder_zero_init: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.downsample < 2 || !self.downsample.is_power_of_two() {
            return bad(format!("downsample must be a power of two >= 2, got {}", self.downsample));
        }
        if self.feature_dim == 0 || self.d_inp == 0 {
            return bad("feature_dim and d_inp must be positive".into());
        }
        if self.d_inp != self.d_out {
            return bad(format!("d_inp ({}) must equal d_out ({})", self.d_inp, self.d_out));
        }
        if self.d_hid != self.d_inp {
            return bad(format!(
                "d_hid ({}) must equal d_inp ({}): the mixing output is the ODE state",
                self.d_hid, self.d_inp
            ));
        }
        if !(1..=2).contains(&self.mixing_depth) {
            return bad(format!("mixing_depth must be 1 or 2, got {}", self.mixing_depth));
        }
        if self.gru_iterations == 0 {
            return bad("gru_iterations must be >= 1".into());
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be >= 1".into());
        }
        self.solver.to_config::<f64>().validate()
    }

    /// Channels of the correlation lookup features.
    pub fn corr_channels(&self) -> usize {
        let side = 2 * self.lookup_radius + 1;
        self.pyramid_levels * side * side
    }

    /// Whether the configured refiner uses the ConvGRU gate parameters.
    pub fn uses_gru_params(&self) -> bool {
        match self.refiner {
            Refiner::Gru => true,
            Refiner::Ode => self.rhs == RhsKind::GruOde,
            Refiner::None => false,
        }
    }

    /// Latent extents for an `H×W` image.
    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let n = self.downsample;
        if height == 0 || width == 0 || height % n != 0 || width % n != 0 {
            return Err(Error::shape(
                "encode_features",
                format!("image extents {height}x{width} must be positive multiples of {n}"),
            ));
        }
        Ok((height / n, width / n))
    }
}
