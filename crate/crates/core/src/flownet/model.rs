use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::flownet::config::{GradientMode, ModelConfig, Refiner, RhsKind};
use crate::flownet::field::FlowField;
use crate::flownet::layers::{
    build_correlation, correlation_pyramid, decode, encode_features, global_match, init_decoder,
    init_encoder, init_mixing, lookup_pyramid, mixing_forward, upsample_flow,
};
use crate::flownet::rhs::{gru_cell, init_gru, init_transformer, GruOdeRhs, TransformerRhs, COND};
use crate::ode::{odeint_adjoint_op, odeint_graph, OdeFunc, SolveStats, SolverConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Model configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Per-call choices for [`FlowModel::forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub refiner: Refiner,
    pub gradient: GradientMode,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Matched flow `f0` at latent resolution, in latent cells.
    pub initial: Var,
    /// Refined latent flows, one per supervised prediction.
    pub latent: Vec<Var>,
    /// Full-resolution flows in pixels, aligned with `latent`.
    pub predictions: Vec<Var>,
    pub stats: SolveStats,
}

impl ForwardOutput {
    pub fn last_prediction(&self) -> Var {
        *self.predictions.last().expect("at least one prediction")
    }
}

/// Result of [`FlowModel::predict`].
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub flow: FlowField<T>,
    /// Upsampled matched flow before refinement.
    pub initial: FlowField<T>,
    pub stats: SolveStats,
}

/// Context shared by every refiner: context embedding, correlation
/// pyramid and matched flow.
pub(crate) const LOOKUP_SCALE: f64 = 0.1;

struct Matched {
    q: Var,
    pyramid: Vec<Var>,
    f0: Var,
}

impl<T: Scalar> FlowModel<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        init_encoder(&mut params, "fenc", c.downsample, c.feature_dim, &mut rng)?;
        init_encoder(&mut params, "cenc", c.downsample, c.d_inp, &mut rng)?;
        init_mixing(&mut params, c.d_inp, c.corr_channels(), c.d_hid, c.mixing_depth, &mut rng)?;
        if c.refiner == Refiner::Ode && c.rhs == RhsKind::Transformer {
            init_transformer(&mut params, c.d_hid, &mut rng)?;
        }
        if c.uses_gru_params() {
            init_gru(&mut params, c.d_hid, &mut rng)?;
        }
        init_decoder(&mut params, c.d_hid, c.decoder_zero_init, &mut rng)?;
        Ok(FlowModel { config, params })
    }

    /// Options that run the configured refiner with direct gradients.
    pub fn default_options(&self) -> ForwardOptions {
        ForwardOptions {
            refiner: self.config.refiner,
            gradient: GradientMode::Direct,
        }
    }

    /// Checks that this model carries the parameters `refiner` needs.
    pub fn supports(&self, refiner: Refiner) -> Result<()> {
        let ok = match refiner {
            Refiner::None => true,
            Refiner::Gru => self.params.contains("gru.z.w"),
            Refiner::Ode => match self.config.rhs {
                RhsKind::Transformer => self.params.contains("rhs.proj.w"),
                RhsKind::GruOde => self.params.contains("gru.z.w"),
            },
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model trained with refiner `{}` (rhs `{}`) has no parameters for refiner `{refiner}`",
                self.config.refiner, self.config.rhs
            )))
        }
    }

    fn matched(&self, g: &Graph<T>, p: &Bound, i1: Var, i2: Var) -> Result<Matched> {
        let (s1, s2) = (g.shape(i1), g.shape(i2));
        if s1 != s2 {
            return Err(Error::shape("forward", format!("image extents differ: {s1:?} vs {s2:?}")));
        }
        let n = self.config.downsample;
        let g1 = encode_features(g, p, "fenc", i1, n)?;
        let g2 = encode_features(g, p, "fenc", i2, n)?;
        let q = encode_features(g, p, "cenc", i1, n)?;
        let corr = build_correlation(g, g1, g2)?;
        let f0 = global_match(g, corr)?;
        let pyramid = correlation_pyramid(g, corr, self.config.pyramid_levels)?;
        Ok(Matched { q, pyramid, f0 })
    }

    fn mix(&self, g: &Graph<T>, p: &Bound, m: &Matched, flow: Var) -> Result<Var> {
        let corr = lookup_pyramid(g, &m.pyramid, flow, self.config.lookup_radius)?;
        // Raw correlations are large next to q and the lifted flow.
        let corr = g.scale(corr, T::c(LOOKUP_SCALE))?;
        let h = mixing_forward(g, p, m.q, flow, corr, self.config.mixing_depth)?;
        // Parameter-free normalisation keeps h0 on the scale the RHS expects.
        let d = g.shape(h)[2];
        let one = g.constant(Tensor::full([d], T::one()));
        let zero = g.constant(Tensor::zeros([d]));
        g.layer_norm(h, one, zero, T::c(1e-5))
    }

    /// Parameters seen by the ODE right-hand side, with the GRU input
    /// bound as [`COND`] for the GRU-ODE variant.
    fn rhs_params(&self, p: &Bound, h0: Var) -> Bound {
        match self.config.rhs {
            RhsKind::Transformer => p.subset("rhs."),
            RhsKind::GruOde => {
                let mut b = p.subset("gru.");
                b.insert(COND, h0);
                b
            }
        }
    }

    fn solve(
        &self,
        g: &Graph<T>,
        p: &Bound,
        h0: Var,
        t1: T,
        cfg: &SolverConfig<T>,
        mode: GradientMode,
    ) -> Result<(Var, SolveStats)> {
        fn run<T: Scalar, F: OdeFunc<T> + Clone + 'static>(
            f: F,
            g: &Graph<T>,
            b: &Bound,
            h0: Var,
            t1: T,
            cfg: &SolverConfig<T>,
            mode: GradientMode,
        ) -> Result<(Var, SolveStats)> {
            match mode {
                GradientMode::Direct => {
                    let (_, states, stats) = odeint_graph(g, &f, b, h0, T::zero(), t1, &[], cfg)?;
                    Ok((*states.last().expect("final state"), stats))
                }
                GradientMode::Adjoint => odeint_adjoint_op(g, f, b, h0, T::zero(), t1, cfg),
            }
        }
        let b = self.rhs_params(p, h0);
        match self.config.rhs {
            RhsKind::Transformer => run(TransformerRhs, g, &b, h0, t1, cfg, mode),
            RhsKind::GruOde => run(GruOdeRhs, g, &b, h0, t1, cfg, mode),
        }
    }

    /// Records the full network on `g`. `p` binds every parameter name.
    pub fn forward(
        &self,
        g: &Graph<T>,
        p: &Bound,
        i1: Var,
        i2: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.supports(opts.refiner)?;
        let m = self.matched(g, p, i1, i2)?;
        let mut stats = SolveStats::default();
        let latent = match opts.refiner {
            Refiner::None => vec![m.f0],
            Refiner::Ode => {
                let h0 = self.mix(g, p, &m, m.f0)?;
                let cfg = self.config.solver.to_config();
                let (h1, s) = self.solve(g, p, h0, T::one(), &cfg, opts.gradient)?;
                stats = s;
                let df = decode(g, p, h1)?;
                vec![g.add(m.f0, df)?]
            }
            Refiner::Gru => {
                let mut h = self.mix(g, p, &m, m.f0)?;
                let mut f = m.f0;
                let mut out = Vec::with_capacity(self.config.gru_iterations);
                for k in 0..self.config.gru_iterations {
                    // the first input equals the initial state
                    let x = if k == 0 { h } else { self.mix(g, p, &m, f)? };
                    h = gru_cell(g, p, h, x)?;
                    f = g.add(f, decode(g, p, h)?)?;
                    out.push(f);
                }
                out
            }
        };
        let n = self.config.downsample;
        let predictions = latent
            .iter()
            .map(|&f| upsample_flow(g, f, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            initial: m.f0,
            latent,
            predictions,
            stats,
        })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, i1: &Tensor<T>, i2: &Tensor<T>, refiner: Refiner) -> Result<Prediction<T>> {
        let g = Graph::no_grad();
        let p = self.params.bind_constant(&g);
        let (v1, v2) = (g.constant(i1.clone()), g.constant(i2.clone()));
        let opts = ForwardOptions {
            refiner,
            gradient: GradientMode::Direct,
        };
        let out = self.forward(&g, &p, v1, v2, &opts)?;
        let initial = upsample_flow(&g, out.initial, self.config.downsample)?;
        Ok(Prediction {
            flow: FlowField::new((*g.value(out.last_prediction())).clone())?,
            initial: FlowField::new((*g.value(initial)).clone())?,
            stats: out.stats,
        })
    }

    /// Full-resolution flows `f0 + decode(h(t))` for each `t` in `times`,
    /// integrating from 0 (backwards for negative times). `t = 0` decodes
    /// the initial latent state.
    pub fn flow_at_times(&self, i1: &Tensor<T>, i2: &Tensor<T>, times: &[T]) -> Result<Vec<FlowField<T>>> {
        self.supports(Refiner::Ode)?;
        let g = Graph::no_grad();
        let p = self.params.bind_constant(&g);
        let (v1, v2) = (g.constant(i1.clone()), g.constant(i2.clone()));
        let m = self.matched(&g, &p, v1, v2)?;
        let h0 = self.mix(&g, &p, &m, m.f0)?;
        let cfg = self.config.solver.to_config();
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            let h = if t == T::zero() {
                h0
            } else {
                self.solve(&g, &p, h0, t, &cfg, GradientMode::Direct)?.0
            };
            let f = g.add(m.f0, decode(&g, &p, h)?)?;
            let up = upsample_flow(&g, f, self.config.downsample)?;
            out.push(FlowField::new((*g.value(up)).clone())?);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        FlowModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
