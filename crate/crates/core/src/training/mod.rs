//! Loss, optimizer, learning-rate schedule and the training loop.

mod loss;
mod optim;
#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{flow_loss, flow_loss_graph};
pub use optim::{clip_grad_norm, AdamW, OneCycle};

use crate::autodiff::{Graph, ParamSet};
use crate::error::{Error, Result};
use crate::flownet::{FlowModel, ForwardOptions, GradientMode, Refiner};
use crate::metrics::{epe, fl_all, EvalReport, SampleRecord};
use crate::scalar::Scalar;
use crate::synth::{gen_pair, validation_configs, GenConfig, SamplePair, VALIDATION_SEED_BASE};

/// Non-finite losses in a row that abort training.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// Number of supervised predictions, counted back from the last.
    pub predictions: usize,
    pub gradient: GradientMode,
    pub seed: u64,
    pub log_interval: usize,
    pub val_samples: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
    /// Intermediate checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            lr: 1.5e-3,
            weight_decay: 1e-4,
            gamma: 0.9,
            predictions: 1,
            gradient: GradientMode::Direct,
            seed: 0,
            log_interval: 100,
            val_samples: 16,
            clip_grad_norm: 1.0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.predictions == 0 {
            return bad("predictions must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.clip_grad_norm.is_finite() && self.clip_grad_norm >= 0.0) {
            return bad("clip_grad_norm must be non-negative");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be at least 1");
        }
        if self.val_samples == 0 {
            return bad("val_samples must be at least 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle::new(self.lr, self.iterations)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Completed iterations.
    pub iter: usize,
    /// Mean finite batch loss since the previous record.
    pub loss: Option<f64>,
    /// `None` when the validation forward pass was not finite.
    pub val_epe: Option<f64>,
    pub lr: f64,
    pub solver_steps_mean: f64,
}

/// Hooks called by [`train`].
pub trait Observer<T> {
    fn log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _iter: usize, _model: &FlowModel<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: FlowModel<T>,
    pub log: Vec<LogRecord>,
    /// Batch loss per iteration (NaN where non-finite).
    pub losses: Vec<f64>,
    pub rejected_steps: usize,
}

/// Mean loss and summed-then-averaged parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients<T> {
    pub loss: f64,
    pub grads: ParamSet<T>,
    pub solver_steps: Vec<usize>,
}

/// Loss and gradients over `batch`, one graph per sample, accumulated in
/// batch order.
pub fn batch_gradients<T: Scalar>(
    model: &FlowModel<T>,
    batch: &[SamplePair<T>],
    opts: &ForwardOptions,
    gamma: T,
    predictions: usize,
) -> Result<BatchGradients<T>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    let mut steps = Vec::with_capacity(batch.len());
    for pair in batch {
        let g = Graph::new();
        let p = model.params.bind(&g);
        let (i1, i2) = (g.constant(pair.image1.clone()), g.constant(pair.image2.clone()));
        let out = model.forward(&g, &p, i1, i2, opts)?;
        let n = out.predictions.len();
        if predictions > n {
            return Err(Error::Config(format!(
                "{predictions} supervised predictions requested but refiner `{}` yields {n}",
                opts.refiner
            )));
        }
        let l = flow_loss_graph(&g, &out.predictions[n - predictions..], &pair.flow, &pair.valid, gamma)?;
        loss += g.value(l).item()?.as_f64();
        let grads = g.backward(l)?;
        total.axpy(T::one(), &p.collect(&g, &grads))?;
        steps.push(out.stats.steps_taken);
    }
    let inv = T::one() / T::from_usize_lossy(batch.len());
    for (_, t) in total.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(BatchGradients {
        loss: loss / batch.len() as f64,
        grads: total,
        solver_steps: steps,
    })
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteState { .. })
}

/// Seeds for the training pairs, kept below the validation range.
fn sample_seeds(seed: u64) -> impl Iterator<Item = u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || rng.random::<u64>() % VALIDATION_SEED_BASE)
}

/// Runs `config.iterations` optimizer steps on freshly generated pairs.
pub fn train<T: Scalar>(
    model: FlowModel<T>,
    gen: &GenConfig,
    config: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    gen.validate()?;
    let mut model = model;
    let opts = ForwardOptions {
        refiner: model.config.refiner,
        gradient: config.gradient,
    };
    model.supports(opts.refiner)?;
    let val = validation_configs(gen, config.val_samples);
    let schedule = config.schedule();
    let mut optim = AdamW::new(&model.params, T::c(config.weight_decay));
    let mut seeds = sample_seeds(config.seed);
    let gamma = T::c(config.gamma);

    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut bad_run = 0;
    let (mut window_loss, mut window_n, mut window_steps, mut window_samples) = (0.0, 0usize, 0usize, 0usize);
    for iter in 0..config.iterations {
        let batch = (0..config.batch_size)
            .map(|_| gen_pair::<T>(&gen.with_seed(seeds.next().expect("infinite"))))
            .collect::<Result<Vec<_>>>()?;
        let lr = schedule.lr(iter);
        let step = match batch_gradients(&model, &batch, &opts, gamma, config.predictions) {
            Ok(b) => Some(b),
            Err(e) if is_divergence(&e) => None,
            Err(e) => return Err(e),
        };
        let loss = step.as_ref().map_or(f64::NAN, |b| b.loss);
        losses.push(loss);
        match step {
            Some(mut b) if loss.is_finite() => {
                bad_run = 0;
                clip_grad_norm(&mut b.grads, config.clip_grad_norm);
                optim.step(&mut model.params, &b.grads, T::c(lr))?;
                window_loss += loss;
                window_n += 1;
                window_steps += b.solver_steps.iter().sum::<usize>();
                window_samples += b.solver_steps.len();
            }
            _ => {
                bad_run += 1;
                if bad_run >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged(bad_run));
                }
            }
        }
        let done = iter + 1;
        if done % config.log_interval == 0 || done == config.iterations {
            let record = LogRecord {
                iter: done,
                loss: (window_n > 0).then(|| window_loss / window_n as f64),
                val_epe: match evaluate(&model, &val, opts.refiner, serde_json::Value::Null) {
                    Ok(r) => Some(r.epe),
                    Err(e) if is_divergence(&e) => None,
                    Err(e) => return Err(e),
                },
                lr,
                solver_steps_mean: if window_samples > 0 {
                    window_steps as f64 / window_samples as f64
                } else {
                    0.0
                },
            };
            observer.log(&record)?;
            log.push(record);
            (window_loss, window_n, window_steps, window_samples) = (0.0, 0, 0, 0);
        }
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done != config.iterations {
            observer.checkpoint(done, &model)?;
        }
    }
    observer.checkpoint(config.iterations, &model)?;
    Ok(TrainOutcome {
        model,
        log,
        losses,
        rejected_steps: optim.rejected(),
    })
}

/// EPE and Fl-all of `model` over generated pairs.
pub fn evaluate<T: Scalar>(
    model: &FlowModel<T>,
    configs: &[GenConfig],
    refiner: Refiner,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(configs.len());
    let mut nfe = Vec::with_capacity(configs.len());
    for (index, cfg) in configs.iter().enumerate() {
        let pair = gen_pair::<T>(cfg)?;
        let pred = model.predict(&pair.image1, &pair.image2, refiner)?;
        records.push(SampleRecord {
            index,
            seed: Some(cfg.seed),
            epe: epe(&pred.flow, &pair.flow, &pair.valid)?,
            fl_all: fl_all(&pred.flow, &pair.flow, &pair.valid)?,
            solver_steps: pred.stats.steps_taken,
        });
        nfe.push(pred.stats.nfe);
    }
    EvalReport::from_samples(records, &nfe, config_echo)
}
