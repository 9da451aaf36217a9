use proptest::prelude::*;

use super::*;
use crate::flownet::{FlowField, ModelConfig, SolverSpec, ValidMask};
use crate::ode::Method;
use crate::synth::FlowFamily;
use crate::testutil::rng;
use rand::Rng;

fn field(h: usize, w: usize, f: impl FnMut(usize, usize) -> (f64, f64)) -> FlowField<f64> {
    FlowField::from_fn(h, w, f)
}

fn random_field(h: usize, w: usize, seed: u64) -> FlowField<f64> {
    let mut r = rng(seed);
    field(h, w, |_, _| (r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)))
}

fn naive_masked_l1(p: &FlowField<f64>, g: &FlowField<f64>, m: &ValidMask) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for y in 0..g.height() {
        for x in 0..g.width() {
            if m.is_valid(y, x) {
                let (a, b) = (p.at(y, x), g.at(y, x));
                s += (a.0 - b.0).abs() + (a.1 - b.1).abs();
                n += 1.0;
            }
        }
    }
    s / n
}

#[test]
fn loss_examples() {
    let m = ValidMask::all(3, 4);
    let gt = field(3, 4, |_, _| (1.0, 1.0));
    assert_eq!(flow_loss(std::slice::from_ref(&gt), &gt, &m, 0.9).unwrap(), 0.0);
    let zero = FlowField::<f64>::zeros(3, 4);
    assert_eq!(flow_loss(&[zero], &gt, &m, 0.9).unwrap(), 2.0);
}

#[test]
fn two_prediction_loss_expands_with_gamma() {
    for seed in 0..20 {
        let gt = random_field(4, 5, seed);
        let (p1, p2) = (random_field(4, 5, seed + 100), random_field(4, 5, seed + 200));
        let bits = (0..20).map(|i| (i + seed as usize) % 4 != 0).collect();
        let m = ValidMask::new(4, 5, bits).unwrap();
        let (e1, e2) = (naive_masked_l1(&p1, &gt, &m), naive_masked_l1(&p2, &gt, &m));
        let l = flow_loss(&[p1, p2], &gt, &m, 0.9).unwrap();
        assert!((l - (0.9 * e1 + e2)).abs() <= 1e-12, "{l} vs {}", 0.9 * e1 + e2);
    }
}

#[test]
fn single_prediction_loss_ignores_gamma_bitwise() {
    for seed in 0..20 {
        let gt = random_field(6, 3, seed);
        let p = [random_field(6, 3, seed + 7)];
        let m = ValidMask::all(6, 3);
        let a = flow_loss(&p, &gt, &m, 0.5).unwrap();
        let b = flow_loss(&p, &gt, &m, 0.9).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn loss_errors() {
    let f = FlowField::<f64>::zeros(2, 2);
    let none = ValidMask::new(2, 2, vec![false; 4]).unwrap();
    assert!(matches!(flow_loss(std::slice::from_ref(&f), &f, &none, 0.9), Err(Error::EmptyMask)));
    assert!(flow_loss(&[], &f, &ValidMask::all(2, 2), 0.9).is_err());
    assert!(flow_loss(&[FlowField::zeros(2, 3)], &f, &ValidMask::all(2, 2), 0.9).is_err());
}

#[test]
fn loss_gradient_is_masked_sign() {
    let gt = random_field(3, 3, 4);
    let p = random_field(3, 3, 5);
    let bits: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
    let m = ValidMask::new(3, 3, bits.clone()).unwrap();
    let g = Graph::<f64>::new();
    let v = g.leaf(p.tensor().clone());
    let l = flow_loss_graph(&g, &[v], &gt, &m, 0.9).unwrap();
    let grads = g.backward(l).unwrap();
    let d = grads.get(v).unwrap().data();
    for (i, (pv, gv)) in p.data().iter().zip(gt.data()).enumerate() {
        let want = if bits[i / 2] { (pv - gv).signum() / 6.0 } else { 0.0 };
        assert!((d[i] - want).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn loss_is_nonnegative_and_zero_only_at_truth(seed in 0u64..10_000, gamma in 0.05f64..1.0) {
        let gt = random_field(3, 3, seed);
        let m = ValidMask::all(3, 3);
        let p = random_field(3, 3, seed + 1);
        prop_assert!(flow_loss(&[p.clone(), gt.clone()], &gt, &m, gamma).unwrap() > 0.0);
        prop_assert_eq!(flow_loss(&[gt.clone(), gt.clone()], &gt, &m, gamma).unwrap(), 0.0);
    }
}

fn one_param(v: &[f64]) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("w", crate::Tensor::new([v.len()], v.to_vec()).unwrap()).unwrap();
    p
}

#[test]
fn zero_gradient_without_decay_keeps_parameters() {
    let mut p = one_param(&[1.0, -2.0, 3.0]);
    let before = p.clone();
    let mut opt = AdamW::new(&p, 0.0);
    for _ in 0..5 {
        assert!(opt.step(&mut p, &one_param(&[0.0; 3]), 0.1).unwrap());
    }
    assert_eq!(p, before);
}

#[test]
fn degenerate_moments_step_by_sign() {
    let mut p = one_param(&[1.0, 1.0, 1.0]);
    let mut opt = AdamW::with_betas(&p, 0.0, 0.0, 1e-8, 0.0);
    opt.step(&mut p, &one_param(&[3.0, -0.5, 1e-3]), 0.01).unwrap();
    for (v, s) in p.get("w").unwrap().data().iter().zip([1.0, -1.0, 1.0]) {
        assert!((v - (1.0 - 0.01 * s)).abs() < 1e-7);
    }
}

#[test]
fn decay_is_decoupled_from_gradient() {
    let mut p = one_param(&[2.0]);
    let mut opt = AdamW::new(&p, 0.1);
    opt.step(&mut p, &one_param(&[0.0]), 0.5).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 2.0 * (1.0 - 0.05));
}

#[test]
fn matches_scalar_reference_recursion() {
    let (b1, b2, eps, wd, lr) = (0.9, 0.999, 1e-8, 0.01, 0.05);
    let mut p = one_param(&[0.7]);
    let mut opt = AdamW::with_betas(&p, b1, b2, eps, wd);
    let (mut w, mut m, mut v) = (0.7f64, 0.0, 0.0);
    for t in 1..=20 {
        let g = (t as f64 * 0.37).sin() + w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w = w * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        let pw = p.get("w").unwrap().data()[0];
        opt.step(&mut p, &one_param(&[(t as f64 * 0.37).sin() + pw]), lr).unwrap();
        assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-12);
    }
}

#[test]
fn hundred_steps_shrink_convex_quadratic() {
    // L(w) = ½ Σ a_i (w_i − c_i)²
    let a = [1.0, 4.0, 0.25, 9.0];
    let c = [0.5, -1.0, 2.0, 0.0];
    let loss = |w: &[f64]| (0..4).map(|i| 0.5 * a[i] * (w[i] - c[i]).powi(2)).sum::<f64>();
    let mut p = one_param(&[3.0, 2.0, -2.0, 1.5]);
    let start = loss(p.get("w").unwrap().data());
    let mut opt = AdamW::new(&p, 0.0);
    for _ in 0..100 {
        let w = p.get("w").unwrap().data().to_vec();
        let g: Vec<f64> = (0..4).map(|i| a[i] * (w[i] - c[i])).collect();
        opt.step(&mut p, &one_param(&g), 0.1).unwrap();
    }
    assert!(loss(p.get("w").unwrap().data()) * 10.0 <= start);
}

#[test]
fn non_finite_gradient_is_rejected_and_counted() {
    let mut p = one_param(&[1.0, 2.0]);
    let before = p.clone();
    let mut opt = AdamW::new(&p, 0.1);
    assert!(!opt.step(&mut p, &one_param(&[f64::NAN, 1.0]), 0.1).unwrap());
    assert!(!opt.step(&mut p, &one_param(&[1.0, f64::INFINITY]), 0.1).unwrap());
    assert_eq!((opt.rejected(), opt.steps()), (2, 0));
    assert_eq!(p, before);
    assert!(opt.step(&mut p, &one_param(&[1.0, 2.0, 3.0]), 0.1).is_err());
}

#[test]
fn clipping_caps_global_norm() {
    let mut g = one_param(&[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    let d = g.get("w").unwrap().data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    let mut g = one_param(&[0.3, 0.4]);
    clip_grad_norm(&mut g, 1.0);
    assert_eq!(g, one_param(&[0.3, 0.4]));
}

#[test]
fn one_cycle_shape() {
    let s = OneCycle::new(2e-4, 2000);
    assert_eq!(s.peak_iteration(), 100);
    assert_eq!(s.lr(100), 2e-4);
    assert!((s.lr(0) - 2e-4 / 25.0).abs() < 1e-18);
    assert!((s.lr(1999) - 2e-4 / 25.0).abs() < 1e-18);
    assert!((s.lr(50) - (8e-6 + (2e-4 - 8e-6) * 0.5)).abs() < 1e-18);
}

proptest! {
    #[test]
    fn one_cycle_positive_with_single_peak(total in 1usize..5000, peak in 1e-6f64..1.0) {
        let s = OneCycle::new(peak, total);
        let lrs: Vec<f64> = (0..total).map(|i| s.lr(i)).collect();
        prop_assert!(lrs.iter().all(|&v| v > 0.0 && v <= peak));
        let top = s.peak_iteration();
        prop_assert_eq!(lrs[top], peak);
        prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        downsample: 4,
        feature_dim: 8,
        d_inp: 8,
        d_hid: 8,
        d_out: 8,
        pyramid_levels: 2,
        solver: SolverSpec {
            method: Method::Rk4,
            step_size: 0.5,
            ..SolverSpec::default()
        },
        decoder_zero_init: false,
        ..ModelConfig::default()
    }
}

fn tiny_gen() -> GenConfig {
    GenConfig {
        height: 16,
        width: 16,
        max_displacement: 3.0,
        family: FlowFamily::Mixed,
        ..GenConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        iterations: 3,
        batch_size: 2,
        log_interval: 2,
        val_samples: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let model = FlowModel::<f32>::new(tiny_model_config(), 3).unwrap();
    let cfg = TrainConfig {
        iterations: 0,
        ..tiny_train()
    };
    let out = train(model.clone(), &tiny_gen(), &cfg, &mut ()).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty() && out.losses.is_empty());
}

#[test]
fn seeded_training_is_reproducible() {
    let run = || {
        let model = FlowModel::<f32>::new(tiny_model_config(), 1).unwrap();
        train(model, &tiny_gen(), &tiny_train(), &mut ()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    assert_ne!(a.model, FlowModel::new(tiny_model_config(), 1).unwrap());
    assert_eq!(a.log.iter().map(|r| r.iter).collect::<Vec<_>>(), [2, 3]);
}

#[test]
fn observer_sees_logs_and_checkpoints() {
    #[derive(Default)]
    struct Rec(Vec<usize>, Vec<usize>);
    impl Observer<f32> for Rec {
        fn log(&mut self, r: &LogRecord) -> Result<()> {
            self.0.push(r.iter);
            Ok(())
        }
        fn checkpoint(&mut self, iter: usize, _: &FlowModel<f32>) -> Result<()> {
            self.1.push(iter);
            Ok(())
        }
    }
    let mut rec = Rec::default();
    let cfg = TrainConfig {
        iterations: 4,
        checkpoint_interval: 1,
        log_interval: 3,
        ..tiny_train()
    };
    train(FlowModel::<f32>::new(tiny_model_config(), 0).unwrap(), &tiny_gen(), &cfg, &mut rec).unwrap();
    assert_eq!(rec.0, [3, 4]);
    assert_eq!(rec.1, [1, 2, 3, 4]);
}

#[test]
fn direct_and_adjoint_batch_gradients_agree() {
    let mut cfg = tiny_model_config();
    // the adjoint is the continuous gradient; a fine grid brings it onto the
    // discrete one
    cfg.solver.step_size = 0.025;
    let model = FlowModel::<f64>::new(cfg, 5).unwrap();
    let batch: Vec<_> = (0..2)
        .map(|s| gen_pair::<f64>(&tiny_gen().with_seed(s)).unwrap())
        .collect();
    let run = |gradient| {
        let opts = ForwardOptions {
            refiner: Refiner::Ode,
            gradient,
        };
        batch_gradients(&model, &batch, &opts, 0.9, 1).unwrap()
    };
    let (d, a) = (run(GradientMode::Direct), run(GradientMode::Adjoint));
    assert!((d.loss - a.loss).abs() < 1e-12);
    for (name, gd) in d.grads.iter() {
        let ga = a.grads.get(name).unwrap();
        let scale = gd.max_abs().max(1e-8);
        let diff = gd.zip_map(ga, |x, y| x - y).unwrap().max_abs();
        assert!(diff / scale < 1e-3, "{name}: {diff} vs {scale}");
    }
}

#[test]
fn non_finite_parameters_trip_the_divergence_guard() {
    let mut model = FlowModel::<f32>::new(tiny_model_config(), 0).unwrap();
    model.params.get_mut("dec.c2.b").unwrap().data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        iterations: 30,
        ..tiny_train()
    };
    match train(model, &tiny_gen(), &cfg, &mut ()) {
        Err(Error::Diverged(n)) => assert_eq!(n, DIVERGENCE_PATIENCE),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
    }
}

#[test]
fn supervising_more_predictions_than_produced_is_an_error() {
    let cfg = TrainConfig {
        predictions: 2,
        ..tiny_train()
    };
    let model = FlowModel::<f32>::new(tiny_model_config(), 0).unwrap();
    assert!(matches!(train(model, &tiny_gen(), &cfg, &mut ()), Err(Error::Config(_))));
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { gamma: 0.0, ..ok.clone() },
        TrainConfig { gamma: 1.5, ..ok.clone() },
        TrainConfig { predictions: 0, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { lr: -1.0, ..ok.clone() },
        TrainConfig { log_interval: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let json = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), ok);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"lrr": 1}"#).is_err());
}

#[test]
fn evaluation_report_is_bounded() {
    let model = FlowModel::<f32>::new(tiny_model_config(), 0).unwrap();
    let cfgs = validation_configs(&tiny_gen(), 3);
    let r = evaluate(&model, &cfgs, Refiner::Ode, serde_json::json!({"k": 1})).unwrap();
    assert_eq!(r.samples.len(), 3);
    assert!(r.epe >= 0.0 && (0.0..=100.0).contains(&r.fl_all));
    assert_eq!(r.samples[1].seed, Some(cfgs[1].seed));
}

