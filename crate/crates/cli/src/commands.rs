use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nodeflow::flownet::{checkpoint, FlowModel};
use nodeflow::metrics::{epe, fl_all, flow_to_color, EvalReport, SampleRecord};
use nodeflow::ode::problems::SolveReport;
use nodeflow::synth::codec::{read_ppm, write_flo, write_ppm};
use nodeflow::synth::{gen_pair, load_sample, validation_configs, write_dataset, GenConfig, Manifest};
use nodeflow::training::{evaluate, train, LogRecord, Observer};
use nodeflow::Tensor;
use serde::Serialize;

use crate::config::{differing, write_echo, Layered, RunConfig};
use crate::{Command, Common};

pub const CHECKPOINT_FILE: &str = "checkpoint.nfck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";

struct Run {
    cfg: RunConfig,
    explicit: Vec<String>,
    out: Option<PathBuf>,
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<Run> {
    let mut layered = Layered::defaults();
    if let Some(path) = &common.config {
        layered.apply_file(path)?;
    }
    for o in &common.overrides {
        layered.apply(o).with_context(|| format!("--set {o}"))?;
    }
    if let Some(seed) = common.seed {
        layered.set("train.seed", &seed.to_string())?;
        layered.set("gen.seed", &seed.to_string())?;
    }
    for (k, v) in extra {
        layered.set(k, v)?;
    }
    let cfg = layered.resolve()?;
    if let Some(out) = &common.out {
        fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
        write_echo(out, &cfg)?;
    }
    Ok(Run {
        cfg,
        explicit: layered.explicit.into_iter().collect(),
        out: common.out.clone(),
    })
}

fn required_out(run: &Run, cmd: &str) -> Result<PathBuf> {
    match &run.out {
        Some(o) => Ok(o.clone()),
        None => bail!("`{cmd}` needs --out"),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Loads a checkpoint and applies explicit solver overrides; other
/// explicit `model.*` keys must agree with the stored architecture.
fn load_model(path: &Path, run: &Run) -> Result<FlowModel<f32>> {
    let mut model = checkpoint::load(path)?;
    let mut requested = run.cfg.model.clone();
    requested.solver = model.config.solver.clone();
    let clash: Vec<String> = differing(&requested, &model.config)
        .into_iter()
        .filter(|k| run.explicit.contains(k))
        .collect();
    if !clash.is_empty() {
        bail!(
            "config does not match checkpoint {} on {}",
            path.display(),
            clash.join(", ")
        );
    }
    let mut solver = serde_json::to_value(&model.config.solver)?;
    let wanted = serde_json::to_value(&run.cfg.model.solver)?;
    for key in &run.explicit {
        if let Some(field) = key.strip_prefix("model.solver.") {
            solver[field] = wanted[field].clone();
        }
    }
    model.config.solver = serde_json::from_value(solver)?;
    model.config.validate()?;
    Ok(model)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { iterations, common } => {
            let extra: Vec<_> = iterations.map(|n| ("train.iterations", n.to_string())).into_iter().collect();
            let run = load_config(&common, &extra)?;
            cmd_train(&run)
        }
        Command::Eval {
            checkpoint,
            manifest,
            refiner,
            common,
        } => {
            let extra: Vec<_> = refiner.map(|r| ("eval.refiner", r.to_string())).into_iter().collect();
            let run = load_config(&common, &extra)?;
            cmd_eval(&run, &checkpoint, manifest.as_deref())
        }
        Command::Infer {
            checkpoint,
            image1,
            image2,
            refiner,
            common,
        } => {
            let extra: Vec<_> = refiner.map(|r| ("eval.refiner", r.to_string())).into_iter().collect();
            let run = load_config(&common, &extra)?;
            cmd_infer(&run, &checkpoint, &image1, &image2)
        }
        Command::Solve {
            problem,
            method,
            step_size,
            tol,
            rtol,
            atol,
            max_steps,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = method {
                extra.push(("model.solver.method", m.name().to_string()));
            }
            let pairs = [
                ("model.solver.step_size", step_size),
                ("model.solver.rtol", rtol.or(tol)),
                ("model.solver.atol", atol.or(tol)),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    extra.push((k, v.to_string()));
                }
            }
            if let Some(n) = max_steps {
                extra.push(("model.solver.max_steps", n.to_string()));
            }
            let run = load_config(&common, &extra)?;
            let report = SolveReport::run(problem, &run.cfg.model.solver.to_config())?;
            if let Some(out) = &run.out {
                write_json(&out.join("trajectory.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::AblateT {
            checkpoint,
            times,
            common,
        } => {
            let run = load_config(&common, &[])?;
            cmd_ablate_t(&run, &checkpoint, &times)
        }
        Command::Gen { count, common } => {
            let run = load_config(&common, &[])?;
            let out = required_out(&run, "gen")?;
            let gen = &run.cfg.gen;
            let configs: Vec<GenConfig> = (0..count as u64).map(|i| gen.with_seed(gen.seed + i)).collect();
            let manifest = write_dataset(&out, &configs)?;
            eprintln!("wrote {} pairs to {}", manifest.entries.len(), out.display());
            Ok(())
        }
    }
}

struct TrainLog {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Observer<f32> for TrainLog {
    fn log(&mut self, r: &LogRecord) -> nodeflow::Result<()> {
        let line = serde_json::to_string(r)?;
        let io = |e| nodeflow::Error::Io {
            path: self.dir.join(METRICS_FILE),
            source: e,
        };
        writeln!(self.metrics, "{line}").and_then(|_| self.metrics.flush()).map_err(io)?;
        let epe = r.val_epe.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let loss = r.loss.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        eprintln!("iter {:>6}  loss {loss}  val_epe {epe}  lr {:.2e}", r.iter, r.lr);
        Ok(())
    }

    fn checkpoint(&mut self, iter: usize, model: &FlowModel<f32>) -> nodeflow::Result<()> {
        checkpoint::save(model, self.dir.join(format!("checkpoint_{iter:06}.nfck")))?;
        checkpoint::save(model, self.dir.join(CHECKPOINT_FILE))
    }
}

fn cmd_train(run: &Run) -> Result<()> {
    let out = required_out(run, "train")?;
    let cfg = &run.cfg;
    let model = FlowModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).with_context(|| format!("cannot create {}", metrics_path.display()))?;
    let mut log = TrainLog {
        dir: out.clone(),
        metrics: BufWriter::new(file),
    };
    let outcome = train(model, &cfg.gen, &cfg.train, &mut log)?;
    let refiner = cfg.eval.refiner.unwrap_or(outcome.model.config.refiner);
    let held_out = validation_configs(&cfg.gen, cfg.eval.samples);
    let report = evaluate(&outcome.model, &held_out, refiner, serde_json::to_value(cfg)?)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    println!(
        "val_epe {:.4} fl_all {:.2} solver_steps_mean {:.2}",
        report.epe, report.fl_all, report.solver.steps_mean
    );
    Ok(())
}

fn cmd_eval(run: &Run, ckpt: &Path, manifest: Option<&Path>) -> Result<()> {
    let model = load_model(ckpt, run)?;
    let refiner = run.cfg.eval.refiner.unwrap_or(model.config.refiner);
    model.supports(refiner)?;
    let mut echo = serde_json::to_value(&run.cfg)?;
    echo["checkpoint"] = serde_json::json!({ "path": ckpt, "model": model.config, "refiner": refiner });
    let report = match manifest {
        None => evaluate(&model, &validation_configs(&run.cfg.gen, run.cfg.eval.samples), refiner, echo)?,
        Some(path) => {
            let m = Manifest::read(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut records = Vec::new();
            let mut nfe = Vec::new();
            for (index, entry) in m.entries.iter().enumerate() {
                let (i1, i2, gt, valid) = load_sample(base, entry)?;
                let pred = model.predict(&i1, &i2, refiner)?;
                records.push(SampleRecord {
                    index,
                    seed: Some(entry.seed),
                    epe: epe(&pred.flow, &gt, &valid)?,
                    fl_all: fl_all(&pred.flow, &gt, &valid)?,
                    solver_steps: pred.stats.steps_taken,
                });
                nfe.push(pred.stats.nfe);
            }
            EvalReport::from_samples(records, &nfe, echo)?
        }
    };
    if let Some(out) = &run.out {
        write_json(&out.join(EVAL_FILE), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_infer(run: &Run, ckpt: &Path, image1: &Path, image2: &Path) -> Result<()> {
    let out = required_out(run, "infer")?;
    let model = load_model(ckpt, run)?;
    let refiner = run.cfg.eval.refiner.unwrap_or(model.config.refiner);
    let (i1, i2) = (read_ppm(image1)?, read_ppm(image2)?);
    if i1.shape() != i2.shape() {
        bail!("image extents differ: {:?} vs {:?}", i1.shape(), i2.shape());
    }
    let pred = model.predict(&i1, &i2, refiner)?;
    write_flo(&pred.flow, out.join("flow.flo"))?;
    write_ppm(&flow_to_color(&pred.flow, None), out.join("flow.ppm"))?;
    let mean = pred.flow.vectors().map(|(x, y)| (x as f64).hypot(y as f64)).sum::<f64>()
        / (pred.flow.height() * pred.flow.width()) as f64;
    println!("mean_flow_norm {mean:.4} solver_steps {}", pred.stats.steps_taken);
    Ok(())
}

#[derive(Serialize)]
struct TimeRow {
    t: f64,
    epe: f64,
    fl_all: f64,
}

fn cmd_ablate_t(run: &Run, ckpt: &Path, times: &[f64]) -> Result<()> {
    if times.is_empty() {
        bail!("--times needs at least one value");
    }
    if times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !t.is_finite()) {
        bail!("--times must be finite and strictly increasing");
    }
    let model = load_model(ckpt, run)?;
    let ts: Vec<f32> = times.iter().map(|&t| t as f32).collect();
    let configs = validation_configs(&run.cfg.gen, run.cfg.eval.samples);
    let mut sums = vec![(0.0, 0.0); times.len()];
    let mut strips = Vec::new();
    for (k, cfg) in configs.iter().enumerate() {
        let pair = gen_pair::<f32>(cfg)?;
        let flows = model.flow_at_times(&pair.image1, &pair.image2, &ts)?;
        for (s, f) in sums.iter_mut().zip(&flows) {
            s.0 += epe(f, &pair.flow, &pair.valid)?;
            s.1 += fl_all(f, &pair.flow, &pair.valid)?;
        }
        if k < 2 {
            strips.push((flows, pair.flow));
        }
    }
    let n = configs.len() as f64;
    let rows: Vec<TimeRow> = times
        .iter()
        .zip(&sums)
        .map(|(&t, s)| TimeRow {
            t,
            epe: s.0 / n,
            fl_all: s.1 / n,
        })
        .collect();
    println!("{:>8}  {:>9}  {:>8}", "t", "epe", "fl_all");
    for r in &rows {
        println!("{:>8.3}  {:>9.4}  {:>8.2}", r.t, r.epe, r.fl_all);
    }
    if let Some(out) = &run.out {
        write_json(&out.join("ablate_t.json"), &rows)?;
        for (k, (flows, gt)) in strips.iter().enumerate() {
            let max = f64::from(gt.max_norm()).max(1e-6);
            let mut panels: Vec<Tensor<f64>> = flows.iter().map(|f| flow_to_color(f, Some(max))).collect();
            panels.push(flow_to_color(gt, Some(max)));
            write_ppm(&hstack(&panels), out.join(format!("strip_{k}.ppm")))?;
        }
    }
    Ok(())
}

/// Side-by-side concatenation of equally tall `[H,W,3]` images with a
/// two-pixel white gutter.
fn hstack(panels: &[Tensor<f64>]) -> Tensor<f64> {
    const GAP: usize = 2;
    let h = panels[0].shape()[0];
    let widths: Vec<usize> = panels.iter().map(|p| p.shape()[1]).collect();
    let total = widths.iter().sum::<usize>() + GAP * (panels.len() - 1);
    let mut data = vec![1.0; h * total * 3];
    let mut x0 = 0;
    for (p, &w) in panels.iter().zip(&widths) {
        for y in 0..h {
            let src = &p.data()[y * w * 3..(y + 1) * w * 3];
            data[(y * total + x0) * 3..(y * total + x0 + w) * 3].copy_from_slice(src);
        }
        x0 += w + GAP;
    }
    Tensor::new([h, total, 3], data).expect("sizes match")
}
