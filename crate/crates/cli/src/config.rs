//! Flat `key=value` run configuration layered over the library defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nodeflow::flownet::{ModelConfig, Refiner};
use nodeflow::synth::GenConfig;
use nodeflow::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ECHO_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out pairs generated when no manifest is given.
    pub samples: usize,
    /// Refiner used for evaluation; the model's own when absent.
    pub refiner: Option<Refiner>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 16,
            refiner: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A run configuration plus the keys the user set explicitly.
#[derive(Clone, Debug)]
pub struct Layered {
    tree: Value,
    pub explicit: BTreeSet<String>,
}

impl Layered {
    pub fn defaults() -> Self {
        Layered {
            tree: serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
            explicit: BTreeSet::new(),
        }
    }

    /// Applies every `key=value` line of `path`; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line)
                .with_context(|| format!("{}:{}", path.display(), no + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got `{assignment}`"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut node = &mut self.tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
        }
        if node.is_object() {
            bail!("config key `{key}` names a section, not a value");
        }
        *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_path_to_error::deserialize(self.tree.clone()).map_err(|e| {
            let key = e.path().to_string();
            anyhow!("invalid value for `{key}`: {}", e.into_inner())
        })?;
        cfg.model.validate()?;
        cfg.gen.validate()?;
        cfg.train.validate()?;
        if cfg.eval.samples == 0 {
            bail!("eval.samples must be at least 1");
        }
        Ok(cfg)
    }
}

/// `key=value` lines for every leaf of `cfg`, sorted by key.
pub fn flatten(cfg: &RunConfig) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(cfg).expect("config serializes"), &mut out);
    out.sort();
    out
}

pub fn echo_text(cfg: &RunConfig) -> String {
    flatten(cfg).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(ECHO_FILE);
    fs::write(&path, echo_text(cfg)).with_context(|| format!("cannot write {}", path.display()))
}

/// Dotted `model.*` keys whose values differ between `a` and `b`.
pub fn differing(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let mut out = Vec::new();
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(ma), Value::Object(mb)) => {
                for (k, ca) in ma {
                    let key = format!("{prefix}.{k}");
                    walk(&key, ca, mb.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    walk("model", &va, &vb, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut l = Layered::defaults();
        l.apply("model.solver.method = rk4").unwrap();
        l.apply("train.lr=0.001").unwrap();
        l.apply("gen.translation=[1.5,-2]").unwrap();
        l.apply("gen.family=translation").unwrap();
        let cfg = l.resolve().unwrap();
        let mut again = Layered::defaults();
        for line in echo_text(&cfg).lines() {
            again.apply(line).unwrap();
        }
        assert_eq!(again.resolve().unwrap(), cfg);
        assert_eq!(cfg.gen.translation, Some([1.5, -2.0]));
    }

    #[test]
    fn unknown_and_section_keys_are_errors() {
        let mut l = Layered::defaults();
        assert!(l.apply("model.nope=1").is_err());
        assert!(l.apply("model=1").is_err());
        assert!(l.apply("no_equals").is_err());
    }

    #[test]
    fn bad_values_fail_on_resolve() {
        let mut l = Layered::defaults();
        l.apply("train.iterations=many").unwrap();
        assert!(l.resolve().is_err());
        let mut l = Layered::defaults();
        l.apply("train.gamma=2").unwrap();
        assert!(l.resolve().is_err());
    }

    #[test]
    fn differing_lists_changed_leaves() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.d_hid = 16;
        b.solver.step_size = 0.5;
        assert_eq!(differing(&a, &b), ["model.d_hid", "model.solver.step_size"]);
    }
}
