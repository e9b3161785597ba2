//! Run configuration as flat `key = value` text.
//!
//! Resolution order: built-in defaults, then the file, then overrides.
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! values of the wrong type are rejected with an error naming the key.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::SyntheticTask;
use crate::engine::{MethodConfig, MethodKind};
use crate::error::{Error, Result};
use crate::gates::GateSchedule;
use crate::model::ModelSpec;
use crate::optim::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Settings for the theory checks.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConfig {
    /// Epochs of DCR training before the live-model snapshot is taken.
    pub snapshot_epochs: usize,
    /// Replaced layer probed by the live-model checks.
    pub site: usize,
    pub batches: usize,
    pub draws: usize,
    pub batch_size: usize,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub task: SyntheticTask,
    pub method: MethodKind,
    /// `None` selects the method's default schedule.
    pub schedule: Option<GateSchedule>,
    pub dfg_weight: f64,
    pub dfg_schedule: GateSchedule,
    pub gumbel_tau: f64,
    pub kd_temperature: f64,
    pub per_example_gates: bool,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub optimizer: AdamW,
    pub clip: f64,
    pub eval_points: usize,
    /// Fraction of the teacher's validation accuracy counted as reached.
    pub threshold: f64,
    /// Teacher checkpoint; when absent a teacher is trained first.
    pub teacher: Option<PathBuf>,
    pub teacher_training: TeacherTraining,
    /// Methods run by `compare`.
    pub compare_methods: Vec<MethodKind>,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTask::default();
        RunConfig {
            seed: 0,
            model: ModelSpec::default(),
            task,
            method: MethodKind::Dcr,
            schedule: None,
            dfg_weight: 1.0,
            dfg_schedule: GateSchedule::dcr_aggr20(),
            gumbel_tau: 1.0,
            kd_temperature: 4.0,
            per_example_gates: false,
            label_smoothing: 0.1,
            epochs: 40,
            batch_size: 32,
            lr: 5e-4,
            min_lr: 1e-6,
            optimizer: AdamW::default(),
            clip: 1.0,
            eval_points: 50,
            threshold: 0.9,
            teacher: None,
            teacher_training: TeacherTraining {
                epochs: 25,
                lr: 3e-3,
                batch_size: 32,
            },
            compare_methods: vec![
                MethodKind::DcrDfg,
                MethodKind::Dcr,
                MethodKind::TheseusBernoulli,
                MethodKind::StudentOnly,
            ],
            theory: TheoryConfig {
                snapshot_epochs: 2,
                site: 2,
                batches: 64,
                draws: 32,
                batch_size: 16,
                p: 0.5,
            },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected {expected}, got `{value}`")))
}

/// Prefixes an error with the key it came from.
fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Parameter(m) => Error::Config(format!("key `{key}`: {m}")),
        other => Error::Config(format!("key `{key}`: {other}")),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "method",
        "schedule",
        "dfg_weight",
        "dfg_schedule",
        "gumbel_tau",
        "kd_temperature",
        "per_example_gates",
        "label_smoothing",
        "epochs",
        "batch_size",
        "lr",
        "min_lr",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "clip",
        "eval_points",
        "threshold",
        "teacher",
        "teacher.epochs",
        "teacher.lr",
        "teacher.batch_size",
        "compare.methods",
        "model.depth",
        "model.width",
        "model.heads",
        "model.seq_len",
        "model.num_classes",
        "model.mlp_hidden",
        "model.replaced",
        "model.ln_eps",
        "task.kind",
        "task.seed",
        "task.train_size",
        "task.val_size",
        "theory.snapshot_epochs",
        "theory.site",
        "theory.batches",
        "theory.draws",
        "theory.batch_size",
        "theory.p",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const INT: &str = "a non-negative integer";
        const FLOAT: &str = "a number";
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v, INT)?,
            "method" => self.method = v.parse().map_err(|e| keyed(key, e))?,
            "schedule" => {
                self.schedule = if v == "default" {
                    None
                } else {
                    Some(v.parse().map_err(|e| keyed(key, e))?)
                }
            }
            "dfg_weight" => self.dfg_weight = parse(key, v, FLOAT)?,
            "dfg_schedule" => self.dfg_schedule = v.parse().map_err(|e| keyed(key, e))?,
            "gumbel_tau" => self.gumbel_tau = parse(key, v, FLOAT)?,
            "kd_temperature" => self.kd_temperature = parse(key, v, FLOAT)?,
            "per_example_gates" => self.per_example_gates = parse_bool(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v, FLOAT)?,
            "epochs" => self.epochs = parse(key, v, INT)?,
            "batch_size" => self.batch_size = parse(key, v, INT)?,
            "lr" => self.lr = parse(key, v, FLOAT)?,
            "min_lr" => self.min_lr = parse(key, v, FLOAT)?,
            "weight_decay" => self.optimizer.weight_decay = parse(key, v, FLOAT)?,
            "beta1" => self.optimizer.beta1 = parse(key, v, FLOAT)?,
            "beta2" => self.optimizer.beta2 = parse(key, v, FLOAT)?,
            "adam_eps" => self.optimizer.eps = parse(key, v, FLOAT)?,
            "clip" => self.clip = parse(key, v, FLOAT)?,
            "eval_points" => self.eval_points = parse(key, v, INT)?,
            "threshold" => self.threshold = parse(key, v, FLOAT)?,
            "teacher" => self.teacher = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "teacher.epochs" => self.teacher_training.epochs = parse(key, v, INT)?,
            "teacher.lr" => self.teacher_training.lr = parse(key, v, FLOAT)?,
            "teacher.batch_size" => self.teacher_training.batch_size = parse(key, v, INT)?,
            "compare.methods" => {
                self.compare_methods = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()
                    .map_err(|e| keyed(key, e))?
            }
            "model.depth" => self.model.depth = parse(key, v, INT)?,
            "model.width" => self.model.width = parse(key, v, INT)?,
            "model.heads" => self.model.heads = parse(key, v, INT)?,
            "model.seq_len" => self.model.seq_len = parse(key, v, INT)?,
            "model.num_classes" => self.model.num_classes = parse(key, v, INT)?,
            "model.mlp_hidden" => self.model.mlp_hidden = parse(key, v, INT)?,
            "model.replaced" => {
                self.model.replaced = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s, "a comma-separated list of layer indices"))
                    .collect::<Result<BTreeSet<usize>>>()?
            }
            "model.ln_eps" => self.model.ln_eps = parse(key, v, FLOAT)?,
            "task.kind" => self.task.kind = v.parse().map_err(|e| keyed(key, e))?,
            "task.seed" => self.task.seed = parse(key, v, INT)?,
            "task.train_size" => self.task.train_size = parse(key, v, INT)?,
            "task.val_size" => self.task.val_size = parse(key, v, INT)?,
            "theory.snapshot_epochs" => self.theory.snapshot_epochs = parse(key, v, INT)?,
            "theory.site" => self.theory.site = parse(key, v, INT)?,
            "theory.batches" => self.theory.batches = parse(key, v, INT)?,
            "theory.draws" => self.theory.draws = parse(key, v, INT)?,
            "theory.batch_size" => self.theory.batch_size = parse(key, v, INT)?,
            "theory.p" => self.theory.p = parse(key, v, FLOAT)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        self.sync();
        Ok(())
    }

    /// Keeps the task and the model spec consistent.
    fn sync(&mut self) {
        self.task.seq_len = self.model.seq_len;
        self.task.num_classes = self.model.num_classes;
        self.model.vocab = self.task.vocab();
    }

    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            kind: self.method,
            schedule: self
                .schedule
                .clone()
                .unwrap_or_else(|| self.method.default_schedule()),
            dfg_weight: self.dfg_weight,
            dfg_schedule: self.dfg_schedule.clone(),
            gumbel_tau: self.gumbel_tau,
            kd_temperature: self.kd_temperature,
            per_example_gates: self.per_example_gates,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn with_method(&self, kind: MethodKind) -> RunConfig {
        RunConfig {
            method: kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.method_config().validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_points", self.eval_points),
            ("teacher.epochs", self.teacher_training.epochs),
            ("teacher.batch_size", self.teacher_training.batch_size),
            ("task.train_size", self.task.train_size),
            ("task.val_size", self.task.val_size),
            ("theory.batches", self.theory.batches),
            ("theory.batch_size", self.theory.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("key `{k}` must be positive")));
        }
        if self.batch_size > self.task.train_size {
            return Err(Error::Config(
                "key `batch_size` exceeds task.train_size".into(),
            ));
        }
        for (k, v) in [("lr", self.lr), ("teacher.lr", self.teacher_training.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("key `{k}` must be positive")));
            }
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config("key `min_lr` must lie in [0, lr]".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("key `clip` must be positive".into()));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config(
                "keys `beta1` and `beta2` must lie in [0, 1)".into(),
            ));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "key `adam_eps` must be positive and `weight_decay` non-negative".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config("key `threshold` must lie in (0, 1]".into()));
        }
        if self.compare_methods.is_empty() {
            return Err(Error::Config(
                "key `compare.methods` lists no method".into(),
            ));
        }
        if !self.model.replaced.contains(&self.theory.site) {
            return Err(Error::Config(format!(
                "key `theory.site`: layer {} is not replaced",
                self.theory.site
            )));
        }
        if self.theory.draws < 2 {
            return Err(Error::Config(
                "key `theory.draws` must be at least 2".into(),
            ));
        }
        if !(self.theory.p > 0.0 && self.theory.p < 1.0) {
            return Err(Error::Config("key `theory.p` must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`RunConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let values = [
            self.seed.to_string(),
            self.method.to_string(),
            self.schedule
                .as_ref()
                .map_or_else(|| "default".to_string(), |s| s.to_string()),
            self.dfg_weight.to_string(),
            self.dfg_schedule.to_string(),
            self.gumbel_tau.to_string(),
            self.kd_temperature.to_string(),
            self.per_example_gates.to_string(),
            self.label_smoothing.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.min_lr.to_string(),
            self.optimizer.weight_decay.to_string(),
            self.optimizer.beta1.to_string(),
            self.optimizer.beta2.to_string(),
            self.optimizer.eps.to_string(),
            self.clip.to_string(),
            self.eval_points.to_string(),
            self.threshold.to_string(),
            self.teacher
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            self.teacher_training.epochs.to_string(),
            self.teacher_training.lr.to_string(),
            self.teacher_training.batch_size.to_string(),
            join(&self.compare_methods),
            m.depth.to_string(),
            m.width.to_string(),
            m.heads.to_string(),
            m.seq_len.to_string(),
            m.num_classes.to_string(),
            m.mlp_hidden.to_string(),
            join(&m.replaced),
            m.ln_eps.to_string(),
            self.task.kind.to_string(),
            self.task.seed.to_string(),
            self.task.train_size.to_string(),
            self.task.val_size.to_string(),
            self.theory.snapshot_epochs.to_string(),
            self.theory.site.to_string(),
            self.theory.batches.to_string(),
            self.theory.draws.to_string(),
            self.theory.batch_size.to_string(),
            self.theory.p.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    /// The resolved configuration in the file format; loading it back gives
    /// an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Defaults, then the file at `path` (if any), then `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_and_entries_line_up() {
        let cfg = RunConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.len(), RunConfig::KEYS.len());
        let mut round = RunConfig::default();
        round.set("lr", "1e-3").unwrap();
        round.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("lr", "fast").unwrap_err().to_string();
        assert!(e.contains("`lr`"), "{e}");
        let e = cfg.set("learning_rate", "1").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        assert!(cfg.apply_text("lr 1e-3").is_err());
    }

    #[test]
    fn sequence_settings_flow_into_the_task() {
        let mut cfg = RunConfig::default();
        cfg.set("model.seq_len", "8").unwrap();
        assert_eq!(cfg.task.seq_len, 8);
        assert_eq!(cfg.model.vocab, cfg.task.vocab());
    }
}
