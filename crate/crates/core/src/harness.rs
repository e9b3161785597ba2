//! Seeded end-to-end runs: teacher training, replacement runs and the
//! method grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{make_synthetic_task, Batch, Dataset};
use crate::engine::{training_step, MethodConfig, MethodKind, StepOutput};
use crate::error::{Error, Result};
use crate::metrics::{
    fmt_sig9, interface_cosine_similarity, metrics_csv, MetricsRow, TraceVariance,
};
use crate::model::{
    model_forward, uniform_gates, Backbone, ForwardOptions, Gates, Mix, Model, ModelSpec, Trainable,
};
use crate::optim::{adamw_step, clip_grad_norm, cosine_lr, global_norm, AdamState};
use crate::rng;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 128;

/// Accuracy and per-site interface similarity on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `(layer, similarity)`; empty unless both branches were requested.
    pub cos: Vec<(usize, f64)>,
}

pub fn evaluate(
    model: &Model,
    data: &Dataset,
    gates: &Gates,
    with_cos: bool,
) -> Result<Evaluation> {
    let spec = &model.spec;
    let mut correct = 0usize;
    let mut cos_sum: BTreeMap<usize, f64> = BTreeMap::new();
    for chunk in data.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::Nothing);
        let opts = ForwardOptions {
            both_branches: with_cos,
        };
        let out = model_forward(&mut g, spec, &bound, &chunk.tokens, gates, opts)?;
        correct += count_correct(g.value(out.logits), &chunk.labels);
        if with_cos {
            for site in &out.sites {
                let (t, s) = (site.teacher_branch.unwrap(), site.student_branch.unwrap());
                let c = interface_cosine_similarity(g.value(t), g.value(s), chunk.len())?;
                *cos_sum.entry(site.layer).or_default() += c * chunk.len() as f64;
            }
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        cos: cos_sum.into_iter().map(|(l, c)| (l, c / n)).collect(),
    })
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let (_, c) = logits.rows_cols();
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Shuffled batch order for one epoch; a trailing partial batch is dropped.
fn epoch_batches(
    seed: u64,
    stream: u64,
    epoch: usize,
    n: usize,
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[stream, epoch as u64]));
    idx.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Steps after which a metrics row is logged: `round(k * total / points)`
/// for `k = 1..=points`, deduplicated.
pub fn eval_steps(total: usize, points: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=points)
        .map(|k| ((k as f64) * total as f64 / points as f64).round() as usize)
        .filter(|&s| s > 0)
        .collect();
    v.dedup();
    v
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub backbone: Backbone,
    pub val_acc: f64,
    /// `(step, train_loss, val_acc)` per evaluation.
    pub log: Vec<(usize, f64, f64)>,
}

/// Trains the whole backbone with every layer on its own attention, then
/// returns it frozen along with its validation accuracy.
pub fn make_teacher(cfg: &RunConfig) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let (train, val) = make_synthetic_task(&cfg.task)?;
    let spec = ModelSpec {
        replaced: Default::default(),
        ..cfg.model.clone()
    };
    let tt = &cfg.teacher_training;
    if tt.batch_size > train.len() {
        return Err(Error::Config(
            "key `teacher.batch_size` exceeds task.train_size".into(),
        ));
    }
    let mut model = Model::with_students(
        spec.clone(),
        Backbone::init(&spec, rng::derive_seed(cfg.seed, &[rng::INIT, 0]))?,
        0,
    )?;
    let mut state = AdamState::new(model.backbone.tensors_mut().iter().map(|t| t.numel()));
    let steps_per_epoch = train.len() / tt.batch_size;
    let total = tt.epochs * steps_per_epoch;
    let evals = eval_steps(total, cfg.eval_points.min(total));
    let mut log = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let gates = Gates::new();
    for epoch in 0..tt.epochs {
        for (b, idx) in epoch_batches(cfg.seed, rng::TEACHER, epoch, train.len(), tt.batch_size)
            .iter()
            .enumerate()
        {
            let step = epoch * steps_per_epoch + b;
            let batch = train.batch(idx);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, Trainable::Backbone);
            let out = model_forward(
                &mut g,
                &spec,
                &bound,
                &batch.tokens,
                &gates,
                ForwardOptions::default(),
            )?;
            let loss = g.cross_entropy(out.logits, &batch.labels, cfg.label_smoothing)?;
            g.backward(loss, &Tensor::scalar(1.0))?;
            loss_acc += g.value(loss).item();
            loss_n += 1;
            let mut grads: Vec<Vec<f64>> = bound
                .backbone_vars()
                .iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            clip_grad_norm(&mut grads, cfg.clip);
            let lr = cosine_lr(step, total, tt.lr, cfg.min_lr);
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            adamw_step(
                &mut model.backbone.tensors_mut(),
                &refs,
                &mut state,
                lr,
                &cfg.optimizer,
            )?;
            if evals.contains(&(step + 1)) {
                let acc = evaluate(&model, &val, &gates, false)?.accuracy;
                log.push((step + 1, loss_acc / loss_n as f64, acc));
                loss_acc = 0.0;
                loss_n = 0;
            }
        }
    }
    let val_acc = evaluate(&model, &val, &gates, false)?.accuracy;
    Ok(TeacherOutcome {
        backbone: model.backbone,
        val_acc,
        log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Training stopped on a non-finite value; rows logged before it remain.
    Diverged(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub method: MethodKind,
    pub seed: u64,
    pub total_steps: usize,
    pub teacher_acc: f64,
    /// Student-only accuracy counted as reaching the teacher.
    pub target_acc: f64,
    pub steps_to_threshold: Option<usize>,
    pub final_val_acc: f64,
    pub final_student_val_acc: f64,
    pub final_cos: Vec<(usize, f64)>,
    pub status: RunStatus,
}

impl RunSummary {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "teacher_acc = {}", fmt_sig9(self.teacher_acc));
        let _ = writeln!(s, "target_acc = {}", fmt_sig9(self.target_acc));
        let _ = writeln!(
            s,
            "steps_to_threshold = {}",
            self.steps_to_threshold
                .map_or_else(|| "none".to_string(), |v| v.to_string())
        );
        let _ = writeln!(s, "final_val_acc = {}", fmt_sig9(self.final_val_acc));
        let _ = writeln!(
            s,
            "final_student_val_acc = {}",
            fmt_sig9(self.final_student_val_acc)
        );
        for (l, c) in &self.final_cos {
            let _ = writeln!(s, "final_cos_block{l} = {}", fmt_sig9(*c));
        }
        let status = match &self.status {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::Diverged(m) => format!("diverged: {}", m.replace('\n', " ")),
        };
        let _ = writeln!(s, "status = {status}");
        s
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: RunConfig,
    pub rows: Vec<MetricsRow>,
    /// `(step, mean milliseconds per training step)` per logged interval.
    pub timing: Vec<(usize, f64)>,
    pub summary: RunSummary,
    pub model: Model,
    /// Teacher branch evaluations summed over all steps.
    pub teacher_branch_evals: usize,
    pub teacher_full_passes: usize,
    /// Largest post-clip gradient norm seen.
    pub max_clipped_norm: f64,
    /// Largest squared teacher-gradient norm seen (always 0).
    pub max_teacher_grad_sq: f64,
}

#[derive(Default)]
struct Interval {
    steps: usize,
    total: f64,
    task: f64,
    dfg: f64,
    norm: f64,
    var: TraceVariance,
    millis: f64,
}

impl Interval {
    fn push(&mut self, out: &StepOutput, norm: f64, grads: &[Vec<f64>], millis: f64) {
        self.steps += 1;
        self.total += out.total_loss;
        self.task += out.task_loss;
        self.dfg += out.dfg_loss;
        self.norm += norm;
        self.var.push(grads.iter().flatten().copied());
        self.millis += millis;
    }

    fn mean(&self, x: f64) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            x / self.steps as f64
        }
    }
}

struct Evaluator<'a> {
    val: &'a Dataset,
    method: MethodConfig,
}

impl Evaluator<'_> {
    /// `(val_acc, student_val_acc, cos)` at training fraction `t`.
    fn at(&self, model: &Model, t: f64) -> Result<(f64, f64, Vec<(usize, f64)>)> {
        let mix = self.method.mean_field_mix(t)?;
        let all_student = mix == Mix::StudentOnly || mix == Mix::Blend { alpha: 0.0 };
        let gated = evaluate(model, self.val, &uniform_gates(&model.spec, mix), true)?;
        let student = if all_student {
            gated.accuracy
        } else {
            evaluate(
                model,
                self.val,
                &uniform_gates(&model.spec, Mix::StudentOnly),
                false,
            )?
            .accuracy
        };
        Ok((gated.accuracy, student, gated.cos))
    }
}

/// Trains the students of `cfg` against the frozen `teacher`.
///
/// A non-finite value stops the run early with [`RunStatus::Diverged`];
/// rows logged until then are kept.
pub fn run_experiment(cfg: &RunConfig, teacher: &Backbone) -> Result<RunRecord> {
    cfg.validate()?;
    let method = cfg.method_config();
    let (train, val) = make_synthetic_task(&cfg.task)?;
    let mut model = Model::with_students(
        cfg.model.clone(),
        teacher.clone(),
        rng::derive_seed(cfg.seed, &[rng::INIT, 1]),
    )?;
    let teacher_acc = evaluate(
        &model,
        &val,
        &uniform_gates(&model.spec, Mix::TeacherOnly),
        false,
    )?
    .accuracy;
    let target_acc = cfg.threshold * teacher_acc;

    let sizes: Vec<usize> = model
        .sites
        .iter()
        .flat_map(|s| s.student.tensors().map(|t| t.numel()))
        .collect();
    let mut state = AdamState::new(sizes);
    let steps_per_epoch = train.len() / cfg.batch_size;
    let total = cfg.epochs * steps_per_epoch;
    let evals = eval_steps(total, cfg.eval_points.min(total));
    let ev = Evaluator {
        val: &val,
        method: method.clone(),
    };

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let (mut branch_evals, mut full_passes) = (0, 0);
    let (mut max_clipped, mut max_teacher) = (0.0f64, 0.0f64);

    // Row 0: the cold-start state, with losses from a forward-only probe.
    {
        let first =
            train.batch(&epoch_batches(cfg.seed, rng::BATCHES, 0, train.len(), cfg.batch_size)[0]);
        let probe = training_step(
            &model,
            &first,
            &method,
            0.0,
            &mut rng::stream(cfg.seed, &[rng::PROBES]),
        )?;
        let (acc, sacc, cos) = ev.at(&model, 0.0)?;
        rows.push(MetricsRow {
            step: 0,
            epoch: 0,
            t_fraction: 0.0,
            gate: method.gate_value(0.0)?,
            lambda: method.lambda(0.0)?,
            lr: cosine_lr(0, total, cfg.lr, cfg.min_lr),
            train_loss: probe.total_loss,
            task_loss: probe.task_loss,
            dfg_loss: probe.dfg_loss,
            grad_norm: global_norm(&flat_grads(&probe)),
            grad_var: 0.0,
            val_acc: acc,
            student_val_acc: sacc,
            cos,
        });
    }

    let mut status = RunStatus::Completed;
    let mut interval = Interval::default();
    'epochs: for epoch in 0..cfg.epochs {
        for (b, idx) in epoch_batches(cfg.seed, rng::BATCHES, epoch, train.len(), cfg.batch_size)
            .iter()
            .enumerate()
        {
            let step = epoch * steps_per_epoch + b;
            let t = step as f64 / total as f64;
            let started = Instant::now();
            let batch: Batch = train.batch(idx);
            let mut gate_rng = rng::stream(cfg.seed, &[rng::GATES, step as u64]);
            let out = match training_step(&model, &batch, &method, t, &mut gate_rng) {
                Ok(o) => o,
                Err(Error::Numeric(m)) => {
                    status = RunStatus::Diverged(format!("step {step}: {m}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            branch_evals += out.teacher_cost.branch_evals;
            full_passes += out.teacher_cost.full_passes;
            max_teacher = max_teacher.max(out.teacher_grad_sq);
            let mut grads = flat_grads(&out);
            let norm = clip_grad_norm(&mut grads, cfg.clip);
            max_clipped = max_clipped.max(global_norm(&grads));
            let lr = cosine_lr(step, total, cfg.lr, cfg.min_lr);
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut Tensor> = model
                .sites
                .iter_mut()
                .flat_map(|s| s.student.tensors_mut())
                .collect();
            if let Err(e) = adamw_step(&mut params, &refs, &mut state, lr, &cfg.optimizer) {
                match e {
                    Error::Numeric(m) => {
                        status = RunStatus::Diverged(format!("step {step}: {m}"));
                        break 'epochs;
                    }
                    e => return Err(e),
                }
            }
            interval.push(&out, norm, &grads, started.elapsed().as_secs_f64() * 1e3);

            let done = step + 1;
            if evals.contains(&done) {
                let tr = done as f64 / total as f64;
                let (acc, sacc, cos) = ev.at(&model, tr)?;
                rows.push(MetricsRow {
                    step: done,
                    epoch: done / steps_per_epoch,
                    t_fraction: tr,
                    gate: method.gate_value(tr)?,
                    lambda: method.lambda(tr)?,
                    lr,
                    train_loss: interval.mean(interval.total),
                    task_loss: interval.mean(interval.task),
                    dfg_loss: interval.mean(interval.dfg),
                    grad_norm: interval.mean(interval.norm),
                    grad_var: interval.var.trace(),
                    val_acc: acc,
                    student_val_acc: sacc,
                    cos,
                });
                timing.push((done, interval.mean(interval.millis)));
                interval = Interval::default();
            }
        }
    }

    let last = rows.last().expect("row 0 is always logged");
    let summary = RunSummary {
        method: cfg.method,
        seed: cfg.seed,
        total_steps: total,
        teacher_acc,
        target_acc,
        steps_to_threshold: rows
            .iter()
            .find(|r| r.student_val_acc >= target_acc)
            .map(|r| r.step),
        final_val_acc: last.val_acc,
        final_student_val_acc: last.student_val_acc,
        final_cos: last.cos.clone(),
        status,
    };
    Ok(RunRecord {
        config: cfg.clone(),
        rows,
        timing,
        summary,
        model,
        teacher_branch_evals: branch_evals,
        teacher_full_passes: full_passes,
        max_clipped_norm: max_clipped,
        max_teacher_grad_sq: max_teacher,
    })
}

fn flat_grads(out: &StepOutput) -> Vec<Vec<f64>> {
    out.student_grads.values().flatten().cloned().collect()
}

/// Writes `config.txt`, `metrics.csv`, `timing.csv`, `summary.txt` and
/// `checkpoint.txt` into `dir`.
pub fn write_run(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let layers: Vec<usize> = record.model.sites.iter().map(|s| s.layer).collect();
    write_atomic(&dir.join("config.txt"), &record.config.to_text())?;
    write_atomic(
        &dir.join("metrics.csv"),
        &metrics_csv(&layers, &record.rows),
    )?;
    let mut timing = String::from("step,ms_per_step\n");
    for (s, ms) in &record.timing {
        let _ = writeln!(timing, "{s},{}", fmt_sig9(*ms));
    }
    write_atomic(&dir.join("timing.csv"), &timing)?;
    write_atomic(&dir.join("summary.txt"), &record.summary.to_text())?;
    checkpoint::save(&dir.join("checkpoint.txt"), &record.model)?;
    Ok(())
}

/// Writes through a temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every method of `cfg.compare_methods` with the same seed.
pub fn compare(cfg: &RunConfig, teacher: &Backbone) -> Result<Vec<RunRecord>> {
    cfg.compare_methods
        .iter()
        .map(|&m| run_experiment(&cfg.with_method(m), teacher))
        .collect()
}

/// Methods ordered by steps to threshold (never reached last, ties by final
/// student accuracy), as a text table.
pub fn ranking_table(records: &[RunRecord]) -> String {
    let mut order: Vec<&RunRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        let key = |r: &RunRecord| r.summary.steps_to_threshold.unwrap_or(usize::MAX);
        key(a).cmp(&key(b)).then(
            b.summary
                .final_student_val_acc
                .total_cmp(&a.summary.final_student_val_acc),
        )
    });
    let mut s = format!(
        "{:<4} {:<20} {:>18} {:>12} {:>12}",
        "rank", "method", "steps_to_threshold", "final_acc", "mean_cos"
    );
    for (i, r) in order.iter().enumerate() {
        let cos = &r.summary.final_cos;
        let mean_cos = cos.iter().map(|c| c.1).sum::<f64>() / cos.len().max(1) as f64;
        let _ = write!(
            s,
            "\n{:<4} {:<20} {:>18} {:>12.4} {:>12.4}",
            i + 1,
            r.summary.method.name(),
            r.summary
                .steps_to_threshold
                .map_or_else(|| "none".to_string(), |v| v.to_string()),
            r.summary.final_student_val_acc,
            mean_cos
        );
    }
    s
}
