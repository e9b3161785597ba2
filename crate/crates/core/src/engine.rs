//! One training step for each replacement method.
//!
//! Every method trains only the students. The teacher branch at a replaced
//! site is evaluated from a detached input with constant parameters, so the
//! backbone never receives a gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gates::{draw_bernoulli_gate, draw_gumbel_gate, GateDraw, GateSchedule, Mechanism};
use crate::model::{
    model_forward, uniform_gates, BlockOutputs, ForwardOptions, Gates, Mix, Model, Trainable,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    Dcr,
    DcrDfg,
    TheseusBernoulli,
    TheseusGumbel,
    TheseusGumbelDfg,
    StudentOnly,
    Kd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Dcr,
        MethodKind::DcrDfg,
        MethodKind::TheseusBernoulli,
        MethodKind::TheseusGumbel,
        MethodKind::TheseusGumbelDfg,
        MethodKind::StudentOnly,
        MethodKind::Kd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Dcr => "dcr",
            MethodKind::DcrDfg => "dcr_dfg",
            MethodKind::TheseusBernoulli => "theseus_bernoulli",
            MethodKind::TheseusGumbel => "theseus_gumbel",
            MethodKind::TheseusGumbelDfg => "theseus_gumbel_dfg",
            MethodKind::StudentOnly => "student_only",
            MethodKind::Kd => "kd",
        }
    }

    pub fn mechanism(self) -> Mechanism {
        match self {
            MethodKind::TheseusBernoulli => Mechanism::Bernoulli,
            MethodKind::TheseusGumbel | MethodKind::TheseusGumbelDfg => Mechanism::Gumbel,
            _ => Mechanism::Deterministic,
        }
    }

    pub fn uses_dfg(self) -> bool {
        matches!(self, MethodKind::DcrDfg | MethodKind::TheseusGumbelDfg)
    }

    /// Whether the schedule drives the gates. Student-only and KD run the
    /// students alone from the first step.
    pub fn is_scheduled(self) -> bool {
        !matches!(self, MethodKind::StudentOnly | MethodKind::Kd)
    }

    pub fn default_schedule(self) -> GateSchedule {
        match self.mechanism() {
            Mechanism::Deterministic if self.is_scheduled() => GateSchedule::dcr_aggr20(),
            Mechanism::Deterministic => GateSchedule::constant(0.0).expect("0 is a valid gate"),
            _ => GateSchedule::theseus_aggr20(),
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = MethodKind::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Teacher weight `alpha(t)` for DCR, student probability `p(t)` for the
    /// stochastic gates; ignored by student-only and KD.
    pub schedule: GateSchedule,
    /// Base DFG weight `lambda_0`; only DFG methods use it.
    pub dfg_weight: f64,
    /// Shape of `lambda(t) / lambda_0`.
    pub dfg_schedule: GateSchedule,
    pub gumbel_tau: f64,
    pub kd_temperature: f64,
    /// Draw stochastic gates per example instead of per layer and step.
    pub per_example_gates: bool,
    pub label_smoothing: f64,
}

impl MethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        MethodConfig {
            kind,
            schedule: kind.default_schedule(),
            dfg_weight: 1.0,
            dfg_schedule: GateSchedule::dcr_aggr20(),
            gumbel_tau: 1.0,
            kd_temperature: 4.0,
            per_example_gates: false,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dfg_weight >= 0.0 && self.dfg_weight.is_finite()) {
            return Err(Error::Config(format!(
                "dfg_weight must be finite and >= 0, got {}",
                self.dfg_weight
            )));
        }
        if !(self.gumbel_tau > 0.0 && self.gumbel_tau.is_finite()) {
            return Err(Error::Config("gumbel_tau must be positive".into()));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return Err(Error::Config("kd_temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Schedule value at `t`: `alpha` for DCR, `p` for stochastic gates and
    /// 0 (no teacher) for the unscheduled methods.
    pub fn gate_value(&self, t: f64) -> Result<f64> {
        if self.kind.is_scheduled() {
            self.schedule.value(t)
        } else {
            GateSchedule::constant(0.0)?.value(t)
        }
    }

    /// `lambda(t) = lambda_0 * dfg_schedule(t)`, zero for non-DFG methods.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        let shape = self.dfg_schedule.value(t)?;
        Ok(if self.kind.uses_dfg() {
            self.dfg_weight * shape
        } else {
            0.0
        })
    }

    /// The mix used when evaluating at training fraction `t`: the
    /// deterministic blend for DCR and the expected gate `p(t)` as a blend
    /// for the stochastic methods.
    pub fn mean_field_mix(&self, t: f64) -> Result<Mix> {
        let v = self.gate_value(t)?;
        Ok(match self.kind.mechanism() {
            _ if !self.kind.is_scheduled() => Mix::StudentOnly,
            Mechanism::Deterministic => Mix::Blend { alpha: v },
            _ => Mix::Blend { alpha: 1.0 - v },
        })
    }
}

impl GateDraw {
    /// Weight of the student branch implied by this draw.
    pub fn student_coefficient(&self) -> f64 {
        match self.mechanism {
            Mechanism::Deterministic => 1.0 - self.value,
            _ => self.value,
        }
    }
}

/// The gate of one replaced layer at training fraction `t`. DCR returns the
/// shared schedule value; the stochastic methods draw from `rng`, so calling
/// this once per layer yields independent per-layer draws.
pub fn draw_gate<R: Rng + ?Sized>(method: &MethodConfig, t: f64, rng: &mut R) -> Result<GateDraw> {
    let v = method.gate_value(t)?;
    let value = match method.kind.mechanism() {
        Mechanism::Deterministic => v,
        Mechanism::Bernoulli => f64::from(u8::from(draw_bernoulli_gate(v, rng)?)),
        // the relaxation degenerates to the schedule value at p in {0, 1}
        Mechanism::Gumbel if v == 0.0 || v == 1.0 => v,
        Mechanism::Gumbel => draw_gumbel_gate(v, method.gumbel_tau, rng)?,
    };
    Ok(GateDraw {
        mechanism: method.kind.mechanism(),
        value,
        temperature: (method.kind.mechanism() == Mechanism::Gumbel).then_some(method.gumbel_tau),
    })
}

/// [`draw_gate`] at training fraction `step / total_steps`. The layer index
/// does not enter the draw: independence across layers comes from drawing
/// each layer from the stream in turn.
pub fn gate_for_step<R: Rng + ?Sized>(
    method: &MethodConfig,
    step: usize,
    total_steps: usize,
    _layer: usize,
    rng: &mut R,
) -> Result<GateDraw> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::param(format!(
            "step {step} outside 0..={total_steps} (total must be positive)"
        )));
    }
    draw_gate(method, step as f64 / total_steps as f64, rng)
}

fn mix_for(method: &MethodConfig, draw: &GateDraw) -> Mix {
    if !method.kind.is_scheduled() {
        return Mix::StudentOnly;
    }
    match draw.mechanism {
        Mechanism::Deterministic => Mix::Blend { alpha: draw.value },
        Mechanism::Bernoulli => Mix::Hard {
            student: draw.value == 1.0,
        },
        Mechanism::Gumbel => Mix::Soft { r: draw.value },
    }
}

/// Tensor copies of one site's [`BlockOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSnapshot {
    pub layer: usize,
    pub mix: Mix,
    pub residual_in: Tensor,
    pub normalized: Tensor,
    pub teacher_branch: Option<Tensor>,
    pub student_branch: Option<Tensor>,
    pub branch: Tensor,
    pub residual_out: Tensor,
}

impl SiteSnapshot {
    pub fn capture(g: &Graph, b: &BlockOutputs) -> Self {
        let take = |v: Var| g.value(v).detached();
        SiteSnapshot {
            layer: b.layer,
            mix: b.mix.clone(),
            residual_in: take(b.residual_in),
            normalized: take(b.normalized),
            teacher_branch: b.teacher_branch.map(take),
            student_branch: b.student_branch.map(take),
            branch: take(b.branch),
            residual_out: take(b.residual_out),
        }
    }
}

/// Teacher work done in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TeacherCost {
    /// Teacher attention branches evaluated at replaced sites.
    pub branch_evals: usize,
    /// Full forward passes of the frozen teacher network.
    pub full_passes: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub total_loss: f64,
    pub task_loss: f64,
    pub dfg_loss: f64,
    /// Soft-target term, already included in `task_loss`; 0 unless KD.
    pub kd_loss: f64,
    pub lambda: f64,
    pub logits: Tensor,
    pub sites: Vec<SiteSnapshot>,
    pub gates: BTreeMap<usize, GateDraw>,
    /// Student gradients per layer, in [`crate::model::AttentionParams::NAMES`] order.
    pub student_grads: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Sum of squared gradient entries over every backbone tensor.
    pub teacher_grad_sq: f64,
    pub teacher_cost: TeacherCost,
}

/// `sum over sites of ||S - T||^2`, summed over tokens and features and
/// averaged over the batch. The teacher branches carry no gradient.
pub fn dfg_loss(g: &mut Graph, sites: &[BlockOutputs]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for site in sites {
        let (Some(t), Some(s)) = (site.teacher_branch, site.student_branch) else {
            return Err(Error::State(format!(
                "DFG needs both branches at layer {}",
                site.layer
            )));
        };
        let numel = g.value(s).numel();
        let examples = site.examples;
        let mse = g.mse(s, t)?;
        let term = g.scale(mse, numel as f64 / examples as f64)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// Temperature-scaled KL divergence `T^2 * KL(softmax(t / T) || softmax(s / T))`,
/// averaged over the batch. Gradients flow into `student_logits` only.
pub fn kd_soft_target_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::param("KD temperature must be positive"));
    }
    if g.shape(student_logits) != teacher_logits.shape() || teacher_logits.shape().len() != 2 {
        return Err(Error::dim(format!(
            "KD: student logits {:?} vs teacher logits {:?}",
            g.shape(student_logits),
            teacher_logits.shape()
        )));
    }
    let (b, c) = teacher_logits.rows_cols();
    let mut targets = Vec::with_capacity(b * c);
    let mut entropy = 0.0;
    for row in teacher_logits.data().chunks_exact(c) {
        let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
        let lse = crate::autodiff::log_sum_exp(&scaled);
        for x in scaled {
            let logp = x - lse;
            let p = logp.exp();
            entropy -= p * logp;
            targets.push(p);
        }
    }
    entropy /= b as f64;
    let targets = Tensor::new(&[b, c], targets)?;
    let scaled = g.scale(student_logits, 1.0 / temperature)?;
    let ce = g.soft_cross_entropy(scaled, &targets)?;
    let h = g.constant(Tensor::scalar(entropy));
    let kl = g.sub(ce, h)?;
    g.scale(kl, temperature * temperature)
}

/// Forward, loss and backward for one batch. Gates come from `rng`, one
/// draw per replaced layer in increasing layer order (or one per example
/// and layer with `per_example_gates`).
pub fn training_step<R: Rng + ?Sized>(
    model: &Model,
    batch: &Batch,
    method: &MethodConfig,
    t_fraction: f64,
    rng: &mut R,
) -> Result<StepOutput> {
    method.validate()?;
    if batch.is_empty() {
        return Err(Error::param("training step on an empty batch"));
    }
    let spec = &model.spec;
    let mut draws = BTreeMap::new();
    let mut gates = Gates::new();
    for &layer in &spec.replaced {
        if method.per_example_gates && method.kind.mechanism() != Mechanism::Deterministic {
            let mut student = Vec::with_capacity(batch.len());
            let mut last = None;
            for _ in 0..batch.len() {
                let d = draw_gate(method, t_fraction, rng)?;
                student.push(d.student_coefficient());
                last = Some(d);
            }
            let mean = student.iter().sum::<f64>() / student.len() as f64;
            let d = last.expect("batch is nonempty");
            draws.insert(layer, GateDraw { value: mean, ..d });
            gates.insert(layer, Mix::PerExample { student });
        } else {
            let d = draw_gate(method, t_fraction, rng)?;
            gates.insert(layer, mix_for(method, &d));
            draws.insert(layer, d);
        }
    }
    let lambda = method.lambda(t_fraction)?;
    let diagnose = |e: Error| match e {
        Error::Numeric(msg) => Error::Numeric(format!(
            "{msg} (method {}, t = {t_fraction}, lambda = {lambda}, gates = {:?})",
            method.kind,
            draws.values().map(|d| d.value).collect::<Vec<_>>()
        )),
        other => other,
    };

    let mut teacher_cost = TeacherCost::default();
    let teacher_logits = if method.kind == MethodKind::Kd {
        teacher_cost.full_passes = 1;
        Some(teacher_logits(model, &batch.tokens)?)
    } else {
        None
    };

    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::Students);
    let opts = ForwardOptions {
        both_branches: method.kind.uses_dfg(),
    };
    let fwd = model_forward(&mut g, spec, &bound, &batch.tokens, &gates, opts).map_err(diagnose)?;
    teacher_cost.branch_evals = fwd.teacher_branch_evals;

    let ce = g
        .cross_entropy(fwd.logits, &batch.labels, method.label_smoothing)
        .map_err(diagnose)?;
    let (task, kd_loss) = match &teacher_logits {
        Some(t) => {
            let kd = kd_soft_target_loss(&mut g, fwd.logits, t, method.kd_temperature)
                .map_err(diagnose)?;
            let kd_value = g.value(kd).item();
            (g.add(ce, kd).map_err(diagnose)?, kd_value)
        }
        None => (ce, 0.0),
    };
    let (total, dfg) = if method.kind.uses_dfg() {
        let dfg = dfg_loss(&mut g, &fwd.sites).map_err(diagnose)?;
        let weighted = g.scale(dfg, lambda).map_err(diagnose)?;
        (g.add(task, weighted).map_err(diagnose)?, Some(dfg))
    } else {
        (task, None)
    };
    g.backward(total, &Tensor::scalar(1.0))?;

    let student_grads = bound
        .students
        .iter()
        .map(|(&layer, att)| {
            let grads = att
                .vars()
                .iter()
                .map(|&v| match g.grad(v) {
                    Some(gr) => gr.to_vec(),
                    None => vec![0.0; g.value(v).numel()],
                })
                .collect();
            (layer, grads)
        })
        .collect();
    let teacher_grad_sq = bound
        .backbone_vars()
        .iter()
        .filter_map(|&v| g.grad(v))
        .flat_map(|gr| gr.iter().map(|x| x * x))
        .sum();

    Ok(StepOutput {
        total_loss: g.value(total).item(),
        task_loss: g.value(task).item(),
        dfg_loss: dfg.map_or(0.0, |d| g.value(d).item()),
        kd_loss,
        lambda,
        logits: g.value(fwd.logits).detached(),
        sites: fwd
            .sites
            .iter()
            .map(|b| SiteSnapshot::capture(&g, b))
            .collect(),
        gates: draws,
        student_grads,
        teacher_grad_sq,
        teacher_cost,
    })
}

/// Logits of the frozen teacher network (every replaced site on its teacher).
pub fn teacher_logits(model: &Model, tokens: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::Nothing);
    let gates = uniform_gates(&model.spec, Mix::TeacherOnly);
    let out = model_forward(
        &mut g,
        &model.spec,
        &bound,
        tokens,
        &gates,
        ForwardOptions::default(),
    )?;
    Ok(g.value(out.logits).detached())
}
