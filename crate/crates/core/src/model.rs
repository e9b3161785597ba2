//! A small pre-norm residual transformer classifier whose attention
//! sub-modules can be paired with cold-start students.
//!
//! Tokens enter as one-hot `[token | position]` features, go through `depth`
//! blocks of `x + Attn(LN(x))` followed by `x + MLP(LN(x))`, a final layer
//! norm, mean pooling over the sequence and a linear head. Weights follow the
//! `y = x W` convention, so every weight matrix is `[fan_in, fan_out]`.
//!
//! At a replaced layer the attention branch is produced from the frozen
//! teacher (the backbone's own attention), the student, or a mix of both as
//! selected by a [`Mix`]; the MLP sub-block is never replaced.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
    /// Replaced layer indices, 1-based.
    pub replaced: BTreeSet<usize>,
    pub ln_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            depth: 4,
            width: 32,
            heads: 4,
            seq_len: 16,
            vocab: crate::data::SyntheticTask::default().vocab(),
            num_classes: 8,
            mlp_hidden: 64,
            replaced: (1..=4).collect(),
            ln_eps: 1e-5,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("vocab", self.vocab),
            ("num_classes", self.num_classes),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if let Some(bad) = self.replaced.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::Config(format!(
                "replaced layer {bad} outside 1..={}",
                self.depth
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.vocab + self.seq_len
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// i.i.d. normal entries with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_init(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::param("kaiming_init: fan_in must be at least 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = rng::stream(seed, &[rng::INIT]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    pub const NAMES: [&'static str; 5] = ["wq", "wk", "wv", "wo", "bo"];

    /// Cold-start weights; the output bias starts at zero.
    pub fn kaiming(width: usize, seed: u64) -> Self {
        let w =
            |i: u64| kaiming_init(&[width, width], width, rng::derive_seed(seed, &[i])).unwrap();
        AttentionParams {
            wq: w(0),
            wk: w(1),
            wv: w(2),
            wo: w(3),
            bo: Tensor::zeros(&[width]),
        }
    }

    pub fn zeros(width: usize) -> Self {
        AttentionParams {
            wq: Tensor::zeros(&[width, width]),
            wk: Tensor::zeros(&[width, width]),
            wv: Tensor::zeros(&[width, width]),
            wo: Tensor::zeros(&[width, width]),
            bo: Tensor::zeros(&[width]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.bo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Inserts the five tensors into `g` as leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAttention {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundAttention {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
            bo: leaf(&self.bo),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp: MlpParams,
}

/// The pretrained network. At replaced layers its attention is the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl Backbone {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (d, hid) = (spec.width, spec.mlp_hidden);
        let s = |path: &[u64]| rng::derive_seed(seed, path);
        let blocks = (0..spec.depth as u64)
            .map(|l| -> Result<BlockParams> {
                Ok(BlockParams {
                    ln1_gamma: Tensor::full(&[d], 1.0),
                    ln1_beta: Tensor::zeros(&[d]),
                    attn: AttentionParams::kaiming(d, s(&[l, 0])),
                    ln2_gamma: Tensor::full(&[d], 1.0),
                    ln2_beta: Tensor::zeros(&[d]),
                    mlp: MlpParams {
                        w1: kaiming_init(&[d, hid], d, s(&[l, 1]))?,
                        b1: Tensor::zeros(&[hid]),
                        w2: kaiming_init(&[hid, d], hid, s(&[l, 2]))?,
                        b2: Tensor::zeros(&[d]),
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Backbone {
            embed: kaiming_init(&[spec.input_dim(), d], spec.input_dim(), s(&[100]))?,
            blocks,
            final_gamma: Tensor::full(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
            head_w: kaiming_init(&[d, spec.num_classes], d, s(&[101]))?,
            head_b: Tensor::zeros(&[spec.num_classes]),
        })
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", i + 1);
            out.push((format!("{p}.ln1.gamma"), &b.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &b.ln1_beta));
            for (n, t) in AttentionParams::NAMES.iter().zip(b.attn.tensors()) {
                out.push((format!("{p}.attn.{n}"), t));
            }
            out.push((format!("{p}.ln2.gamma"), &b.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &b.ln2_beta));
            out.push((format!("{p}.mlp.w1"), &b.mlp.w1));
            out.push((format!("{p}.mlp.b1"), &b.mlp.b1));
            out.push((format!("{p}.mlp.w2"), &b.mlp.w2));
            out.push((format!("{p}.mlp.b2"), &b.mlp.b2));
        }
        out.push(("final_ln.gamma".into(), &self.final_gamma));
        out.push(("final_ln.beta".into(), &self.final_beta));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.extend(b.attn.tensors_mut());
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.mlp.w1);
            out.push(&mut b.mlp.b1);
            out.push(&mut b.mlp.w2);
            out.push(&mut b.mlp.b2);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// A replaced attention site: the teacher is `backbone.blocks[layer - 1].attn`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacedSite {
    pub layer: usize,
    pub student: AttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub sites: Vec<ReplacedSite>,
}

impl Model {
    /// Pairs every layer in `spec.replaced` with a Kaiming-initialized student.
    pub fn with_students(spec: ModelSpec, backbone: Backbone, seed: u64) -> Result<Self> {
        spec.validate()?;
        if backbone.blocks.len() != spec.depth {
            return Err(Error::Config(format!(
                "backbone has {} blocks but spec depth is {}",
                backbone.blocks.len(),
                spec.depth
            )));
        }
        let sites = spec
            .replaced
            .iter()
            .map(|&layer| ReplacedSite {
                layer,
                student: AttentionParams::kaiming(
                    spec.width,
                    rng::derive_seed(seed, &[layer as u64]),
                ),
            })
            .collect();
        Ok(Model {
            spec,
            backbone,
            sites,
        })
    }

    pub fn teacher(&self, layer: usize) -> &AttentionParams {
        &self.backbone.blocks[layer - 1].attn
    }

    pub fn site(&self, layer: usize) -> Option<&ReplacedSite> {
        self.sites.iter().find(|s| s.layer == layer)
    }

    pub fn student_param_count(&self) -> usize {
        self.sites.iter().map(|s| s.student.num_params()).sum()
    }

    /// Inserts all parameters into `g` as leaves. Only the tensors selected
    /// by `trainable` require grad.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundModel {
        let bb = trainable == Trainable::Backbone;
        let leaf = |g: &mut Graph, t: &Tensor| {
            if bb {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let b = &self.backbone;
        let embed = leaf(g, &b.embed);
        let blocks = b
            .blocks
            .iter()
            .map(|blk| BoundBlock {
                ln1_gamma: leaf(g, &blk.ln1_gamma),
                ln1_beta: leaf(g, &blk.ln1_beta),
                attn: blk.attn.bind(g, bb),
                ln2_gamma: leaf(g, &blk.ln2_gamma),
                ln2_beta: leaf(g, &blk.ln2_beta),
                w1: leaf(g, &blk.mlp.w1),
                b1: leaf(g, &blk.mlp.b1),
                w2: leaf(g, &blk.mlp.w2),
                b2: leaf(g, &blk.mlp.b2),
            })
            .collect();
        let final_gamma = leaf(g, &b.final_gamma);
        let final_beta = leaf(g, &b.final_beta);
        let head_w = leaf(g, &b.head_w);
        let head_b = leaf(g, &b.head_b);
        let students = self
            .sites
            .iter()
            .map(|s| (s.layer, s.student.bind(g, trainable == Trainable::Students)))
            .collect();
        BoundModel {
            embed,
            blocks,
            final_gamma,
            final_beta,
            head_w,
            head_b,
            students,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Students,
    Backbone,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl BoundAttention {
    pub fn vars(&self) -> [Var; 5] {
        [self.wq, self.wk, self.wv, self.wo, self.bo]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: BoundAttention,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundBlock {
    fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.ln1_gamma, self.ln1_beta];
        v.extend(self.attn.vars());
        v.extend([
            self.ln2_gamma,
            self.ln2_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]);
        v
    }
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gamma: Var,
    pub final_beta: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub students: BTreeMap<usize, BoundAttention>,
}

impl BoundModel {
    /// Backbone vars in the same order as [`Backbone::tensors_mut`].
    pub fn backbone_vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.extend([self.final_gamma, self.final_beta, self.head_w, self.head_b]);
        v
    }
}

/// How a replaced layer combines its teacher and student branches.
#[derive(Clone, Debug, PartialEq)]
pub enum Mix {
    TeacherOnly,
    StudentOnly,
    /// Deterministic blend `alpha * teacher + (1 - alpha) * student`.
    Blend {
        alpha: f64,
    },
    /// Hard gate: the student branch when `true`, else the teacher branch.
    Hard {
        student: bool,
    },
    /// Soft gate `r * student + (1 - r) * teacher`.
    Soft {
        r: f64,
    },
    /// A separate student coefficient for every example of the batch.
    PerExample {
        student: Vec<f64>,
    },
}

impl Mix {
    /// Weight of the student branch in the residual update; the batch mean
    /// for per-example mixes.
    pub fn student_coefficient(&self) -> f64 {
        match self {
            Mix::TeacherOnly => 0.0,
            Mix::StudentOnly => 1.0,
            Mix::Blend { alpha } => 1.0 - alpha,
            Mix::Hard { student } => f64::from(u8::from(*student)),
            Mix::Soft { r } => *r,
            Mix::PerExample { student } => {
                student.iter().sum::<f64>() / student.len().max(1) as f64
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let values: &[f64] = match self {
            Mix::Blend { alpha } => std::slice::from_ref(alpha),
            Mix::Soft { r } => std::slice::from_ref(r),
            Mix::PerExample { student } => student,
            _ => return Ok(()),
        };
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("gate value {v} outside [0, 1]")));
        }
        Ok(())
    }

    fn needs_teacher(&self) -> bool {
        match self {
            Mix::TeacherOnly | Mix::Soft { .. } => true,
            Mix::StudentOnly => false,
            Mix::Blend { alpha } => *alpha != 0.0,
            Mix::Hard { student } => !student,
            Mix::PerExample { student } => student.iter().any(|&c| c != 1.0),
        }
    }

    fn needs_student(&self) -> bool {
        match self {
            Mix::TeacherOnly => false,
            Mix::Hard { student } => *student,
            Mix::PerExample { student } => student.iter().any(|&c| c != 0.0),
            _ => true,
        }
    }
}

/// Per-layer mixes for the replaced layers.
pub type Gates = BTreeMap<usize, Mix>;

pub fn uniform_gates(spec: &ModelSpec, mix: Mix) -> Gates {
    spec.replaced.iter().map(|&l| (l, mix.clone())).collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Evaluate both branches at every replaced site even when the mix
    /// does not need one of them (DFG, interface metrics).
    pub both_branches: bool,
}

/// Activations recorded at one replaced site.
#[derive(Clone, Debug)]
pub struct BlockOutputs {
    pub layer: usize,
    /// Sequences in the batch.
    pub examples: usize,
    pub mix: Mix,
    pub residual_in: Var,
    pub normalized: Var,
    pub teacher_branch: Option<Var>,
    pub student_branch: Option<Var>,
    /// The (possibly blended) attention output added to the residual.
    pub branch: Var,
    /// `residual_in + branch`, before the MLP sub-block.
    pub residual_out: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub sites: Vec<BlockOutputs>,
    /// Teacher attention branches evaluated at replaced sites.
    pub teacher_branch_evals: usize,
}

/// Multi-head self-attention on `h[batch * seq, width]`.
pub fn attention_forward(
    g: &mut Graph,
    h: Var,
    p: &BoundAttention,
    heads: usize,
    seq: usize,
) -> Result<Var> {
    let (rows, d) = match g.shape(h) {
        [r, d] => (*r, *d),
        s => {
            return Err(Error::dim(format!(
                "attention input must be 2-D, got {s:?}"
            )))
        }
    };
    if g.shape(p.wq) != [d, d] || rows % seq != 0 || d % heads != 0 {
        return Err(Error::dim(format!(
            "attention: input {:?} incompatible with weights {:?}, seq {seq}, heads {heads}",
            g.shape(h),
            g.shape(p.wq)
        )));
    }
    let batch = rows / seq;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out: Option<Var> = None;
    for hd in 0..heads {
        let project = |g: &mut Graph, w: Var| -> Result<Var> {
            let w = g.narrow(w, 1, hd * dh, dh)?;
            let y = g.matmul(h, w)?;
            g.reshape(y, &[batch, seq, dh])
        };
        let q = project(g, p.wq)?;
        let k = project(g, p.wk)?;
        let v = project(g, p.wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores)?;
        let mixed = g.matmul(attn, v)?;
        let mixed = g.reshape(mixed, &[rows, dh])?;
        let wo = g.narrow(p.wo, 0, hd * dh, dh)?;
        let contrib = g.matmul(mixed, wo)?;
        out = Some(match out {
            None => contrib,
            Some(acc) => g.add(acc, contrib)?,
        });
    }
    g.add_row(out.expect("heads >= 1"), p.bo)
}

fn mlp_forward(g: &mut Graph, x: Var, b: &BoundBlock, eps: f64) -> Result<Var> {
    let h = g.layer_norm(x, b.ln2_gamma, b.ln2_beta, eps)?;
    let u = g.matmul(h, b.w1)?;
    let u = g.add_row(u, b.b1)?;
    let u = g.gelu(u)?;
    let u = g.matmul(u, b.w2)?;
    let u = g.add_row(u, b.b2)?;
    g.add(x, u)
}

/// One pre-norm block. `site` carries the student and the mix when the
/// layer is replaced; the teacher branch is always computed from a detached
/// copy of the normalized input, so no gradient flows through it.
pub fn block_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    layer: usize,
    x: Var,
    block: &BoundBlock,
    site: Option<(&BoundAttention, Mix)>,
    opts: ForwardOptions,
) -> Result<(Var, Option<BlockOutputs>)> {
    let h = g.layer_norm(x, block.ln1_gamma, block.ln1_beta, spec.ln_eps)?;
    let Some((student, mix)) = site else {
        let branch = attention_forward(g, h, &block.attn, spec.heads, spec.seq_len)?;
        let mid = g.add(x, branch)?;
        return Ok((mlp_forward(g, mid, block, spec.ln_eps)?, None));
    };
    mix.validate()?;
    let teacher_branch = if mix.needs_teacher() || opts.both_branches {
        let hd = g.detach(h);
        Some(attention_forward(
            g,
            hd,
            &block.attn,
            spec.heads,
            spec.seq_len,
        )?)
    } else {
        None
    };
    let student_branch = if mix.needs_student() || opts.both_branches {
        Some(attention_forward(g, h, student, spec.heads, spec.seq_len)?)
    } else {
        None
    };
    let (t, s) = (teacher_branch, student_branch);
    let branch = match &mix {
        Mix::TeacherOnly | Mix::Hard { student: false } => t.unwrap(),
        Mix::StudentOnly | Mix::Hard { student: true } => s.unwrap(),
        Mix::Blend { alpha } => match t {
            Some(t) => {
                let alpha = *alpha;
                let tw = g.scale(t, alpha)?;
                let sw = g.scale(s.unwrap(), 1.0 - alpha)?;
                g.add(tw, sw)?
            }
            // alpha == 0: the teacher term vanishes
            None => s.unwrap(),
        },
        Mix::Soft { r } => {
            let sw = g.scale(s.unwrap(), *r)?;
            let tw = g.scale(t.unwrap(), 1.0 - r)?;
            g.add(sw, tw)?
        }
        Mix::PerExample { student } => {
            let rows = g.shape(h)[0];
            if student.len() * spec.seq_len != rows {
                return Err(Error::dim(format!(
                    "{} per-example gates for {} sequences",
                    student.len(),
                    rows / spec.seq_len
                )));
            }
            let cs: Vec<f64> = student
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, spec.seq_len))
                .collect();
            let ct: Vec<f64> = cs.iter().map(|c| 1.0 - c).collect();
            // either branch may be absent when every example picked the other
            match (t, s) {
                (Some(t), Some(s)) => {
                    let sw = g.scale_rows(s, &cs)?;
                    let tw = g.scale_rows(t, &ct)?;
                    g.add(sw, tw)?
                }
                (None, Some(s)) => s,
                (Some(t), None) => t,
                (None, None) => unreachable!("a mix needs at least one branch"),
            }
        }
    };
    let mid = g.add(x, branch)?;
    let out = mlp_forward(g, mid, block, spec.ln_eps)?;
    Ok((
        out,
        Some(BlockOutputs {
            layer,
            examples: g.shape(x)[0] / spec.seq_len,
            mix,
            residual_in: x,
            normalized: h,
            teacher_branch,
            student_branch,
            branch,
            residual_out: mid,
        }),
    ))
}

/// One-hot `[token | position]` features for a flat token buffer.
pub fn input_features(spec: &ModelSpec, tokens: &[usize]) -> Result<Tensor> {
    if tokens.is_empty() || tokens.len() % spec.seq_len != 0 {
        return Err(Error::dim(format!(
            "{} tokens do not form whole sequences of length {}",
            tokens.len(),
            spec.seq_len
        )));
    }
    let dim = spec.input_dim();
    let mut data = vec![0.0; tokens.len() * dim];
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= spec.vocab {
            return Err(Error::dim(format!(
                "token {tok} outside vocabulary {}",
                spec.vocab
            )));
        }
        data[i * dim + tok] = 1.0;
        data[i * dim + spec.vocab + i % spec.seq_len] = 1.0;
    }
    Tensor::new(&[tokens.len(), dim], data)
}

/// Full forward pass. `gates` must hold a mix for every replaced layer.
pub fn model_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    bound: &BoundModel,
    tokens: &[usize],
    gates: &Gates,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    for layer in bound.students.keys() {
        if !gates.contains_key(layer) {
            return Err(Error::Config(format!(
                "no gate supplied for replaced layer {layer}"
            )));
        }
    }
    let feats = g.constant(input_features(spec, tokens)?);
    let mut x = g.matmul(feats, bound.embed)?;
    let mut sites = Vec::new();
    let mut teacher_branch_evals = 0;
    for (i, block) in bound.blocks.iter().enumerate() {
        let layer = i + 1;
        let site = bound
            .students
            .get(&layer)
            .map(|s| (s, gates[&layer].clone()));
        let (out, rec) = block_forward(g, spec, layer, x, block, site, opts)?;
        if let Some(rec) = rec {
            teacher_branch_evals += usize::from(rec.teacher_branch.is_some());
            sites.push(rec);
        }
        x = out;
    }
    let logits = head_forward(g, spec, bound, x)?;
    Ok(ForwardOutput {
        logits,
        sites,
        teacher_branch_evals,
    })
}

/// Runs blocks `from..=depth` starting from the residual stream entering
/// block `from`, with the attention branch of block `from` replaced by
/// `branch`. This is the frozen tail seen by one site.
pub fn tail_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    bound: &BoundModel,
    from: usize,
    residual_in: Var,
    branch: Var,
    gates: &Gates,
) -> Result<Var> {
    let mid = g.add(residual_in, branch)?;
    let mut x = mlp_forward(g, mid, &bound.blocks[from - 1], spec.ln_eps)?;
    for layer in from + 1..=spec.depth {
        let site = match bound.students.get(&layer) {
            Some(s) => Some((
                s,
                gates.get(&layer).cloned().ok_or_else(|| {
                    Error::Config(format!("no gate supplied for replaced layer {layer}"))
                })?,
            )),
            None => None,
        };
        let block = &bound.blocks[layer - 1];
        x = block_forward(g, spec, layer, x, block, site, ForwardOptions::default())?.0;
    }
    head_forward(g, spec, bound, x)
}

fn head_forward(g: &mut Graph, spec: &ModelSpec, bound: &BoundModel, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let x = g.layer_norm(x, bound.final_gamma, bound.final_beta, spec.ln_eps)?;
    let x = g.reshape(x, &[rows / spec.seq_len, spec.seq_len, spec.width])?;
    let pooled = g.mean_axis(x, 1)?;
    let logits = g.matmul(pooled, bound.head_w)?;
    g.add_row(logits, bound.head_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            depth: 2,
            width: 8,
            heads: 2,
            seq_len: 3,
            vocab: 5,
            num_classes: 3,
            mlp_hidden: 8,
            replaced: [2].into_iter().collect(),
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::default().validate().is_ok());
        let mut s = tiny_spec();
        s.heads = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = tiny_spec();
        s.replaced.insert(3);
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.replaced.insert(0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn kaiming_determinism_and_errors() {
        let a = kaiming_init(&[4, 4], 4, 9).unwrap();
        assert_eq!(a, kaiming_init(&[4, 4], 4, 9).unwrap());
        assert_ne!(a, kaiming_init(&[4, 4], 4, 10).unwrap());
        assert!(matches!(
            kaiming_init(&[4, 4], 0, 9),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn kaiming_std_matches_fan_in() {
        // 10^4 draws; the sample std has standard error sigma / sqrt(2n).
        let sigma = 0.5f64.sqrt();
        let t = kaiming_init(&[100, 100], 4, 3).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(
            (std - sigma).abs() < 3.0 * sigma / (2.0 * n).sqrt(),
            "{std}"
        );
        let wide = kaiming_init(&[100, 100], 400, 3).unwrap();
        assert!(wide.sq_norm() < t.sq_norm());
    }

    #[test]
    fn zero_attention_gives_zero_output() {
        let spec = tiny_spec();
        let mut g = Graph::new();
        let p = AttentionParams::zeros(8).bind(&mut g, false);
        let h = g.constant(kaiming_init(&[6, 8], 8, 1).unwrap());
        let y = attention_forward(&mut g, h, &p, 2, spec.seq_len).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut g = Graph::new();
        let params = AttentionParams::kaiming(8, 4);
        let p = params.bind(&mut g, false);
        let hv = kaiming_init(&[1, 8], 8, 2).unwrap();
        let h = g.constant(hv.clone());
        let y = attention_forward(&mut g, h, &p, 2, 1).unwrap();
        // out = (h Wv) Wo + bo
        let hw = g.matmul(h, p.wv).unwrap();
        let want = g.matmul(hw, p.wo).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_outside_unit_interval_is_rejected() {
        let spec = tiny_spec();
        let backbone = Backbone::init(&spec, 1).unwrap();
        let model = Model::with_students(spec.clone(), backbone, 2).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, Trainable::Students);
        let gates = uniform_gates(&spec, Mix::Blend { alpha: 1.5 });
        let err = model_forward(
            &mut g,
            &spec,
            &bound,
            &[0, 1, 2],
            &gates,
            Default::default(),
        );
        assert!(matches!(err, Err(Error::Parameter(_))));
        let err = model_forward(
            &mut g,
            &spec,
            &bound,
            &[0, 1, 2],
            &Gates::new(),
            Default::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn input_features_reject_bad_tokens() {
        let spec = tiny_spec();
        assert!(input_features(&spec, &[0, 1]).is_err());
        assert!(input_features(&spec, &[0, 1, 5]).is_err());
        let f = input_features(&spec, &[4, 0, 1]).unwrap();
        assert_eq!(f.shape(), &[3, 8]);
        assert_eq!(f.data()[4], 1.0);
        assert_eq!(f.data()[5], 1.0);
    }
}
