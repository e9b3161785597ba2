//! Gradient checks shared by the autodiff tests and the acceptance report.
//! Each group returns the worst relative error per case over ten seeds.
#![allow(dead_code)]

use dcr_core::autodiff::{finite_diff_check, Graph, Var};
use dcr_core::error::Result;
use dcr_core::model::{
    model_forward, uniform_gates, Backbone, BoundModel, ForwardOptions, Mix, Model, ModelSpec,
    Trainable,
};
use dcr_core::rng::stream;
use dcr_core::tensor::Tensor;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
const SEEDS: u64 = 10;

pub fn uniform(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = stream(seed, &[salt]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// `sum(w * y)` with fixed random weights, so every output coordinate
/// contributes with a generic coefficient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).numel();
    let w = g.constant(uniform(&[n, 1], seed, 99));
    let row = g.reshape(y, &[1, n])?;
    let m = g.matmul(row, w)?;
    g.sum(m)
}

/// Runs `op` through [`finite_diff_check`] at ten seeded points of `shape`.
fn check<F>(out: &mut Vec<(String, f64)>, name: &str, shape: &[usize], op: F)
where
    F: Fn(&mut Graph, Var, u64) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let x = uniform(shape, seed, 1);
        let err = finite_diff_check(
            |g, x| {
                let y = op(g, x, seed)?;
                probe(g, y, seed)
            },
            &x,
            H,
        )
        .unwrap();
        worst = worst.max(err);
    }
    out.push((name.to_string(), worst));
}

fn other(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
    g.constant(uniform(shape, seed, 2))
}

pub fn elementwise_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(&mut out, "add lhs", &[3, 4], |g, x, s| {
        let b = other(g, &[3, 4], s);
        g.add(x, b)
    });
    check(&mut out, "add rhs", &[3, 4], |g, x, s| {
        let a = other(g, &[3, 4], s);
        g.add(a, x)
    });
    check(&mut out, "sub lhs", &[3, 4], |g, x, s| {
        let b = other(g, &[3, 4], s);
        g.sub(x, b)
    });
    check(&mut out, "sub rhs", &[3, 4], |g, x, s| {
        let a = other(g, &[3, 4], s);
        g.sub(a, x)
    });
    check(&mut out, "scale", &[2, 5], |g, x, _| g.scale(x, -1.7));
    check(&mut out, "scale_rows", &[3, 4], |g, x, _| {
        g.scale_rows(x, &[0.3, -1.2, 2.0])
    });
    check(&mut out, "gelu", &[4, 5], |g, x, _| g.gelu(x));
    out
}

pub fn add_row_both_arguments() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(&mut out, "add_row x", &[5, 3], |g, x, s| {
        let b = other(g, &[3], s);
        g.add_row(x, b)
    });
    check(&mut out, "add_row bias", &[3], |g, x, s| {
        let a = other(g, &[5, 3], s);
        g.add_row(a, x)
    });
    out
}

pub fn matmul_and_transpose() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(&mut out, "matmul lhs", &[3, 4], |g, x, s| {
        let b = other(g, &[4, 2], s);
        g.matmul(x, b)
    });
    check(&mut out, "matmul rhs", &[4, 2], |g, x, s| {
        let a = other(g, &[3, 4], s);
        g.matmul(a, x)
    });
    check(&mut out, "batched matmul lhs", &[2, 3, 4], |g, x, s| {
        let b = other(g, &[2, 4, 3], s);
        g.matmul(x, b)
    });
    check(&mut out, "batched matmul rhs", &[2, 4, 3], |g, x, s| {
        let a = other(g, &[2, 3, 4], s);
        g.matmul(a, x)
    });
    check(&mut out, "transpose", &[3, 5], |g, x, _| g.transpose(x));
    check(&mut out, "batched transpose", &[2, 3, 4], |g, x, _| {
        g.transpose(x)
    });
    check(&mut out, "x x^T", &[3, 4], |g, x, _| {
        let t = g.transpose(x)?;
        g.matmul(x, t)
    });
    out
}

pub fn shape_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(&mut out, "reshape", &[2, 6], |g, x, _| {
        g.reshape(x, &[3, 4])
    });
    check(&mut out, "narrow rows", &[5, 3], |g, x, _| {
        g.narrow(x, 0, 1, 3)
    });
    check(&mut out, "narrow columns", &[3, 6], |g, x, _| {
        g.narrow(x, 1, 2, 3)
    });
    check(&mut out, "mean_axis middle", &[2, 3, 4], |g, x, _| {
        g.mean_axis(x, 1)
    });
    check(&mut out, "mean_axis first", &[3, 4], |g, x, _| {
        g.mean_axis(x, 0)
    });
    check(&mut out, "mean_axis last", &[3, 4], |g, x, _| {
        g.mean_axis(x, 1)
    });
    out
}

pub fn normalization_and_softmax() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(&mut out, "layer_norm x", &[4, 6], |g, x, s| {
        let gamma = other(g, &[6], s);
        let beta = g.constant(uniform(&[6], s, 3));
        g.layer_norm(x, gamma, beta, 1e-5)
    });
    check(&mut out, "layer_norm gamma", &[6], |g, x, s| {
        let input = other(g, &[4, 6], s);
        let beta = g.constant(uniform(&[6], s, 3));
        g.layer_norm(input, x, beta, 1e-5)
    });
    check(&mut out, "layer_norm beta", &[6], |g, x, s| {
        let input = other(g, &[4, 6], s);
        let gamma = g.constant(uniform(&[6], s, 3));
        g.layer_norm(input, gamma, x, 1e-5)
    });
    check(&mut out, "softmax_rows", &[3, 5], |g, x, _| {
        g.softmax_rows(x)
    });
    check(&mut out, "batched softmax_rows", &[2, 3, 4], |g, x, _| {
        g.softmax_rows(x)
    });
    out
}

pub fn reductions_and_losses() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(&mut out, "sum", &[3, 4], |g, x, _| g.sum(x));
    check(&mut out, "mean", &[3, 4], |g, x, _| g.mean(x));
    check(&mut out, "mse lhs", &[3, 4], |g, x, s| {
        let b = other(g, &[3, 4], s);
        g.mse(x, b)
    });
    check(&mut out, "mse rhs", &[3, 4], |g, x, s| {
        let a = other(g, &[3, 4], s);
        g.mse(a, x)
    });
    check(&mut out, "soft_cross_entropy", &[4, 5], |g, x, s| {
        let mut t = uniform(&[4, 5], s, 4);
        for row in t.data_mut().chunks_exact_mut(5) {
            for v in row.iter_mut() {
                *v = v.exp();
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        g.soft_cross_entropy(x, &t)
    });
    check(&mut out, "cross_entropy", &[4, 5], |g, x, s| {
        let mut rng = stream(s, &[5]);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        g.cross_entropy(x, &labels, 0.1)
    });
    check(
        &mut out,
        "cross_entropy without smoothing",
        &[4, 5],
        |g, x, _| g.cross_entropy(x, &[0, 4, 2, 2], 0.0),
    );
    out
}

pub fn composed_micro_graph() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    check(
        &mut out,
        "layer_norm -> matmul -> softmax -> cross_entropy",
        &[4, 6],
        |g, x, s| {
            let gamma = g.constant(Tensor::full(&[6], 1.0));
            let beta = g.constant(Tensor::zeros(&[6]));
            let h = g.layer_norm(x, gamma, beta, 1e-5)?;
            let w = other(g, &[6, 3], s);
            let z = g.matmul(h, w)?;
            let p = g.softmax_rows(z)?;
            g.cross_entropy(p, &[0, 1, 2, 1], 0.1)
        },
    );
    out
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        depth: 2,
        width: 8,
        heads: 2,
        seq_len: 5,
        vocab: 6,
        num_classes: 3,
        mlp_hidden: 8,
        replaced: [1, 2].into_iter().collect(),
        ln_eps: 1e-5,
    }
}

type Place = fn(&mut BoundModel, Var);

/// Cross-entropy of the model under `mix`, with one parameter tensor
/// swapped for the variable under test.
fn model_loss(
    model: &Model,
    mix: &Mix,
    g: &mut Graph,
    x: Var,
    place: Place,
    seed: u64,
) -> Result<Var> {
    let spec = &model.spec;
    let mut bound = model.bind(g, Trainable::Nothing);
    place(&mut bound, x);
    let mut rng = stream(seed, &[6]);
    let tokens: Vec<usize> = (0..3 * spec.seq_len)
        .map(|_| rng.random_range(0..spec.vocab))
        .collect();
    let labels: Vec<usize> = (0..3)
        .map(|_| rng.random_range(0..spec.num_classes))
        .collect();
    let gates = uniform_gates(spec, mix.clone());
    let out = model_forward(g, spec, &bound, &tokens, &gates, ForwardOptions::default())?;
    g.cross_entropy(out.logits, &labels, 0.1)
}

const DIRECTIONS: usize = 6;

/// Checks the loss gradient along random directions `v_i` in parameter
/// space: the variable is `c` in `theta0 + sum_i c_i v_i`, evaluated at
/// `c = 0`. A single coordinate of a model gradient can be arbitrarily
/// small, where a relative error only measures rounding.
fn check_model(
    out: &mut Vec<(String, f64)>,
    name: &str,
    spec: &ModelSpec,
    mix: Mix,
    place: Place,
    get: fn(&Model) -> Tensor,
) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let backbone = Backbone::init(spec, seed).unwrap();
        let model = Model::with_students(spec.clone(), backbone, seed + 100).unwrap();
        let theta0 = get(&model).detached();
        let n = theta0.numel();
        let directions = uniform(&[DIRECTIONS, n], seed, 7);
        let c0 = Tensor::zeros(&[DIRECTIONS]);
        let err = finite_diff_check(
            |g, c| {
                let row = g.reshape(c, &[1, DIRECTIONS])?;
                let v = g.constant(directions.clone());
                let step = g.matmul(row, v)?;
                let step = g.reshape(step, theta0.shape())?;
                let base = g.constant(theta0.clone());
                let theta = g.add(base, step)?;
                model_loss(&model, &mix, g, theta, place, seed)
            },
            &c0,
            H,
        )
        .unwrap();
        worst = worst.max(err);
    }
    out.push((name.to_string(), worst));
}

// The teacher branch is evaluated without gradient, so the reverse-mode
// gradient is the loss gradient with teacher outputs held fixed. The
// checks below use configurations in which no teacher branch depends on
// the variable, where the two coincide.
pub fn full_model_loss() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let spec = small_spec();
    check_model(
        &mut out,
        "first student wq, student mix",
        &spec,
        Mix::StudentOnly,
        |b, x| b.students.get_mut(&1).unwrap().wq = x,
        |m| m.site(1).unwrap().student.wq.clone(),
    );
    check_model(
        &mut out,
        "embedding, student mix",
        &spec,
        Mix::StudentOnly,
        |b, x| b.embed = x,
        |m| m.backbone.embed.clone(),
    );
    check_model(
        &mut out,
        "first layer norm gain, student mix",
        &spec,
        Mix::StudentOnly,
        |b, x| b.blocks[0].ln1_gamma = x,
        |m| m.backbone.blocks[0].ln1_gamma.clone(),
    );
    check_model(
        &mut out,
        "last student wq, blend",
        &spec,
        Mix::Blend { alpha: 0.3 },
        |b, x| b.students.get_mut(&2).unwrap().wq = x,
        |m| m.site(2).unwrap().student.wq.clone(),
    );
    check_model(
        &mut out,
        "last student wo, blend",
        &spec,
        Mix::Blend { alpha: 0.3 },
        |b, x| b.students.get_mut(&2).unwrap().wo = x,
        |m| m.site(2).unwrap().student.wo.clone(),
    );
    let plain = ModelSpec {
        replaced: Default::default(),
        ..small_spec()
    };
    check_model(
        &mut out,
        "teacher embedding",
        &plain,
        Mix::TeacherOnly,
        |b, x| b.embed = x,
        |m| m.backbone.embed.clone(),
    );
    check_model(
        &mut out,
        "teacher first-block wk",
        &plain,
        Mix::TeacherOnly,
        |b, x| b.blocks[0].attn.wk = x,
        |m| m.backbone.blocks[0].attn.wk.clone(),
    );
    check_model(
        &mut out,
        "teacher head",
        &plain,
        Mix::TeacherOnly,
        |b, x| b.head_w = x,
        |m| m.backbone.head_w.clone(),
    );
    out
}

/// Every op group followed by the full-model checks.
pub fn all() -> Vec<(String, f64)> {
    [
        elementwise_ops(),
        add_row_both_arguments(),
        matmul_and_transpose(),
        shape_ops(),
        normalization_and_softmax(),
        reductions_and_losses(),
        composed_micro_graph(),
        full_model_loss(),
    ]
    .concat()
}
