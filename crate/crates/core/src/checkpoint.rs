//! Textual checkpoints.
//!
//! ```text
//! dcr-checkpoint 1
//! spec depth=4 width=32 heads=4 seq_len=16 vocab=23 num_classes=8 mlp_hidden=64 ln_eps=1e-5 replaced=1,2,3,4
//! tensor embed 39 32
//! <39 lines of 32 space-separated values>
//! tensor block1.ln1.gamma 32
//! <1 line of 32 values>
//! ...
//! tensor student1.wq 32 32
//! ...
//! end
//! ```
//!
//! Tensors appear in a fixed order: the backbone (see
//! [`Backbone::named_tensors`]) followed by `student<l>.<wq|wk|wv|wo|bo>`
//! for every replaced layer `l`. A tensor header lists its dimensions;
//! its values follow one matrix row per line (a single line for vectors),
//! written in the shortest form that parses back to the identical `f64`.
//! `replaced=-` marks a network without replaced layers, such as a teacher.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AttentionParams, Backbone, Model, ModelSpec, ReplacedSite};
use crate::tensor::Tensor;

const MAGIC: &str = "dcr-checkpoint 1";

fn spec_line(spec: &ModelSpec) -> String {
    let replaced = if spec.replaced.is_empty() {
        "-".to_string()
    } else {
        spec.replaced
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "spec depth={} width={} heads={} seq_len={} vocab={} num_classes={} mlp_hidden={} ln_eps={:e} replaced={}",
        spec.depth,
        spec.width,
        spec.heads,
        spec.seq_len,
        spec.vocab,
        spec.num_classes,
        spec.mlp_hidden,
        spec.ln_eps,
        replaced
    )
}

fn push_tensor(out: &mut String, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
    let cols = *t.shape().last().expect("tensors have at least one axis");
    for row in t.data().chunks(cols) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
}

pub fn to_text(model: &Model) -> String {
    let mut out = format!("{MAGIC}\n{}\n", spec_line(&model.spec));
    for (name, t) in model.backbone.named_tensors() {
        push_tensor(&mut out, &name, t);
    }
    for site in &model.sites {
        for (n, t) in AttentionParams::NAMES.iter().zip(site.student.tensors()) {
            push_tensor(&mut out, &format!("student{}.{n}", site.layer), t);
        }
    }
    out.push_str("end\n");
    out
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, to_text(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_text(&std::fs::read_to_string(path)?)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_spec(line: &str) -> Result<ModelSpec> {
    let rest = line
        .strip_prefix("spec ")
        .ok_or_else(|| bad("second line must start with `spec`"))?;
    let fields: BTreeMap<&str, &str> = rest
        .split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| bad(format!("bad spec field `{kv}`")))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| bad(format!("spec lacks `{k}`")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("spec field `{k}` is not an integer")))
    };
    let replaced = match get("replaced")? {
        "-" => Default::default(),
        list => list
            .split(',')
            .map(|l| {
                l.parse()
                    .map_err(|_| bad(format!("bad replaced layer `{l}`")))
            })
            .collect::<Result<_>>()?,
    };
    let spec = ModelSpec {
        depth: int("depth")?,
        width: int("width")?,
        heads: int("heads")?,
        seq_len: int("seq_len")?,
        vocab: int("vocab")?,
        num_classes: int("num_classes")?,
        mlp_hidden: int("mlp_hidden")?,
        replaced,
        ln_eps: get("ln_eps")?
            .parse()
            .map_err(|_| bad("spec field `ln_eps` is not a number"))?,
    };
    spec.validate()
        .map_err(|e| bad(format!("checkpoint spec is invalid: {e}")))?;
    Ok(spec)
}

pub fn from_text(text: &str) -> Result<Model> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    let spec = parse_spec(lines.next().ok_or_else(|| bad("missing spec line"))?)?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut order = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("missing `end` line"))?;
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(bad(format!("expected a tensor header, got `{line}`")));
        }
        let name = parts
            .next()
            .ok_or_else(|| bad("tensor header without a name"))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|d| {
                d.parse()
                    .map_err(|_| bad(format!("bad dimension `{d}` for {name}")))
            })
            .collect::<Result<_>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(bad(format!("tensor {name} has an invalid shape {shape:?}")));
        }
        let cols = *shape.last().unwrap();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n / cols {
            let row = lines
                .next()
                .ok_or_else(|| bad(format!("tensor {name} is truncated")))?;
            let before = data.len();
            for v in row.split_whitespace() {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("bad value `{v}` in {name}")))?,
                );
            }
            if data.len() - before != cols {
                return Err(bad(format!(
                    "row of {name} has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        let t = Tensor::new(&shape, data)?;
        if !t.is_finite() {
            return Err(bad(format!("tensor {name} holds non-finite values")));
        }
        if tensors.insert(name.clone(), t).is_some() {
            return Err(bad(format!("tensor {name} appears twice")));
        }
        order.push(name);
    }

    let mut backbone = Backbone::init(&spec, 0)?;
    let expected: Vec<(String, Vec<usize>)> = backbone
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for ((name, shape), slot) in expected.iter().zip(backbone.tensors_mut()) {
        let t = tensors
            .remove(name)
            .ok_or_else(|| bad(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != shape.as_slice() {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        *slot = t;
    }
    let mut sites = Vec::new();
    for &layer in &spec.replaced {
        let mut student = AttentionParams::zeros(spec.width);
        for (n, slot) in AttentionParams::NAMES.iter().zip(student.tensors_mut()) {
            let name = format!("student{layer}.{n}");
            let t = tensors
                .remove(&name)
                .ok_or_else(|| bad(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!("tensor {name} has shape {:?}", t.shape())));
            }
            *slot = t;
        }
        sites.push(ReplacedSite { layer, student });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(Model {
        spec,
        backbone,
        sites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let spec = ModelSpec {
            depth: 2,
            width: 8,
            heads: 2,
            mlp_hidden: 16,
            replaced: [2].into(),
            ..Default::default()
        };
        let model =
            Model::with_students(spec.clone(), Backbone::init(&spec, 3).unwrap(), 4).unwrap();
        let back = from_text(&to_text(&model)).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let spec = ModelSpec {
            depth: 1,
            width: 4,
            heads: 1,
            mlp_hidden: 4,
            replaced: Default::default(),
            ..Default::default()
        };
        let model =
            Model::with_students(spec.clone(), Backbone::init(&spec, 3).unwrap(), 4).unwrap();
        let text = to_text(&model);
        assert!(from_text(&text.replace("dcr-checkpoint 1", "dcr-checkpoint 2")).is_err());
        assert!(from_text(text.trim_end_matches("end\n")).is_err());
        assert!(from_text(&text.replacen("tensor head.b", "tensor head.c", 1)).is_err());
    }
}
