//! Interface similarity and the metrics file.
//!
//! The metrics file is comma-separated with one header line:
//!
//! ```text
//! step,epoch,t_fraction,gate,lambda,lr,train_loss,task_loss,dfg_loss,grad_norm,grad_var,val_acc,student_val_acc,cos_block<l>...
//! ```
//!
//! with one `cos_block<l>` column per replaced layer `l` in increasing
//! order. `step` and `epoch` are integers; every other field is printed in
//! scientific notation with 9 significant digits.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch mean of the cosine similarity between per-example flattened
/// teacher and student branch outputs. A zero vector on either side counts
/// as similarity 0.
pub fn interface_cosine_similarity(
    t_branch: &Tensor,
    s_branch: &Tensor,
    examples: usize,
) -> Result<f64> {
    if t_branch.shape() != s_branch.shape() {
        return Err(Error::dim(format!(
            "cosine similarity of shapes {:?} and {:?}",
            t_branch.shape(),
            s_branch.shape()
        )));
    }
    let n = t_branch.numel();
    if examples == 0 || n % examples != 0 {
        return Err(Error::dim(format!(
            "{n} entries do not split into {examples} examples"
        )));
    }
    let per = n / examples;
    let total: f64 = t_branch
        .data()
        .chunks_exact(per)
        .zip(s_branch.data().chunks_exact(per))
        .map(|(a, b)| cosine(a, b))
        .sum();
    Ok(total / examples as f64)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub t_fraction: f64,
    /// Schedule value: `alpha` for DCR, `p` for stochastic gates.
    pub gate: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Means over the steps since the previous row.
    pub train_loss: f64,
    pub task_loss: f64,
    pub dfg_loss: f64,
    /// Mean pre-clip global norm of the student gradient.
    pub grad_norm: f64,
    /// Trace of the sample covariance of the student gradients.
    pub grad_var: f64,
    /// Accuracy of the gated model at this point of the schedule.
    pub val_acc: f64,
    /// Accuracy with every replaced site on its student.
    pub student_val_acc: f64,
    /// `(layer, similarity)` per replaced layer.
    pub cos: Vec<(usize, f64)>,
}

pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

impl MetricsRow {
    pub const FIXED_COLUMNS: [&'static str; 13] = [
        "step",
        "epoch",
        "t_fraction",
        "gate",
        "lambda",
        "lr",
        "train_loss",
        "task_loss",
        "dfg_loss",
        "grad_norm",
        "grad_var",
        "val_acc",
        "student_val_acc",
    ];

    pub fn header(layers: &[usize]) -> String {
        let mut cols: Vec<String> = Self::FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        cols.extend(layers.iter().map(|l| format!("cos_block{l}")));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut line = format!("{},{}", self.step, self.epoch);
        for v in [
            self.t_fraction,
            self.gate,
            self.lambda,
            self.lr,
            self.train_loss,
            self.task_loss,
            self.dfg_loss,
            self.grad_norm,
            self.grad_var,
            self.val_acc,
            self.student_val_acc,
        ]
        .into_iter()
        .chain(self.cos.iter().map(|c| c.1))
        {
            let _ = write!(line, ",{}", fmt_sig9(v));
        }
        line
    }

    /// Parses a line written by [`MetricsRow::to_csv`] under `header`.
    pub fn parse(header: &str, line: &str) -> Result<Self> {
        let names: Vec<&str> = header.trim().split(',').collect();
        let fields: Vec<&str> = line.trim().split(',').collect();
        if names.len() != fields.len() || names.len() < Self::FIXED_COLUMNS.len() {
            return Err(Error::Format(format!(
                "metrics line has {} fields for {} columns",
                fields.len(),
                names.len()
            )));
        }
        if names[..Self::FIXED_COLUMNS.len()] != Self::FIXED_COLUMNS {
            return Err(Error::Format("unexpected metrics header".into()));
        }
        let int = |i: usize| {
            fields[i]
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("`{}` is not an integer", fields[i])))
        };
        let num = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("`{}` is not a number", fields[i])))
        };
        let cos = names[Self::FIXED_COLUMNS.len()..]
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let layer = name
                    .strip_prefix("cos_block")
                    .and_then(|l| l.parse().ok())
                    .ok_or_else(|| Error::Format(format!("unexpected column `{name}`")))?;
                Ok((layer, num(Self::FIXED_COLUMNS.len() + j)?))
            })
            .collect::<Result<_>>()?;
        Ok(MetricsRow {
            step: int(0)?,
            epoch: int(1)?,
            t_fraction: num(2)?,
            gate: num(3)?,
            lambda: num(4)?,
            lr: num(5)?,
            train_loss: num(6)?,
            task_loss: num(7)?,
            dfg_loss: num(8)?,
            grad_norm: num(9)?,
            grad_var: num(10)?,
            val_acc: num(11)?,
            student_val_acc: num(12)?,
            cos,
        })
    }
}

pub fn metrics_csv(layers: &[usize], rows: &[MetricsRow]) -> String {
    let mut out = MetricsRow::header(layers);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty metrics file".into()))?;
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| MetricsRow::parse(header, l))
        .collect()
}

/// Running trace variance of a stream of vectors (Welford).
#[derive(Clone, Debug, Default)]
pub struct TraceVariance {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl TraceVariance {
    pub fn push(&mut self, x: impl IntoIterator<Item = f64>) {
        self.n += 1;
        let first = self.mean.is_empty();
        for (i, v) in x.into_iter().enumerate() {
            if first {
                self.mean.push(0.0);
                self.m2.push(0.0);
            }
            let d = v - self.mean[i];
            self.mean[i] += d / self.n as f64;
            self.m2[i] += d * (v - self.mean[i]);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sum of per-coordinate unbiased variances; 0 with fewer than 2 samples.
    pub fn trace(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.m2.iter().sum::<f64>() / (self.n - 1) as f64
    }
}
