//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation executes eagerly and appends a node to the [`Graph`], so
//! node ids are already in topological order. [`Graph::backward`] sweeps the
//! tape once in reverse and fills the gradient slot of every node whose value
//! depends on a leaf created with `requires_grad`. Leaves without that flag
//! (frozen parameters, inputs, detached activations) never get a gradient
//! buffer.
//!
//! The op set is deliberately small: enough for a pre-norm transformer block,
//! a classification head and the training losses.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        src: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        src: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mse(Var, Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// An eagerly evaluated computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// A constant copy of `v`: gradients do not flow back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        // v * 0 is NaN exactly for infinite or NaN v
        let all_finite = data.iter().fold(0.0, |acc, &v| acc + v * 0.0) == 0.0;
        if let Some(bad) = (!all_finite)
            .then(|| data.iter().position(|v| !v.is_finite()))
            .flatten()
        {
            return Err(Error::Numeric(format!(
                "{} produced non-finite value {} at flat index {bad}",
                op_name(&op),
                data[bad]
            )));
        }
        let mut value = Tensor::new(shape, data)?;
        value.set_requires_grad(inputs.iter().any(|&v| self.requires_grad(v)));
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Add(a, b), &[a, b])
    }

    /// `x[.., d] + bias[d]`, the bias repeated over every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.shape(bias) != [cols] {
            return Err(Error::dim(format!(
                "add_row: bias shape {:?} does not match row length {cols}",
                self.shape(bias)
            )));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `i` of a 2-D `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (rows, cols) = self.value(a).rows_cols();
        if self.shape(a).len() != 2 || factors.len() != rows {
            return Err(Error::dim(format!(
                "scale_rows: {} factors for shape {:?}",
                factors.len(),
                self.shape(a)
            )));
        }
        let data = self
            .data(a)
            .chunks_exact(cols)
            .zip(factors)
            .flat_map(|(row, &c)| row.iter().map(move |x| c * x))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, data, Op::ScaleRows(a, factors.to_vec()), &[a])
    }

    /// Matrix product of `[m, k] x [k, n]`, or a batched product of
    /// `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => {
                return Err(Error::dim(format!(
                    "matmul: unsupported shapes {sa:?} x {sb:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions differ in {sa:?} x {sb:?}"
            )));
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        self.push(
            &shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, rows, cols) = match s.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => return Err(Error::dim(format!("transpose: unsupported shape {s:?}"))),
        };
        let data = transpose_blocks(self.data(a), batch, rows, cols);
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push(
            &shape,
            data,
            Op::Transpose {
                src: a,
                batch,
                rows,
                cols,
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        self.push(shape, data, Op::Reshape(a), &[a])
    }

    /// Slice `len` entries starting at `start` along `axis` (0 = rows,
    /// 1 = columns) of a 2-D tensor.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim(format!("narrow: expected 2-D, got {s:?}"))),
        };
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::dim(format!(
                "narrow: axis {axis} range {start}..{} outside {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let src = self.data(a);
        let (shape, data) = if axis == 0 {
            (
                vec![len, cols],
                src[start * cols..(start + len) * cols].to_vec(),
            )
        } else {
            let data = src
                .chunks_exact(cols)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            (vec![rows, len], data)
        };
        self.push(
            &shape,
            data,
            Op::Narrow {
                src: a,
                axis,
                start,
            },
            &[a],
        )
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = self.value(x).rows_cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps < 0.0 {
            return Err(Error::param("layer_norm: eps must be nonnegative"));
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.value(x).rows_cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push(&shape, out, Op::Softmax(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(&shape, data, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(&[1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(Error::dim(format!("mean_axis: axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (a, v) in acc.iter_mut().zip(&src[base..base + inner]) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= len as f64;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        self.push(
            &shape,
            out,
            Op::MeanAxis {
                src: x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(&[1], vec![s], Op::Mse(a, b), &[a, b])
    }

    /// Batch-mean cross-entropy of `logits[b, c]` against a target
    /// distribution per row.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.shape() != s.as_slice() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {s:?} vs targets {:?}",
                targets.shape()
            )));
        }
        let (b, c) = (s[0], s[1]);
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, (p, t)) in self.data(logits).chunks_exact(c).zip(
            probs
                .chunks_exact_mut(c)
                .zip(targets.data().chunks_exact(c)),
        ) {
            let lse = log_sum_exp(row);
            softmax_in_place(p);
            loss -= row.iter().zip(t).map(|(x, t)| t * (x - lse)).sum::<f64>();
        }
        loss /= b as f64;
        self.push(
            &[1],
            vec![loss],
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Cross-entropy against integer labels with label smoothing `eps`
    /// (target `(1 - eps) * onehot + eps / classes`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {s:?} for {} labels",
                labels.len()
            )));
        }
        if !(0.0..=1.0).contains(&smoothing) {
            return Err(Error::param("label smoothing must lie in [0, 1]"));
        }
        let c = s[1];
        let mut t = vec![smoothing / c as f64; s[0] * c];
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::dim(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            t[i * c + y] += 1.0 - smoothing;
        }
        let targets = Tensor::new(&s, t)?;
        self.soft_cross_entropy(logits, &targets)
    }

    /// Reverse sweep from `output` seeded with `seed`.
    ///
    /// Afterwards every node up to `output` that requires grad carries a
    /// gradient buffer (zeros if it does not influence `output`).
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward from node {} but only {} nodes were recorded",
                output.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::dim(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if !self.requires_grad(output) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => vec![0.0; self.nodes[i].value.numel()],
            };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.requires_grad(v) {
                let slot =
                    grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(s, 1.0, g));
                acc(*b, &mut |s| axpy(s, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(s, 1.0, g));
                acc(*b, &mut |s| axpy(s, -1.0, g));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |s| axpy(s, 1.0, g));
                acc(*bias, &mut |s| {
                    let d = s.len();
                    for row in g.chunks_exact(d) {
                        axpy(s, 1.0, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| axpy(s, *c, g)),
            Op::ScaleRows(a, factors) => acc(*a, &mut |s| {
                let cols = s.len() / factors.len();
                for ((dst, src), &c) in s
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(factors)
                {
                    axpy(dst, c, src);
                }
            }),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    for t in 0..*batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &db[t * k * n..(t + 1) * k * n],
                            &mut s[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for t in 0..*batch {
                        gemm_tn(
                            &da[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut s[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Transpose {
                src,
                batch,
                rows,
                cols,
            } => acc(*src, &mut |s| {
                let back = transpose_blocks(g, *batch, *cols, *rows);
                axpy(s, 1.0, &back);
            }),
            Op::Reshape(src) => acc(*src, &mut |s| axpy(s, 1.0, g)),
            Op::Narrow { src, axis, start } => {
                let cols = self.shape(*src)[1];
                let out_cols = node.value.shape()[1];
                acc(*src, &mut |s| {
                    if *axis == 0 {
                        axpy(&mut s[start * cols..start * cols + g.len()], 1.0, g);
                    } else {
                        for (dst, row) in s.chunks_exact_mut(cols).zip(g.chunks_exact(out_cols)) {
                            axpy(&mut dst[*start..*start + out_cols], 1.0, row);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.data(*gamma);
                acc(*gamma, &mut |s| {
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks_exact(d) {
                        axpy(s, 1.0, gr);
                    }
                });
                acc(*x, &mut |s| {
                    for (r, ((sr, gr), xr)) in s
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            sr[j] += rstd[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, m) = node.value.rows_cols();
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s
                        .chunks_exact_mut(m)
                        .zip(y.chunks_exact(m))
                        .zip(g.chunks_exact(m))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * gelu_grad(xd[j]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(*x, &mut |s| {
                let w = g[0] / s.len() as f64;
                s.iter_mut().for_each(|v| *v += w);
            }),
            Op::MeanAxis {
                src,
                outer,
                len,
                inner,
            } => acc(*src, &mut |s| {
                let w = 1.0 / *len as f64;
                for o in 0..*outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        axpy(&mut s[base..base + inner], w, go);
                    }
                }
            }),
            Op::Mse(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let w = 2.0 * g[0] / da.len() as f64;
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += w * (da[j] - db[j]);
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] -= w * (da[j] - db[j]);
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = self.shape(*logits)[0] as f64;
                acc(*logits, &mut |s| {
                    for ((sr, pr), tr) in s
                        .chunks_exact_mut(c)
                        .zip(probs.chunks_exact(c))
                        .zip(targets.chunks_exact(c))
                    {
                        let mass: f64 = tr.iter().sum();
                        for j in 0..c {
                            sr[j] += g[0] * (pr[j] * mass - tr[j]) / b;
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::ScaleRows(..) => "scale_rows",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Narrow { .. } => "narrow",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(..) => "softmax_rows",
        Op::Gelu(..) => "gelu",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanAxis { .. } => "mean_axis",
        Op::Mse(..) => "mse",
        Op::SoftCrossEntropy { .. } => "cross_entropy",
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

// 0.5 (1 + tanh(u)) written as sigmoid(2u), which needs one exp
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * gelu_gate(x)
}

fn gelu_grad(x: f64) -> f64 {
    let s = gelu_gate(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn transpose_blocks(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = src[off + r * cols + c];
            }
        }
    }
    out
}

/// `c[m, n] += a[m, k] * b[k, n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(a, b, c, (m, k, n), (k, 1), (n, 1));
}

/// `c[m, n] += a[m, k] * b[n, k]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(a, b, c, (m, k, n), (k, 1), (1, k));
}

/// `c[k, n] += a[m, k]^T * b[m, n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(a, b, c, (k, m, n), (1, k), (n, 1));
}

/// `c += a * b` for row-major `c[m, n]`, with `a` and `b` addressed through
/// (row, column) strides.
fn dgemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    (m, k, n): (usize, usize, usize),
    (rsa, csa): (usize, usize),
    (rsb, csb): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given shapes
    // and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of a scalar function `f` at `x`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::param("finite difference step must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.param(x.detached());
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::dim(
            "finite_diff_check needs a scalar-valued function",
        ));
    }
    g.backward(y, &Tensor::scalar(1.0))?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = f(&mut g, xv).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("at perturbed point: {m}")),
            other => other,
        })?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::Numeric(
                "function is non-finite at perturbed point".into(),
            ));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.detached();
        plus.data_mut()[i] += h;
        let mut minus = x.detached();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
