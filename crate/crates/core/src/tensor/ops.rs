//! Forward implementations and backward rules for every recorded operation.

use super::tape::{accumulate, CustomBackward, Node, Tape, Var};
use super::{strides, Result, Tensor, TensorError};

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ATTENTION_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RnnKind {
    Gru,
    Lstm,
}

impl RnnKind {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            RnnKind::Gru => 3,
            RnnKind::Lstm => 4,
        }
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current input.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Neg,
    Scale(f64),
    Offset(f64),
    Sigmoid,
    Tanh,
    Elu,
    Exp,
    Log,
    Square,
}

pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        layout: NormLayout,
    },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        den: Vec<f64>,
    },
    Rnn {
        kind: RnnKind,
        xp: Var,
        w_hh: Var,
        reverse: bool,
        cache: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum NormLayout {
    /// Statistics per row over the last axis.
    Layer,
    /// Statistics per channel (last axis) over all rows.
    BatchTrain,
    /// Fixed statistics; a per-channel affine map.
    BatchEval,
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LinearAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Rnn { xp, w_hh, .. } => vec![*xp, *w_hh],
            Op::DepthwiseConv { x, w } => vec![*x, *w],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |v: Var| &nodes[v.0].value;
        let need = |v: Var| nodes[v.0].requires_grad;
        match self {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.len() / k;
                if need(*a) {
                    let da = accumulate(grads, *a, av.len());
                    gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                if need(*b) {
                    let db = accumulate(grads, *b, bv.len());
                    gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let nb = bv.len();
                if need(*a) {
                    let da = accumulate(grads, *a, av.len());
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[i % nb],
                            BinaryKind::Div => g[i] / bv[i % nb],
                        };
                    }
                }
                if need(*b) {
                    let db = accumulate(grads, *b, nb);
                    for i in 0..av.len() {
                        db[i % nb] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[i],
                            BinaryKind::Div => -g[i] * av[i] / (bv[i % nb] * bv[i % nb]),
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = val(*x).data();
                let y = nodes[out].value.data();
                let dx = accumulate(grads, *x, xv.len());
                for i in 0..xv.len() {
                    dx[i] += g[i]
                        * match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Scale(c) => *c,
                            UnaryKind::Offset(_) => 1.0,
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Elu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    y[i] + 1.0
                                }
                            }
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / xv[i],
                            UnaryKind::Square => 2.0 * xv[i],
                        };
                }
            }
            Op::Reshape { x } => {
                let dx = accumulate(grads, *x, g.len());
                add_into(dx, g);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, nodes[out].value.shape(), &inverse);
                let dx = accumulate(grads, *x, g.len());
                add_into(dx, &back);
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, inner) = outer_inner(xs, *axis);
                let len = nodes[out].value.shape()[*axis];
                let dx = accumulate(grads, *x, val(*x).len());
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * xs[*axis] + start) * inner;
                    add_into(&mut dx[base..base + len * inner], src);
                }
            }
            Op::Concat { parts, axis } => {
                let os = nodes[out].value.shape();
                let (outer, inner) = outer_inner(os, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if need(*p) {
                        let dp = accumulate(grads, *p, val(*p).len());
                        for o in 0..outer {
                            let base = (o * os[*axis] + offset) * inner;
                            add_into(
                                &mut dp[o * len * inner..(o + 1) * len * inner],
                                &g[base..base + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum { x } => {
                let dx = accumulate(grads, *x, val(*x).len());
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                let dx = accumulate(grads, *x, n);
                dx.iter_mut().for_each(|d| *d += g[0] / n as f64);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
            } => norm_backward(
                *layout,
                val(*x).shape(),
                val(*gamma).data(),
                xhat,
                inv_std,
                g,
                (*x, *gamma, *beta),
                nodes,
                grads,
            ),
            Op::LinearAttention {
                q,
                k,
                v,
                causal,
                den,
            } => {
                let (dq, dk, dv) = attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    nodes[out].value.data(),
                    den,
                    g,
                    *causal,
                );
                add_into(accumulate(grads, *q, dq.len()), &dq);
                add_into(accumulate(grads, *k, dk.len()), &dk);
                add_into(accumulate(grads, *v, dv.len()), &dv);
            }
            Op::Rnn {
                kind,
                xp,
                w_hh,
                reverse,
                cache,
            } => {
                let (dxp, dw) = rnn_backward(*kind, val(*xp), val(*w_hh), *reverse, cache, g);
                if need(*xp) {
                    add_into(accumulate(grads, *xp, dxp.len()), &dxp);
                }
                if need(*w_hh) {
                    add_into(accumulate(grads, *w_hh, dw.len()), &dw);
                }
            }
            Op::DepthwiseConv { x, w } => {
                let (dx, dw) = depthwise_backward(val(*x), val(*w), g);
                if need(*x) {
                    add_into(accumulate(grads, *x, dx.len()), &dx);
                }
                if need(*w) {
                    add_into(accumulate(grads, *w, dw.len()), &dw);
                }
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let parts = rule.backward(g, &values);
                for (v, d) in inputs.iter().zip(parts) {
                    if need(*v) && !d.is_empty() {
                        add_into(accumulate(grads, *v, d.len()), &d);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c (+)= op(a) · op(b)` with logical shapes `[m, k] · [k, n]`.
///
/// `a_t`/`b_t` mark operands stored transposed (`[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    acc: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: slices cover the strided extents implied by (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl Tape {
    /// `[.., k] · [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bs.len() != 2 || as_.last() != Some(&bs[0]) {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: as_,
                rhs: bs,
            });
        }
        let (k, n) = (bs[0], bs[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = as_;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, "matmul")
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let scalar = bs == [1];
        if !scalar && (bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: as_.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let nb = bv.len();
        let data = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % nb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let shape = as_.to_vec();
        self.push(Tensor::new(shape, data)?, Op::Binary { kind, a, b }, name)
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape or be
    /// a single-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var, name: &'static str) -> Result<Var> {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Scale(c) => c * v,
                UnaryKind::Offset(c) => v + c,
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Elu => {
                    if v > 0.0 {
                        v
                    } else {
                        v.exp_m1()
                    }
                }
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Square => v * v,
            })
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Unary { kind, x }, name)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x, "neg")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x, "scale")
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Offset(c), x, "offset")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x, "tanh")
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Elu, x, "elu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x, "log")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x, "square")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape { x }, "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || seen[a]) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            });
        }
        for &a in axes {
            seen[a] = true;
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            "permute",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { x, axis, start },
            "slice",
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, "mean")
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        self.check_affine("layer_norm", x, gamma, beta)?;
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        self.finish_norm(x, gamma, beta, xhat, inv_std, NormLayout::Layer, "layer_norm")
    }

    /// Channel-last batch normalization over all leading axes.
    ///
    /// In training mode also returns the batch mean and unbiased variance so
    /// the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let c = *self.shape(x).last().unwrap();
        self.check_affine("batch_norm", x, gamma, beta)?;
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += xv[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for j in 0..c {
                        let dlt = xv[r * c + j] - mean[j];
                        var[j] += dlt * dlt;
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| v / (rows.max(2) - 1) as f64)
                    .collect();
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = Some((mean.clone(), unbiased));
                (mean, var, stats)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::InvalidArgument {
                        op: "batch_norm",
                        msg: format!("running statistics of length {} for {c} channels", mean.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xhat: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let layout = if stats.is_some() {
            NormLayout::BatchTrain
        } else {
            NormLayout::BatchEval
        };
        let y = self.finish_norm(x, gamma, beta, xhat, inv_std, layout, "batch_norm")?;
        Ok((y, stats))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let d = *self.shape(x).last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        layout: NormLayout,
        name: &'static str,
    ) -> Result<Var> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = g.len();
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, data)?,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
            },
            name,
        )
    }

    /// Kernelized attention over `[N, L, d]` sequences whose queries and keys
    /// are already mapped to positive features.
    ///
    /// `out_t = (q_t · S_t) / (q_t · z_t + eps)` with `S_t = Σ k_s v_sᵀ` and
    /// `z_t = Σ k_s`, summed over `s ≤ t` when `causal`, else over all `s`.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != qs.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "linear_attention",
                    lhs: qs,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if qs.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "linear_attention",
                msg: format!("expected [N, L, d], got {qs:?}"),
            });
        }
        let (out, den) = attention_forward(self.value(q), self.value(k), self.value(v), causal);
        self.push(
            Tensor::new(qs, out)?,
            Op::LinearAttention {
                q,
                k,
                v,
                causal,
                den,
            },
            "linear_attention",
        )
    }

    /// Runs a recurrent layer over `[N, L, gates·h]` precomputed input
    /// projections with recurrent weights `[h, gates·h]` and a zero initial
    /// state. Returns hidden states `[N, L, h]`.
    ///
    /// GRU gate order is (r, z, n) with `h' = (1 − z)·n + z·h`; LSTM gate
    /// order is (i, f, g, o).
    pub fn rnn(&mut self, kind: RnnKind, xp: Var, w_hh: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(xp).to_vec();
        let ws = self.shape(w_hh).to_vec();
        let gates = kind.gates();
        if xs.len() != 3 || ws.len() != 2 || ws[1] != gates * ws[0] || xs[2] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "rnn",
                lhs: xs,
                rhs: ws,
            });
        }
        let (out, cache) = rnn_forward(kind, self.value(xp), self.value(w_hh), reverse);
        let shape = vec![xs[0], xs[1], ws[0]];
        self.push(
            Tensor::new(shape, out)?,
            Op::Rnn {
                kind,
                xp,
                w_hh,
                reverse,
                cache,
            },
            "rnn",
        )
    }

    /// 3×3 depthwise convolution over `[T, K, C]` with weights `[3, 3, C]`.
    ///
    /// Time is padded with two past frames (causal), the band axis with one
    /// band on each side. Weight `[i, j, c]` multiplies input
    /// `[t + i − 2, k + j − 1, c]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws != [3, 3, xs[2]] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv",
                lhs: xs,
                rhs: ws,
            });
        }
        let out = depthwise_forward(self.value(x), self.value(w));
        self.push(Tensor::new(xs, out)?, Op::DepthwiseConv { x, w }, "depthwise_conv")
    }
}

#[allow(clippy::too_many_arguments)]
fn norm_backward(
    layout: NormLayout,
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    g: &[f64],
    (x, gv, bv): (Var, Var, Var),
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
) {
    let d = *shape.last().unwrap();
    let n = xhat.len();
    let rows = n / d;
    if nodes[gv.0].requires_grad {
        let dg = accumulate(grads, gv, d);
        for i in 0..n {
            dg[i % d] += g[i] * xhat[i];
        }
    }
    if nodes[bv.0].requires_grad {
        let db = accumulate(grads, bv, d);
        for i in 0..n {
            db[i % d] += g[i];
        }
    }
    if !nodes[x.0].requires_grad {
        return;
    }
    let dx = accumulate(grads, x, n);
    match layout {
        NormLayout::Layer => {
            for r in 0..rows {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let dxh = g[r * d + j] * gamma[j];
                    m1 += dxh;
                    m2 += dxh * xhat[r * d + j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let i = r * d + j;
                    dx[i] += inv_std[r] * (g[i] * gamma[j] - m1 - xhat[i] * m2);
                }
            }
        }
        NormLayout::BatchTrain => {
            let mut m1 = vec![0.0; d];
            let mut m2 = vec![0.0; d];
            for i in 0..n {
                let dxh = g[i] * gamma[i % d];
                m1[i % d] += dxh;
                m2[i % d] += dxh * xhat[i];
            }
            for j in 0..d {
                m1[j] /= rows as f64;
                m2[j] /= rows as f64;
            }
            for i in 0..n {
                let j = i % d;
                dx[i] += inv_std[j] * (g[i] * gamma[j] - m1[j] - xhat[i] * m2[j]);
            }
        }
        NormLayout::BatchEval => {
            for i in 0..n {
                dx[i] += g[i] * gamma[i % d] * inv_std[i % d];
            }
        }
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> (Vec<f64>, Vec<f64>) {
    let [n, l, d] = [q.shape()[0], q.shape()[1], q.shape()[2]];
    let (q, k, v) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; n * l * d];
    let mut den = vec![0.0; n * l];
    let mut s = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    for b in 0..n {
        let base = b * l * d;
        s.iter_mut().for_each(|x| *x = 0.0);
        z.iter_mut().for_each(|x| *x = 0.0);
        let accumulate_kv = |t: usize, s: &mut [f64], z: &mut [f64]| {
            let kt = &k[base + t * d..base + (t + 1) * d];
            let vt = &v[base + t * d..base + (t + 1) * d];
            for i in 0..d {
                z[i] += kt[i];
                for j in 0..d {
                    s[i * d + j] += kt[i] * vt[j];
                }
            }
        };
        if !causal {
            for t in 0..l {
                accumulate_kv(t, &mut s, &mut z);
            }
        }
        for t in 0..l {
            if causal {
                accumulate_kv(t, &mut s, &mut z);
            }
            let qt = &q[base + t * d..base + (t + 1) * d];
            let dn = qt.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + ATTENTION_EPS;
            den[b * l + t] = dn;
            let o = &mut out[base + t * d..base + (t + 1) * d];
            for i in 0..d {
                let qi = qt[i];
                for j in 0..d {
                    o[j] += qi * s[i * d + j];
                }
            }
            o.iter_mut().for_each(|x| *x /= dn);
        }
    }
    (out, den)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &[f64],
    den: &[f64],
    g: &[f64],
    causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, l, d] = [q.shape()[0], q.shape()[1], q.shape()[2]];
    let (q, k, v) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    // dnum_t = g_t / den_t, dden_t = -(g_t · out_t) / den_t
    let mut dnum = vec![0.0; q.len()];
    let mut dden = vec![0.0; n * l];
    for bt in 0..n * l {
        let gt = &g[bt * d..(bt + 1) * d];
        let ot = &out[bt * d..(bt + 1) * d];
        for j in 0..d {
            dnum[bt * d + j] = gt[j] / den[bt];
        }
        dden[bt] = -gt.iter().zip(ot).map(|(a, b)| a * b).sum::<f64>() / den[bt];
    }
    let mut s = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    let mut r = vec![0.0; d * d];
    let mut rz = vec![0.0; d];
    for b in 0..n {
        let base = b * l * d;
        let row = |t: usize| base + t * d..base + (t + 1) * d;
        s.iter_mut().for_each(|x| *x = 0.0);
        z.iter_mut().for_each(|x| *x = 0.0);
        r.iter_mut().for_each(|x| *x = 0.0);
        rz.iter_mut().for_each(|x| *x = 0.0);
        let add_kv = |t: usize, s: &mut [f64], z: &mut [f64]| {
            let (kt, vt) = (&k[row(t)], &v[row(t)]);
            for i in 0..d {
                z[i] += kt[i];
                for j in 0..d {
                    s[i * d + j] += kt[i] * vt[j];
                }
            }
        };
        let add_q = |t: usize, r: &mut [f64], rz: &mut [f64]| {
            let qt = &q[row(t)];
            let dn = &dnum[row(t)];
            let dd = dden[b * l + t];
            for i in 0..d {
                rz[i] += qt[i] * dd;
                for j in 0..d {
                    r[i * d + j] += qt[i] * dn[j];
                }
            }
        };
        if !causal {
            for t in 0..l {
                add_kv(t, &mut s, &mut z);
                add_q(t, &mut r, &mut rz);
            }
        }
        for t in 0..l {
            if causal {
                add_kv(t, &mut s, &mut z);
            }
            let dn = &dnum[row(t)];
            let dd = dden[b * l + t];
            let dqt = &mut dq[row(t)];
            for i in 0..d {
                let mut acc = z[i] * dd;
                for j in 0..d {
                    acc += s[i * d + j] * dn[j];
                }
                dqt[i] = acc;
            }
        }
        for t in (0..l).rev() {
            if causal {
                add_q(t, &mut r, &mut rz);
            }
            let (kt, vt) = (&k[row(t)], &v[row(t)]);
            let dkt = &mut dk[row(t)];
            for i in 0..d {
                let mut acc = rz[i];
                for j in 0..d {
                    acc += r[i * d + j] * vt[j];
                }
                dkt[i] = acc;
            }
            let dvt = &mut dv[row(t)];
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += r[i * d + j] * kt[i];
                }
                dvt[j] = acc;
            }
        }
    }
    (dq, dk, dv)
}

const GRU_CACHE: usize = 5;
const LSTM_CACHE: usize = 7;

fn rnn_forward(kind: RnnKind, xp: &Tensor, w: &Tensor, reverse: bool) -> (Vec<f64>, Vec<f64>) {
    let [n, l, gh] = [xp.shape()[0], xp.shape()[1], xp.shape()[2]];
    let h = w.shape()[0];
    let xp = xp.data();
    let w = w.data();
    let nh = n * h;
    let blocks = match kind {
        RnnKind::Gru => GRU_CACHE,
        RnnKind::Lstm => LSTM_CACHE,
    };
    let mut cache = vec![0.0; l * blocks * nh];
    let mut out = vec![0.0; n * l * h];
    let mut hprev = vec![0.0; nh];
    let mut cprev = vec![0.0; nh];
    let mut hh = vec![0.0; n * gh];
    for s in 0..l {
        let t = if reverse { l - 1 - s } else { s };
        gemm(n, h, gh, &hprev, false, w, false, &mut hh, false);
        let c = &mut cache[s * blocks * nh..(s + 1) * blocks * nh];
        for b in 0..n {
            let x = &xp[(b * l + t) * gh..(b * l + t + 1) * gh];
            let hr = &hh[b * gh..(b + 1) * gh];
            for j in 0..h {
                let idx = b * h + j;
                let hp = hprev[idx];
                let hn = match kind {
                    RnnKind::Gru => {
                        let r = sigmoid(x[j] + hr[j]);
                        let z = sigmoid(x[h + j] + hr[h + j]);
                        let nn = (x[2 * h + j] + r * hr[2 * h + j]).tanh();
                        c[idx] = r;
                        c[nh + idx] = z;
                        c[2 * nh + idx] = nn;
                        c[3 * nh + idx] = hr[2 * h + j];
                        c[4 * nh + idx] = hp;
                        (1.0 - z) * nn + z * hp
                    }
                    RnnKind::Lstm => {
                        let i = sigmoid(x[j] + hr[j]);
                        let f = sigmoid(x[h + j] + hr[h + j]);
                        let g = (x[2 * h + j] + hr[2 * h + j]).tanh();
                        let o = sigmoid(x[3 * h + j] + hr[3 * h + j]);
                        let cp = cprev[idx];
                        let cn = f * cp + i * g;
                        c[idx] = i;
                        c[nh + idx] = f;
                        c[2 * nh + idx] = g;
                        c[3 * nh + idx] = o;
                        c[4 * nh + idx] = cn;
                        c[5 * nh + idx] = cp;
                        c[6 * nh + idx] = hp;
                        cprev[idx] = cn;
                        o * cn.tanh()
                    }
                };
                out[(b * l + t) * h + j] = hn;
            }
        }
        for b in 0..n {
            hprev[b * h..(b + 1) * h].copy_from_slice(&out[(b * l + t) * h..(b * l + t + 1) * h]);
        }
    }
    (out, cache)
}

fn rnn_backward(
    kind: RnnKind,
    xp: &Tensor,
    w: &Tensor,
    reverse: bool,
    cache: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [n, l, gh] = [xp.shape()[0], xp.shape()[1], xp.shape()[2]];
    let h = w.shape()[0];
    let wd = w.data();
    let nh = n * h;
    let blocks = match kind {
        RnnKind::Gru => GRU_CACHE,
        RnnKind::Lstm => LSTM_CACHE,
    };
    let mut dxp = vec![0.0; xp.len()];
    let mut dw = vec![0.0; w.len()];
    let mut carry_h = vec![0.0; nh];
    let mut carry_c = vec![0.0; nh];
    let mut dhh = vec![0.0; n * gh];
    let mut direct = vec![0.0; nh];
    for s in (0..l).rev() {
        let t = if reverse { l - 1 - s } else { s };
        let c = &cache[s * blocks * nh..(s + 1) * blocks * nh];
        for b in 0..n {
            for j in 0..h {
                let idx = b * h + j;
                let dh = g[(b * l + t) * h + j] + carry_h[idx];
                let dx = &mut dxp[(b * l + t) * gh..(b * l + t + 1) * gh];
                let dr = &mut dhh[b * gh..(b + 1) * gh];
                match kind {
                    RnnKind::Gru => {
                        let (r, z, nn, hhn, hp) =
                            (c[idx], c[nh + idx], c[2 * nh + idx], c[3 * nh + idx], c[4 * nh + idx]);
                        let dn = dh * (1.0 - z);
                        let dz = dh * (hp - nn);
                        direct[idx] = dh * z;
                        let dpn = dn * (1.0 - nn * nn);
                        let dpr = dpn * hhn * r * (1.0 - r);
                        let dpz = dz * z * (1.0 - z);
                        dx[j] = dpr;
                        dx[h + j] = dpz;
                        dx[2 * h + j] = dpn;
                        dr[j] = dpr;
                        dr[h + j] = dpz;
                        dr[2 * h + j] = dpn * r;
                    }
                    RnnKind::Lstm => {
                        let (i, f, gg, o, cn, cp) = (
                            c[idx],
                            c[nh + idx],
                            c[2 * nh + idx],
                            c[3 * nh + idx],
                            c[4 * nh + idx],
                            c[5 * nh + idx],
                        );
                        let tc = cn.tanh();
                        let dout = dh * tc;
                        let dc = carry_c[idx] + dh * o * (1.0 - tc * tc);
                        carry_c[idx] = dc * f;
                        direct[idx] = 0.0;
                        let pre = [
                            dc * gg * i * (1.0 - i),
                            dc * cp * f * (1.0 - f),
                            dc * i * (1.0 - gg * gg),
                            dout * o * (1.0 - o),
                        ];
                        for (q, p) in pre.iter().enumerate() {
                            dx[q * h + j] = *p;
                            dr[q * h + j] = *p;
                        }
                    }
                }
            }
        }
        let hp_block = match kind {
            RnnKind::Gru => 4,
            RnnKind::Lstm => 6,
        };
        let hprev = &c[hp_block * nh..(hp_block + 1) * nh];
        gemm(h, n, gh, hprev, true, &dhh, false, &mut dw, true);
        gemm(n, gh, h, &dhh, false, wd, true, &mut carry_h, false);
        for (ch, d) in carry_h.iter_mut().zip(&direct) {
            *ch += d;
        }
    }
    (dxp, dw)
}

fn depthwise_forward(x: &Tensor, w: &Tensor) -> Vec<f64> {
    let [t_len, k_len, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let (x, w) = (x.data(), w.data());
    let mut out = vec![0.0; x.len()];
    for t in 0..t_len {
        for k in 0..k_len {
            let o = &mut out[(t * k_len + k) * c..(t * k_len + k + 1) * c];
            for i in 0..3 {
                let Some(ts) = (t + i).checked_sub(2) else { continue };
                for j in 0..3 {
                    let ks = k + j;
                    if ks == 0 || ks > k_len {
                        continue;
                    }
                    let xi = &x[(ts * k_len + ks - 1) * c..(ts * k_len + ks) * c];
                    let wi = &w[(i * 3 + j) * c..(i * 3 + j + 1) * c];
                    for ch in 0..c {
                        o[ch] += wi[ch] * xi[ch];
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(x: &Tensor, w: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [t_len, k_len, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let (xd, wd) = (x.data(), w.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    for t in 0..t_len {
        for k in 0..k_len {
            let go = &g[(t * k_len + k) * c..(t * k_len + k + 1) * c];
            for i in 0..3 {
                let Some(ts) = (t + i).checked_sub(2) else { continue };
                for j in 0..3 {
                    let ks = k + j;
                    if ks == 0 || ks > k_len {
                        continue;
                    }
                    let xo = (ts * k_len + ks - 1) * c;
                    let wo = (i * 3 + j) * c;
                    for ch in 0..c {
                        dx[xo + ch] += wd[wo + ch] * go[ch];
                        dw[wo + ch] += xd[xo + ch] * go[ch];
                    }
                }
            }
        }
    }
    (dx, dw)
}
