//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every op of one forward pass in creation order, which
//! is a topological order of the graph. [`Tape::backward`] walks it in
//! reverse once. Ops check their domain and refuse to produce NaN/Inf.

mod backward;
pub(crate) mod gemm;
mod gradcheck;

pub use backward::Gradients;
pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{self, broadcast_binary, split_at_axis, Tensor};
use gemm::{gemm, Layout};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Gelu(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
        keep_shape: Vec<usize>,
    },
    Mean {
        x: Var,
        keep_shape: Vec<usize>,
        count: usize,
    },
    Variance {
        x: Var,
        keep_shape: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        indices: Vec<Vec<usize>>,
    },
    StopGradient,
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | StopGradient => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(x) | Scale(x, _) | Shift(x) | Exp(x) | Ln(x) | Sqrt(x) | Powf(x, _) | Gelu(x) | Reshape(x) => vec![*x],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Softmax { x, .. }
            | Sum { x, .. }
            | Mean { x, .. }
            | Variance { x, .. }
            | Permute { x, .. }
            | Slice { x, .. }
            | Gather { x, .. } => vec![*x],
            Concat { xs, .. } => xs.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Sorted, deduplicated reduction axes, validated against `ndim`.
fn normalize_axes(op: &'static str, axes: &[usize], ndim: usize) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::invalid(op, "empty reduction axis list"));
    }
    let mut a = axes.to_vec();
    a.sort_unstable();
    a.dedup();
    if let Some(&bad) = a.iter().find(|&&ax| ax >= ndim) {
        return Err(Error::invalid(op, format!("axis {bad} out of range for rank {ndim}")));
    }
    Ok(a)
}

fn reduced_shapes(shape: &[usize], axes: &[usize], keepdim: bool) -> (Vec<usize>, Vec<usize>, usize) {
    let mut keep = shape.to_vec();
    let mut count = 1;
    for &a in axes {
        count *= shape[a];
        keep[a] = 1;
    }
    let out = if keepdim {
        keep.clone()
    } else {
        let s: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        if s.is_empty() {
            vec![1]
        } else {
            s
        }
    };
    (keep, out, count)
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let src = t.data();
    let mut data = Vec::with_capacity(n);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn softmax_forward(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_at_axis(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// Batch bookkeeping for `[.., m, k] · [.., k, n]`.
pub(crate) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a offset, b offset, c offset) per broadcast batch entry.
    pub offsets: Vec<(usize, usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("matmul", "operands need rank >= 2"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = if a_batch.is_empty() && b_batch.is_empty() {
        vec![]
    } else {
        let aa = if a_batch.is_empty() { &[1][..] } else { a_batch };
        let bb = if b_batch.is_empty() { &[1][..] } else { b_batch };
        tensor::broadcast_shape("matmul", aa, bb)?
    };
    let nb: usize = batch.iter().product();
    let (a_map, b_map) = if batch.is_empty() {
        (vec![0], vec![0])
    } else {
        let aa = if a_batch.is_empty() { vec![1] } else { a_batch.to_vec() };
        let bb = if b_batch.is_empty() { vec![1] } else { b_batch.to_vec() };
        (
            tensor::broadcast_index_map(&aa, &batch),
            tensor::broadcast_index_map(&bb, &batch),
        )
    };
    let offsets = (0..nb.max(1))
        .map(|i| (a_map[i] * m * k, b_map[i] * k * n, i * m * n))
        .collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        out_shape,
        offsets,
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let v = broadcast_binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| -a);
        self.push("neg", v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c))
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        self.push("shift", v, Op::Shift(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push("exp", v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                msg: "logarithm of a non-positive value".into(),
            });
        }
        let v = self.value(x).map(f64::ln);
        self.push("ln", v, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "square root of a non-positive value".into(),
            });
        }
        let v = self.value(x).map(f64::sqrt);
        self.push("sqrt", v, Op::Sqrt(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let vals = self.value(x).data();
        let bad = if p.fract() != 0.0 {
            vals.iter().any(|&a| a < 0.0) || (p < 1.0 && vals.contains(&0.0))
        } else {
            p < 0.0 && vals.contains(&0.0)
        };
        if bad {
            return Err(Error::Domain {
                op: "powf",
                msg: format!("power {p} undefined on input"),
            });
        }
        let v = self.value(x).map(|a| a.powf(p));
        self.push("powf", v, Op::Powf(x, p))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(gelu_value);
        self.push("gelu", v, Op::Gelu(x))
    }

    // ---- contractions -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for &(ao, bo, co) in &plan.offsets {
            gemm(
                m,
                k,
                n,
                &av[ao..ao + m * k],
                Layout::row_major(k),
                &bv[bo..bo + k * n],
                Layout::row_major(n),
                0.0,
                &mut out[co..co + m * n],
                Layout::row_major(n),
            );
        }
        let v = Tensor::from_parts(plan.out_shape, out);
        self.push("matmul", v, Op::MatMul(a, b))
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let d_out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: vec![d_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            Layout::row_major(d_in),
            self.value(w).data(),
            Layout::transposed(d_in),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            Layout::row_major(d_out),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        self.push("linear", Tensor::from_parts(shape, out), Op::Linear { x, w, b })
    }

    // ---- normalisation ----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let nd = self.value(x).ndim();
        if axis >= nd {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {nd}"),
            ));
        }
        let v = softmax_forward(self.value(x), axis);
        self.push("softmax", v, Op::Softmax { x, axis })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(xs, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let axes = normalize_axes("sum", axes, self.value(x).ndim())?;
        let (keep, out, _) = reduced_shapes(self.shape(x), &axes, keepdim);
        let s = tensor::sum_to_shape(self.value(x), &keep);
        let v = Tensor::from_parts(out, s.into_data());
        self.push("sum", v, Op::Sum { x, keep_shape: keep })
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let axes = normalize_axes("mean", axes, self.value(x).ndim())?;
        let (keep, out, count) = reduced_shapes(self.shape(x), &axes, keepdim);
        let s = tensor::sum_to_shape(self.value(x), &keep);
        let v = Tensor::from_parts(out, s.into_data().into_iter().map(|a| a / count as f64).collect());
        self.push(
            "mean",
            v,
            Op::Mean {
                x,
                keep_shape: keep,
                count,
            },
        )
    }

    /// Population variance (mean squared deviation).
    pub fn variance(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let axes = normalize_axes("variance", axes, self.value(x).ndim())?;
        let (keep, out, count) = reduced_shapes(self.shape(x), &axes, keepdim);
        let xv = self.value(x);
        let mean = tensor::sum_to_shape(xv, &keep).map(|a| a / count as f64);
        let dev = broadcast_binary("variance", xv, &mean, |a, m| (a - m) * (a - m))?;
        let s = tensor::sum_to_shape(&dev, &keep);
        let v = Tensor::from_parts(out, s.into_data().into_iter().map(|a| a / count as f64).collect());
        self.push(
            "variance",
            v,
            Op::Variance {
                x,
                keep_shape: keep,
                count,
            },
        )
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.mean(x, &axes, false)
    }

    // ---- data movement ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.value(x).ndim();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..nd).collect::<Vec<_>>() {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {nd}"),
            ));
        }
        let v = permute_tensor(self.value(x), perm);
        self.push("permute", v, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let nd = self.value(x).ndim();
        if a >= nd || b >= nd {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({a},{b}) out of range for rank {nd}"),
            ));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        self.push(
            "slice",
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat { xs: xs.to_vec(), axis },
        )
    }

    /// Row gather on the second-to-last axis: for `x` of shape `[.., N, D]`
    /// viewed as `L` matrices, output matrix `l` holds rows
    /// `indices[l]` (or `indices[0]` for all `l` when one list is given).
    pub fn gather_rows(&mut self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            let x2 = self.reshape(x, &[shape[0], 1])?;
            let g = self.gather_rows(x2, indices)?;
            let k = self.shape(g)[0];
            return self.reshape(g, &[k]);
        }
        let (n, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let l = self.value(x).numel() / (n * d);
        if indices.is_empty() || (indices.len() != 1 && indices.len() != l) {
            return Err(Error::invalid(
                "gather_rows",
                format!("{} index lists for {l} matrices", indices.len()),
            ));
        }
        let k = indices[0].len();
        if k == 0 || indices.iter().any(|ix| ix.len() != k) {
            return Err(Error::invalid(
                "gather_rows",
                "index lists must be non-empty and equal length",
            ));
        }
        if let Some(&bad) = indices.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row index {bad} out of range 0..{n}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(l * k * d);
        for li in 0..l {
            let ix = &indices[if indices.len() == 1 { 0 } else { li }];
            for &r in ix {
                let at = (li * n + r) * d;
                out.extend_from_slice(&src[at..at + d]);
            }
        }
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape[nd - 2] = k;
        self.push(
            "gather_rows",
            Tensor::from_parts(out_shape, out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    /// Identity forward; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.push("stop_gradient", v, Op::StopGradient)
    }
}
