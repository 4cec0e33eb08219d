use super::gemm::{gemm, Layout};
use super::{gelu_derivative, matmul_plan, permute_tensor, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_binary, broadcast_to, split_at_axis, sum_to_shape, Tensor};

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

struct Acc<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Tensor>>,
}

impl<'t> Acc<'t> {
    fn add(&mut self, v: Var, g: Tensor) {
        if !self.tape.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &'t Tensor {
        &self.tape.nodes[v.0].value
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl Tape {
    /// Reverse pass from a one-element `loss`. Every leaf that requires a
    /// gradient receives one (zeros when the loss does not depend on it);
    /// multiple uses accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut acc = Acc {
            tape: self,
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        if self.nodes[loss.0].requires_grad {
            acc.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc.grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                acc.grads[i] = Some(g);
                continue;
            }
            self.backward_node(&mut acc, i, g)?;
        }
        let mut grads = acc.grads;
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf && node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
            if !is_leaf {
                *slot = None;
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, acc: &mut Acc<'_>, i: usize, g: Tensor) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if acc.wants(*a) {
                    acc.add(*a, sum_to_shape(&g, acc.val(*a).shape()));
                }
                if acc.wants(*b) {
                    acc.add(*b, sum_to_shape(&g, acc.val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if acc.wants(*a) {
                    acc.add(*a, sum_to_shape(&g, acc.val(*a).shape()));
                }
                if acc.wants(*b) {
                    acc.add(*b, sum_to_shape(&g, acc.val(*b).shape()).map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if acc.wants(*a) {
                    let ga = broadcast_binary("mul", &g, acc.val(*b), |x, y| x * y)?;
                    acc.add(*a, sum_to_shape(&ga, acc.val(*a).shape()));
                }
                if acc.wants(*b) {
                    let gb = broadcast_binary("mul", &g, acc.val(*a), |x, y| x * y)?;
                    acc.add(*b, sum_to_shape(&gb, acc.val(*b).shape()));
                }
            }
            Op::Div(a, b) => {
                if acc.wants(*a) {
                    let ga = broadcast_binary("div", &g, acc.val(*b), |x, y| x / y)?;
                    acc.add(*a, sum_to_shape(&ga, acc.val(*a).shape()));
                }
                if acc.wants(*b) {
                    // d(a/b)/db = -out/b
                    let t = broadcast_binary("div", out, acc.val(*b), |o, y| -o / y)?;
                    let gb = zip_map(&g, &t, |x, y| x * y);
                    acc.add(*b, sum_to_shape(&gb, acc.val(*b).shape()));
                }
            }
            Op::Neg(x) => acc.add(*x, g.map(|v| -v)),
            Op::Scale(x, c) => acc.add(*x, g.map(|v| v * c)),
            Op::Shift(x) | Op::Reshape(x) => {
                let shape = acc.val(*x).shape().to_vec();
                acc.add(*x, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Exp(x) => acc.add(*x, zip_map(&g, out, |a, o| a * o)),
            Op::Ln(x) => acc.add(*x, zip_map(&g, acc.val(*x), |a, v| a / v)),
            Op::Sqrt(x) => acc.add(*x, zip_map(&g, out, |a, o| a * 0.5 / o)),
            Op::Powf(x, p) => {
                let p = *p;
                acc.add(*x, zip_map(&g, acc.val(*x), |a, v| a * p * v.powf(p - 1.0)));
            }
            Op::Gelu(x) => acc.add(*x, zip_map(&g, acc.val(*x), |a, v| a * gelu_derivative(v))),
            Op::MatMul(a, b) => self.backward_matmul(acc, *a, *b, &g)?,
            Op::Linear { x, w, b } => self.backward_linear(acc, *x, *w, *b, &g),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_at_axis(out.shape(), *axis);
                let (y, gy) = (out.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 = (0..len).map(|j| gy[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let at = base + j * inner;
                            dx[at] = y[at] * (gy[at] - dot);
                        }
                    }
                }
                acc.add(*x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::Sum { x, keep_shape } => {
                let gk = Tensor::from_parts(keep_shape.clone(), g.into_data());
                let shape = acc.val(*x).shape().to_vec();
                acc.add(*x, broadcast_to(&gk, &shape));
            }
            Op::Mean { x, keep_shape, count } => {
                let c = *count as f64;
                let gk = Tensor::from_parts(keep_shape.clone(), g.into_data().into_iter().map(|v| v / c).collect());
                let shape = acc.val(*x).shape().to_vec();
                acc.add(*x, broadcast_to(&gk, &shape));
            }
            Op::Variance { x, keep_shape, count } => {
                let c = *count as f64;
                let xv = acc.val(*x);
                let mean = sum_to_shape(xv, keep_shape).map(|v| v / c);
                let gk = Tensor::from_parts(keep_shape.clone(), g.into_data());
                let dev = broadcast_binary("variance", xv, &mean, |a, m| a - m)?;
                let gx = broadcast_binary("variance", &dev, &gk, |d, gv| 2.0 * d * gv / c)?;
                acc.add(*x, gx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc.add(*x, permute_tensor(&g, &inv));
            }
            Op::Slice { x, axis, start } => {
                let shape = acc.val(*x).shape().to_vec();
                let (outer, len, inner) = split_at_axis(&shape, *axis);
                let w = out.shape()[*axis];
                let mut dx = vec![0.0; outer * len * inner];
                let gd = g.data();
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    dx[dst..dst + w * inner].copy_from_slice(&gd[o * w * inner..(o + 1) * w * inner]);
                }
                acc.add(*x, Tensor::from_parts(shape, dx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let gd = g.data();
                let mut offset = 0;
                for &v in xs {
                    let shape = acc.val(v).shape().to_vec();
                    let len = shape[*axis];
                    if acc.wants(v) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            dx.extend_from_slice(&gd[src..src + len * inner]);
                        }
                        acc.add(v, Tensor::from_parts(shape, dx));
                    }
                    offset += len;
                }
            }
            Op::Gather { x, indices } => {
                let shape = acc.val(*x).shape().to_vec();
                let nd = shape.len();
                let (n, d) = (shape[nd - 2], shape[nd - 1]);
                let l = acc.val(*x).numel() / (n * d);
                let k = indices[0].len();
                let gd = g.data();
                let mut dx = vec![0.0; l * n * d];
                for li in 0..l {
                    let ix = &indices[if indices.len() == 1 { 0 } else { li }];
                    for (j, &r) in ix.iter().enumerate() {
                        let src = (li * k + j) * d;
                        let dst = (li * n + r) * d;
                        for c in 0..d {
                            dx[dst + c] += gd[src + c];
                        }
                    }
                }
                acc.add(*x, Tensor::from_parts(shape, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().unwrap();
                let gd = g.data();
                let gm = acc.val(*gamma).data();
                if acc.wants(*gamma) || acc.wants(*beta) {
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (row_g, row_h) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dgamma[j] += row_g[j] * row_h[j];
                            dbeta[j] += row_g[j];
                        }
                    }
                    acc.add(*gamma, Tensor::from_parts(vec![d], dgamma));
                    acc.add(*beta, Tensor::from_parts(vec![d], dbeta));
                }
                if acc.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let row_g = &gd[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = row_g[j] * gm[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * row_h[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                    acc.add(*x, Tensor::from_parts(out.shape().to_vec(), dx));
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(&self, acc: &mut Acc<'_>, a: Var, b: Var, g: &Tensor) -> Result<()> {
        let (av, bv) = (acc.val(a), acc.val(b));
        let plan = matmul_plan(av.shape(), bv.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let gd = g.data();
        if acc.wants(a) {
            let mut da = vec![0.0; av.numel()];
            for &(ao, bo, co) in &plan.offsets {
                // dA += dC · Bᵀ
                gemm(
                    m,
                    n,
                    k,
                    &gd[co..co + m * n],
                    Layout::row_major(n),
                    &bv.data()[bo..bo + k * n],
                    Layout::transposed(n),
                    1.0,
                    &mut da[ao..ao + m * k],
                    Layout::row_major(k),
                );
            }
            acc.add(a, Tensor::from_parts(av.shape().to_vec(), da));
        }
        if acc.wants(b) {
            let mut db = vec![0.0; bv.numel()];
            for &(ao, bo, co) in &plan.offsets {
                // dB += Aᵀ · dC
                gemm(
                    k,
                    m,
                    n,
                    &av.data()[ao..ao + m * k],
                    Layout::transposed(k),
                    &gd[co..co + m * n],
                    Layout::row_major(n),
                    1.0,
                    &mut db[bo..bo + k * n],
                    Layout::row_major(n),
                );
            }
            acc.add(b, Tensor::from_parts(bv.shape().to_vec(), db));
        }
        Ok(())
    }

    fn backward_linear(&self, acc: &mut Acc<'_>, x: Var, w: Var, b: Option<Var>, g: &Tensor) {
        let (xv, wv) = (acc.val(x), acc.val(w));
        let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.numel() / d_in;
        let gd = g.data();
        if acc.wants(x) {
            let mut dx = vec![0.0; xv.numel()];
            gemm(
                rows,
                d_out,
                d_in,
                gd,
                Layout::row_major(d_out),
                wv.data(),
                Layout::row_major(d_in),
                0.0,
                &mut dx,
                Layout::row_major(d_in),
            );
            acc.add(x, Tensor::from_parts(xv.shape().to_vec(), dx));
        }
        if acc.wants(w) {
            let mut dw = vec![0.0; d_out * d_in];
            gemm(
                d_out,
                rows,
                d_in,
                gd,
                Layout::transposed(d_out),
                xv.data(),
                Layout::row_major(d_in),
                0.0,
                &mut dw,
                Layout::row_major(d_in),
            );
            acc.add(w, Tensor::from_parts(vec![d_out, d_in], dw));
        }
        if let Some(b) = b {
            if acc.wants(b) {
                let mut db = vec![0.0; d_out];
                for row in gd.chunks(d_out) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc.add(b, Tensor::from_parts(vec![d_out], db));
            }
        }
    }
}
