//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its materialized output and enough saved
//! state to apply its vector-Jacobian product. Nodes are only ever appended,
//! so the list is already in topological order and backward is a single
//! reverse sweep.

use std::rc::Rc;

use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        broadcast: Option<Broadcast>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddScalar {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SumAll {
        x: Var,
        scale: f64,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    macs: u64,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
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

    /// Multiply-accumulate operations performed by matmuls and convolutions
    /// recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[..., m, k] x b[k, n]` or `a[..., m, k] x b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] x b[..., n, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape_mismatch(op_name, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape_mismatch(op_name, &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if b_batched && lead_a != lead_b {
            return Err(Error::shape_mismatch(op_name, &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            let bsz = k * n;
            for t in 0..batch {
                let at = &ad[t * m * k..(t + 1) * m * k];
                let bt = if b_batched {
                    &bd[t * bsz..(t + 1) * bsz]
                } else {
                    bd
                };
                let ct = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt(at, bt, ct, m, k, n);
                } else {
                    gemm_nn(at, bt, ct, m, k, n);
                }
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                b_batched,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// Elementwise op with numpy-style broadcasting.
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let apply = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let needs = self.needs(a) || self.needs(b);
        if sa == sb {
            let out: Vec<f64> = self
                .data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&x, &y)| apply(x, y))
                .collect();
            return Ok(self.push(
                Tensor::from_parts(sa, out),
                Op::Binary {
                    a,
                    b,
                    kind,
                    broadcast: None,
                },
                needs,
            ));
        }
        let bc = broadcast_plan(&sa, &sb)?;
        let numel: usize = bc.out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for_each_broadcast(&bc, |ia, ib| out.push(apply(ad[ia], bd[ib])));
        }
        Ok(self.push(
            Tensor::from_parts(bc.out_shape.clone(), out),
            Op::Binary {
                a,
                b,
                kind,
                broadcast: Some(bc),
            },
            needs,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, factor }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::AddScalar { x }, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Gelu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid { x }, needs)
    }

    // ---- normalization -------------------------------------------------

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xd[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (xd[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis with epsilon `1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape_mismatch(
                "layer_norm",
                &shape,
                self.shape(gamma),
            ));
        }
        let rows = self.value(x).numel() / c;
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + bt[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let (xhat, inv_std) = if needs {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.sum_scaled(x, 1.0)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        self.sum_scaled(x, 1.0 / n)
    }

    fn sum_scaled(&mut self, x: Var, scale: f64) -> Var {
        let s: f64 = self.data(x).iter().sum::<f64>() * scale;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x, scale }, needs)
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "mean axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Mean squared error between equally shaped tensors, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape_mismatch("mse", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, needs))
    }

    // ---- data movement -------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// `out.flat[i] = x.flat[index[i]]`. Indices may repeat (the backward pass
    /// scatter-adds) or skip elements.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::Internal(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        let xd = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::Internal(format!(
                "gather: index {bad} out of range for {} elements",
                xd.len()
            )));
        }
        let out: Vec<f64> = index.iter().map(|&i| xd[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather { x, index },
            needs,
        ))
    }

    /// Materialized axis permutation: `out` axis `i` is `x` axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (index, out_shape) = permute_index(&shape, axes)?;
        self.gather(x, Rc::new(index), &out_shape)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                let base = (o * full + j) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, Rc::new(index), &out_shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| {
                Error::Usage("concat needs at least one input".into())
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape_mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &ch) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.data(v)[o * ch..(o + 1) * ch]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            needs,
        ))
    }

    // ---- convolution ---------------------------------------------------

    /// "Same" 2-D convolution with zero padding over an `H x W x Cin` map.
    /// Weights are `[k, k, Cin, Cout]` with odd `k`, bias is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[0].is_multiple_of(2) || ws[2] != xs[2]
        {
            return Err(Error::shape_mismatch("conv2d", &xs, &ws));
        }
        if bs != [ws[3]] {
            return Err(Error::shape_mismatch("conv2d bias", &ws, &bs));
        }
        let (height, width, cin) = (xs[0], xs[1], xs[2]);
        let (kernel, cout) = (ws[0], ws[3]);
        let pad = kernel / 2;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; height * width * cout];
        for y in 0..height {
            for xx in 0..width {
                let o = &mut out[(y * width + xx) * cout..(y * width + xx + 1) * cout];
                o.copy_from_slice(bd);
                for dy in 0..kernel {
                    let sy = y + dy;
                    if sy < pad || sy - pad >= height {
                        continue;
                    }
                    for dx in 0..kernel {
                        let sx = xx + dx;
                        if sx < pad || sx - pad >= width {
                            continue;
                        }
                        let src = &xd[((sy - pad) * width + sx - pad) * cin..][..cin];
                        let wbase = (dy * kernel + dx) * cin * cout;
                        for (ci, &xv) in src.iter().enumerate() {
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (ov, &wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        // full-kernel convention: border taps against the zero padding count too
        self.macs += (height * width * kernel * kernel * cin * cout) as u64;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![height, width, cout], out),
            Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                cin,
                cout,
                kernel,
            },
            needs,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one call.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Usage(
                "loss does not depend on any requires_grad tensor".into(),
            ));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at leaf {i}")));
                }
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.apply_vjp(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
        f(slot);
    }

    fn apply_vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                b_batched,
                m,
                k,
                n,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                let bsz = k * n;
                self.accumulate(grads, a, |ga| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = if b_batched { &bd[t * bsz..(t + 1) * bsz] } else { bd };
                        let gat = &mut ga[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            // dA = dC . B   with B stored n x k
                            gemm_nn(gt, bt, gat, m, n, k);
                        } else {
                            // dA = dC . B^T with B stored k x n
                            gemm_nt(gt, bt, gat, m, n, k);
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let gbt = if b_batched {
                            &mut gb[t * bsz..(t + 1) * bsz]
                        } else {
                            &mut gb[..]
                        };
                        if trans_b {
                            // dB = dC^T . A  (n x k)
                            gemm_tn(gt, at, gbt, m, n, k);
                        } else {
                            // dB = A^T . dC  (k x n)
                            gemm_tn(at, gt, gbt, m, k, n);
                        }
                    }
                });
            }
            Op::Binary {
                a,
                b,
                kind,
                broadcast,
            } => {
                let (a, b, kind) = (*a, *b, *kind);
                match broadcast {
                    None => {
                        self.accumulate(grads, a, |ga| match kind {
                            BinaryKind::Add | BinaryKind::Sub => {
                                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                            }
                            BinaryKind::Mul => {
                                let bd = self.data(b);
                                for j in 0..ga.len() {
                                    ga[j] += g[j] * bd[j];
                                }
                            }
                        });
                        self.accumulate(grads, b, |gb| match kind {
                            BinaryKind::Add => gb.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                            BinaryKind::Sub => gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y),
                            BinaryKind::Mul => {
                                let ad = self.data(a);
                                for j in 0..gb.len() {
                                    gb[j] += g[j] * ad[j];
                                }
                            }
                        });
                    }
                    Some(bc) => {
                        let ad = self.data(a);
                        let bd = self.data(b);
                        self.accumulate(grads, a, |ga| {
                            let mut j = 0;
                            for_each_broadcast(bc, |ia, ib| {
                                ga[ia] += match kind {
                                    BinaryKind::Add | BinaryKind::Sub => g[j],
                                    BinaryKind::Mul => g[j] * bd[ib],
                                };
                                j += 1;
                            });
                        });
                        self.accumulate(grads, b, |gb| {
                            let mut j = 0;
                            for_each_broadcast(bc, |ia, ib| {
                                gb[ib] += match kind {
                                    BinaryKind::Add => g[j],
                                    BinaryKind::Sub => -g[j],
                                    BinaryKind::Mul => g[j] * ad[ia],
                                };
                                j += 1;
                            });
                        });
                    }
                }
            }
            &Op::Scale { x, factor } => self.accumulate(grads, x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor)
            }),
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s))
            }
            &Op::Gelu { x } => {
                let xd = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * gelu_grad(xd[j]);
                    }
                })
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                self.accumulate(grads, x, |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                })
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).numel();
                let rows = inv_std.len();
                let gd = self.data(*gamma);
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gd[j];
                            sum += dxhat[j];
                            sum_xh += dxhat[j] * xh[j];
                        }
                        let (mean, mean_xh) = (sum / c as f64, sum_xh / c as f64);
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (dxhat[j] - mean - xh[j] * mean_xh);
                        }
                    }
                });
            }
            &Op::SumAll { x, scale } => {
                let s = g[0] * scale;
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|d| *d += s))
            }
            &Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let inv = 1.0 / len as f64;
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let dst = &mut gx[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                })
            }
            &Op::Mse { a, b } => {
                let ad = self.data(a);
                let bd = self.data(b);
                let s = 2.0 * g[0] / ad.len() as f64;
                self.accumulate(grads, a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += s * (ad[j] - bd[j]);
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] -= s * (ad[j] - bd[j]);
                    }
                });
            }
            Op::Gather { x, index } => self.accumulate(grads, *x, |gx| {
                for (&src, &d) in index.iter().zip(g) {
                    gx[src] += d;
                }
            }),
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &ch) in inputs.iter().zip(chunks) {
                    self.accumulate(grads, v, |gv| {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + ch];
                            for (d, s) in gv[o * ch..(o + 1) * ch].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += ch;
                }
            }
            &Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                cin,
                cout,
                kernel,
            } => {
                let pad = kernel / 2;
                let xd = self.data(x);
                let wd = self.data(w);
                self.accumulate(grads, b, |gb| {
                    for p in 0..height * width {
                        for (d, s) in gb.iter_mut().zip(&g[p * cout..(p + 1) * cout]) {
                            *d += s;
                        }
                    }
                });
                let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for y in 0..height {
                        for xx in 0..width {
                            for dy in 0..kernel {
                                let sy = y + dy;
                                if sy < pad || sy - pad >= height {
                                    continue;
                                }
                                for dx in 0..kernel {
                                    let sx = xx + dx;
                                    if sx < pad || sx - pad >= width {
                                        continue;
                                    }
                                    f(y * width + xx, (sy - pad) * width + sx - pad, dy, dx);
                                }
                            }
                        }
                    }
                };
                self.accumulate(grads, w, |gw| {
                    taps(&mut |out_p, in_p, dy, dx| {
                        let go = &g[out_p * cout..(out_p + 1) * cout];
                        let src = &xd[in_p * cin..(in_p + 1) * cin];
                        let wbase = (dy * kernel + dx) * cin * cout;
                        for (ci, &xv) in src.iter().enumerate() {
                            let row = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (d, &s) in row.iter_mut().zip(go) {
                                *d += xv * s;
                            }
                        }
                    })
                });
                self.accumulate(grads, x, |gx| {
                    taps(&mut |out_p, in_p, dy, dx| {
                        let go = &g[out_p * cout..(out_p + 1) * cout];
                        let wbase = (dy * kernel + dx) * cin * cout;
                        for ci in 0..cin {
                            let row = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut acc = 0.0;
                            for (&wv, &s) in row.iter().zip(go) {
                                acc += wv * s;
                            }
                            gx[in_p * cin + ci] += acc;
                        }
                    })
                });
            }
        }
    }
}

// ---- kernels -----------------------------------------------------------

/// `c[m x n] += a[m x k] . b[k x n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] . b[n x k]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[k x n] += a[m x k]^T . b[m x n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_plan(sa: &[usize], sb: &[usize]) -> Result<Broadcast> {
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(sa), pad(sb));
    let mut out_shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::shape_mismatch("broadcast", sa, sb));
        }
        out_shape.push(x.max(y));
    }
    let masked = |p: &[usize]| {
        strides(p)
            .into_iter()
            .zip(p)
            .map(|(s, &d)| if d == 1 { 0 } else { s })
            .collect::<Vec<_>>()
    };
    Ok(Broadcast {
        a_strides: masked(&pa),
        b_strides: masked(&pb),
        out_shape,
    })
}

fn for_each_broadcast(bc: &Broadcast, mut f: impl FnMut(usize, usize)) {
    let rank = bc.out_shape.len();
    let numel: usize = bc.out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        f(ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += bc.a_strides[d];
            ib += bc.b_strides[d];
            if idx[d] < bc.out_shape[d] {
                break;
            }
            ia -= bc.a_strides[d] * idx[d];
            ib -= bc.b_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::Dimension(format!(
            "invalid permutation {axes:?} for shape {shape:?}"
        )));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        index.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= perm_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok((index, out_shape))
}
