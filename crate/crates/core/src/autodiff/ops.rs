//! Forward op builders and the per-op backward rules.

use super::kernels;
use super::{add_into, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, k, inner)
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let va = &inner.nodes[a.0].value;
            let vb = &inner.nodes[b.0].value;
            same_shape(name, va, vb)?;
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::from_vec(va.shape().to_vec(), data)?,
                inner.nodes[a.0].needs_grad || inner.nodes[b.0].needs_grad,
            )
        };
        self.push(name, value, needs, op)
    }

    fn unary(
        &self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let va = &inner.nodes[a.0].value;
            (va.map(&f), inner.nodes[a.0].needs_grad)
        };
        self.push(name, value, needs, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn sin(&self, a: Var) -> Result<Var> {
        self.unary("sin", a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&self, a: Var) -> Result<Var> {
        self.unary("cos", a, |x| x.cos(), Op::Cos(a))
    }

    /// Elementwise product with a constant tensor (no gradient into `c`).
    pub fn mul_const(&self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let va = &inner.nodes[a.0].value;
            same_shape("mul_const", va, c)?;
            let data = va
                .data()
                .iter()
                .zip(c.data())
                .map(|(&x, &y)| x * y)
                .collect();
            (
                Tensor::from_vec(va.shape().to_vec(), data)?,
                inner.nodes[a.0].needs_grad,
            )
        };
        self.push("mul_const", value, needs, Op::MulConst(a, c.clone()))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            (
                inner.nodes[a.0].value.reshaped(shape)?,
                inner.nodes[a.0].needs_grad,
            )
        };
        self.push("reshape", value, needs, Op::Reshape(a))
    }

    /// a [m,k] times b [k,n] -> [m,n].
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let va = &inner.nodes[a.0].value;
            let vb = &inner.nodes[b.0].value;
            if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", va.shape(), vb.shape()),
                });
            }
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            kernels::matmul(va.data(), vb.data(), m, k, n, &mut out);
            (
                Tensor::from_vec(vec![m, n], out)?,
                inner.nodes[a.0].needs_grad || inner.nodes[b.0].needs_grad,
            )
        };
        self.push("matmul", value, needs, Op::Matmul(a, b))
    }

    /// a [m,n] plus per-row bias b [m].
    pub fn add_col_bias(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let va = &inner.nodes[a.0].value;
            let vb = &inner.nodes[b.0].value;
            if va.shape().len() != 2 || vb.len() != va.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "add_col_bias",
                    detail: format!("{:?} + bias {:?}", va.shape(), vb.shape()),
                });
            }
            let (m, n) = (va.shape()[0], va.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let bias = vb.data()[i];
                out.extend(va.data()[i * n..(i + 1) * n].iter().map(|&x| x + bias));
            }
            (
                Tensor::from_vec(vec![m, n], out)?,
                inner.nodes[a.0].needs_grad || inner.nodes[b.0].needs_grad,
            )
        };
        self.push("add_col_bias", value, needs, Op::AddColBias(a, b))
    }

    /// a [c, ...] times b [1, ...] broadcast along axis 0.
    pub fn mul_bcast0(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let va = &inner.nodes[a.0].value;
            let vb = &inner.nodes[b.0].value;
            let c = va.shape().first().copied().unwrap_or(0);
            let plane = if c == 0 { 0 } else { va.len() / c };
            if vb.len() != plane || vb.shape().first() != Some(&1) {
                return Err(Error::ShapeMismatch {
                    op: "mul_bcast0",
                    detail: format!("{:?} * {:?}", va.shape(), vb.shape()),
                });
            }
            let mut out = Vec::with_capacity(va.len());
            for ch in 0..c {
                out.extend(
                    va.data()[ch * plane..(ch + 1) * plane]
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y),
                );
            }
            (
                Tensor::from_vec(va.shape().to_vec(), out)?,
                inner.nodes[a.0].needs_grad || inner.nodes[b.0].needs_grad,
            )
        };
        self.push("mul_bcast0", value, needs, Op::MulBcast0(a, b))
    }

    /// Same-padded stride-1 convolution: x [cin,h,w], w [cout,cin,k,k] with k
    /// odd, b [cout] -> [cout,h,w].
    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv2d_impl(x, w, b, false)
    }

    /// conv2d with the ReLU folded into the same pass.
    pub fn conv2d_relu(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv2d_impl(x, w, b, true)
    }

    fn conv2d_impl(&self, x: Var, w: Var, b: Var, fused_relu: bool) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            let vw = &inner.nodes[w.0].value;
            let vb = &inner.nodes[b.0].value;
            if vx.shape().len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("input must be [c,h,w], got {:?}", vx.shape()),
                });
            }
            if vw.shape().len() != 4 || vw.shape()[2] != vw.shape()[3] || vw.shape()[2] % 2 == 0 {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("kernel must be [cout,cin,k,k] with odd k, got {:?}", vw.shape()),
                });
            }
            let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (cout, k) = (vw.shape()[0], vw.shape()[2]);
            if vw.shape()[1] != cin {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!(
                        "kernel input-channel axis is {}, input has {} channels",
                        vw.shape()[1],
                        cin
                    ),
                });
            }
            if vb.len() != cout {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias axis is {}, kernel has {} outputs", vb.len(), cout),
                });
            }
            let mut out = vec![T::zero(); cout * h * wd];
            kernels::conv2d_forward(vx.data(), vw.data(), vb.data(), cin, cout, h, wd, k, &mut out);
            if fused_relu {
                for v in out.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            (
                Tensor::from_vec(vec![cout, h, wd], out)?,
                inner.nodes[x.0].needs_grad
                    || inner.nodes[w.0].needs_grad
                    || inner.nodes[b.0].needs_grad,
            )
        };
        self.push(
            "conv2d",
            value,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                fused_relu,
            },
        )
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// scan order.
    pub fn maxpool2(&self, x: Var) -> Result<Var> {
        let (value, argmax, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            if vx.shape().len() != 3 || vx.shape()[1] % 2 != 0 || vx.shape()[2] % 2 != 0 {
                return Err(Error::ShapeMismatch {
                    op: "maxpool2",
                    detail: format!("need [c, even h, even w], got {:?}", vx.shape()),
                });
            }
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let data = vx.data();
            let mut out = vec![T::zero(); c * oh * ow];
            let mut argmax = vec![0u32; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = ch * h * w + (2 * oy) * w + 2 * ox;
                        let mut best = data[best_idx];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                        out[ch * oh * ow + oy * ow + ox] = best;
                        argmax[ch * oh * ow + oy * ow + ox] = best_idx as u32;
                    }
                }
            }
            (
                Tensor::from_vec(vec![c, oh, ow], out)?,
                argmax,
                inner.nodes[x.0].needs_grad,
            )
        };
        self.push("maxpool2", value, needs, Op::MaxPool2 { x, argmax })
    }

    /// Bilinear upsample (align-corners-false) of x [c,h,w] to [c,h_out,w_out].
    pub fn upsample(&self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            if vx.shape().len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "upsample",
                    detail: format!("input must be [c,h,w], got {:?}", vx.shape()),
                });
            }
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            if h_out < h || w_out < w {
                return Err(Error::ShapeMismatch {
                    op: "upsample",
                    detail: format!("target {}x{} smaller than source {}x{}", h_out, w_out, h, w),
                });
            }
            let ys = kernels::resample_axis(h_out, h);
            let xs = kernels::resample_axis(w_out, w);
            let src = vx.data();
            let mut out = vec![T::zero(); c * h_out * w_out];
            exec::fill_chunks(&mut out, h_out * w_out, |ch, piece| {
                kernels::upsample_plane(&src[ch * h * w..(ch + 1) * h * w], w, &ys, &xs, piece);
            });
            (
                Tensor::from_vec(vec![c, h_out, w_out], out)?,
                inner.nodes[x.0].needs_grad,
            )
        };
        self.push("upsample", value, needs, Op::Upsample { x })
    }

    /// Bilinear read of feat [c,h,w] at continuous pixel coordinates (x, y)
    /// with 0 <= x <= w-1 and 0 <= y <= h-1; output is [c, n_pts].
    pub fn point_sample(&self, feat: Var, pts: &[(f64, f64)]) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[feat.0].value;
            if vx.shape().len() != 3 {
                return Err(Error::ShapeMismatch {
                    op: "point_sample",
                    detail: format!("features must be [c,h,w], got {:?}", vx.shape()),
                });
            }
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            for (i, &(px, py)) in pts.iter().enumerate() {
                if !(0.0..=(w - 1) as f64).contains(&px) || !(0.0..=(h - 1) as f64).contains(&py) {
                    return Err(Error::PointOutOfRange {
                        op: "point_sample",
                        index: i,
                        x: px,
                        y: py,
                        w_max: (w - 1) as f64,
                        h_max: (h - 1) as f64,
                    });
                }
            }
            let mut out = vec![T::zero(); c * pts.len()];
            kernels::point_sample_forward(vx.data(), c, h, w, pts, &mut out);
            (
                Tensor::from_vec(vec![c, pts.len()], out)?,
                inner.nodes[feat.0].needs_grad,
            )
        };
        self.push(
            "point_sample",
            value,
            needs,
            Op::PointSample {
                x: feat,
                pts: pts.to_vec(),
            },
        )
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat0",
                detail: "no inputs".into(),
            });
        }
        let (value, needs) = {
            let inner = self.inner.borrow();
            let first = &inner.nodes[parts[0].0].value;
            let trailing = first.shape()[1..].to_vec();
            let mut rows = 0usize;
            let mut needs = false;
            for &p in parts {
                let v = &inner.nodes[p.0].value;
                if v.shape()[1..] != trailing[..] {
                    return Err(Error::ShapeMismatch {
                        op: "concat0",
                        detail: format!("{:?} vs {:?}", v.shape(), first.shape()),
                    });
                }
                rows += v.shape()[0];
                needs |= inner.nodes[p.0].needs_grad;
            }
            let mut data = Vec::with_capacity(rows * trailing.iter().product::<usize>());
            for &p in parts {
                data.extend_from_slice(inner.nodes[p.0].value.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(&trailing);
            (Tensor::from_vec(shape, data)?, needs)
        };
        self.push("concat0", value, needs, Op::Concat0(parts.to_vec()))
    }

    /// Gather rows (axis 0) at `idx`.
    pub fn select_rows0(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            let rows = vx.shape()[0];
            let plane: usize = vx.shape()[1..].iter().product();
            if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
                return Err(Error::ShapeMismatch {
                    op: "select_rows0",
                    detail: format!("row {} out of {}", bad, rows),
                });
            }
            let mut data = Vec::with_capacity(idx.len() * plane);
            for &r in idx {
                data.extend_from_slice(&vx.data()[r * plane..(r + 1) * plane]);
            }
            let mut shape = vec![idx.len()];
            shape.extend_from_slice(&vx.shape()[1..]);
            (
                Tensor::from_vec(shape, data)?,
                inner.nodes[x.0].needs_grad,
            )
        };
        self.push(
            "select_rows0",
            value,
            needs,
            Op::SelectRows0 {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Scatter rows of x into a zero tensor with `out_rows` rows; `idx` maps
    /// input row j to output row idx[j] and must be duplicate-free.
    pub fn scatter_rows0(&self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            let plane: usize = vx.shape()[1..].iter().product();
            if idx.len() != vx.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "scatter_rows0",
                    detail: format!("{} indices for {} rows", idx.len(), vx.shape()[0]),
                });
            }
            let mut seen = vec![false; out_rows];
            for &r in idx {
                if r >= out_rows || seen[r] {
                    return Err(Error::ShapeMismatch {
                        op: "scatter_rows0",
                        detail: format!("index {} invalid or repeated (out_rows {})", r, out_rows),
                    });
                }
                seen[r] = true;
            }
            let mut data = vec![T::zero(); out_rows * plane];
            for (j, &r) in idx.iter().enumerate() {
                data[r * plane..(r + 1) * plane]
                    .copy_from_slice(&vx.data()[j * plane..(j + 1) * plane]);
            }
            let mut shape = vec![out_rows];
            shape.extend_from_slice(&vx.shape()[1..]);
            (
                Tensor::from_vec(shape, data)?,
                inner.nodes[x.0].needs_grad,
            )
        };
        self.push(
            "scatter_rows0",
            value,
            needs,
            Op::ScatterRows0 {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Numerically stable softmax over one axis.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            if axis >= vx.shape().len() {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    detail: format!("axis {} for shape {:?}", axis, vx.shape()),
                });
            }
            let (outer, k, inner_len) = lane_dims(vx.shape(), axis);
            let src = vx.data();
            let mut out = vec![T::zero(); src.len()];
            exec::fill_chunks(&mut out, k * inner_len, |o, piece| {
                let block = &src[o * k * inner_len..(o + 1) * k * inner_len];
                for i in 0..inner_len {
                    let mut maxv = block[i];
                    for j in 1..k {
                        let v = block[j * inner_len + i];
                        if v > maxv {
                            maxv = v;
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..k {
                        let e = (block[j * inner_len + i] - maxv).exp();
                        piece[j * inner_len + i] = e;
                        sum = sum + e;
                    }
                    for j in 0..k {
                        piece[j * inner_len + i] = piece[j * inner_len + i] / sum;
                    }
                }
            });
            let _ = outer;
            (
                Tensor::from_vec(vx.shape().to_vec(), out)?,
                inner.nodes[x.0].needs_grad,
            )
        };
        self.push("softmax", value, needs, Op::Softmax { x, axis })
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            let s: T = vx.data().iter().copied().sum();
            (Tensor::scalar(s), inner.nodes[x.0].needs_grad)
        };
        self.push("sum_all", value, needs, Op::SumAll(x))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let (value, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[x.0].value;
            let s: T = vx.data().iter().copied().sum();
            (
                Tensor::scalar(s / T::from_f64(vx.len() as f64)),
                inner.nodes[x.0].needs_grad,
            )
        };
        self.push("mean_all", value, needs, Op::MeanAll(x))
    }

    /// Mean cross-entropy of logits [k, n] against one hard label per column.
    pub fn cross_entropy_mean(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, probs, needs) = {
            let inner = self.inner.borrow();
            let vx = &inner.nodes[logits.0].value;
            if vx.shape().len() != 2 || vx.shape()[1] != labels.len() {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy_mean",
                    detail: format!("logits {:?} vs {} labels", vx.shape(), labels.len()),
                });
            }
            let (k, n) = (vx.shape()[0], vx.shape()[1]);
            if let Some((i, &l)) = labels.iter().enumerate().find(|&(_, &l)| l >= k) {
                return Err(Error::InvalidLabel {
                    label: l,
                    index: i,
                    num_classes: k,
                });
            }
            let src = vx.data();
            let mut probs = vec![T::zero(); k * n];
            let mut loss = 0.0f64;
            for i in 0..n {
                let mut maxv = src[i];
                for j in 1..k {
                    if src[j * n + i] > maxv {
                        maxv = src[j * n + i];
                    }
                }
                let mut sum = T::zero();
                for j in 0..k {
                    let e = (src[j * n + i] - maxv).exp();
                    probs[j * n + i] = e;
                    sum = sum + e;
                }
                for j in 0..k {
                    probs[j * n + i] = probs[j * n + i] / sum;
                }
                loss -= probs[labels[i] * n + i].to_f64_lossy().ln();
            }
            loss /= n as f64;
            (
                Tensor::scalar(T::from_f64(loss)),
                Tensor::from_vec(vec![k, n], probs)?,
                inner.nodes[logits.0].needs_grad,
            )
        };
        self.push(
            "cross_entropy_mean",
            value,
            needs,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}

/// Push the gradient `g` of node `id` into its inputs' gradient slots.
pub(crate) fn backward_step<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let wants = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| &nodes[v.0].value;

    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                add_into(&mut grads[a.0], g.clone());
            }
            if wants(*b) {
                add_into(&mut grads[b.0], g.clone());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                add_into(&mut grads[a.0], g.clone());
            }
            if wants(*b) {
                add_into(&mut grads[b.0], g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let vb = val(*b);
                add_into(&mut grads[a.0], zip_map(g, vb, |x, y| x * y));
            }
            if wants(*b) {
                let va = val(*a);
                add_into(&mut grads[b.0], zip_map(g, va, |x, y| x * y));
            }
        }
        Op::Div(a, b) => {
            let vb = val(*b);
            if wants(*a) {
                add_into(&mut grads[a.0], zip_map(g, vb, |x, y| x / y));
            }
            if wants(*b) {
                let va = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vb.data())
                    .map(|((&gv, &x), &y)| -gv * x / (y * y))
                    .collect();
                add_into(
                    &mut grads[b.0],
                    Tensor::from_vec(g.shape().to_vec(), data).unwrap(),
                );
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                let c = *c;
                add_into(&mut grads[a.0], g.map(|v| v * c));
            }
        }
        Op::AddScalar(a) => {
            if wants(*a) {
                add_into(&mut grads[a.0], g.clone());
            }
        }
        Op::MulConst(a, c) => {
            if wants(*a) {
                add_into(&mut grads[a.0], zip_map(g, c, |x, y| x * y));
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let va = val(*a);
                add_into(
                    &mut grads[a.0],
                    zip_map(g, va, |gv, x| if x > T::zero() { gv } else { T::zero() }),
                );
            }
        }
        Op::Sin(a) => {
            if wants(*a) {
                let va = val(*a);
                add_into(&mut grads[a.0], zip_map(g, va, |gv, x| gv * x.cos()));
            }
        }
        Op::Cos(a) => {
            if wants(*a) {
                let va = val(*a);
                add_into(&mut grads[a.0], zip_map(g, va, |gv, x| -gv * x.sin()));
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                add_into(
                    &mut grads[a.0],
                    g.reshaped(val(*a).shape().to_vec()).unwrap(),
                );
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                kernels::matmul_grad_a(g.data(), val(*b).data(), m, k, n, &mut da);
                add_into(&mut grads[a.0], Tensor::from_vec(vec![m, k], da).unwrap());
            }
            if wants(*b) {
                let mut db = vec![T::zero(); k * n];
                kernels::matmul_grad_b(g.data(), val(*a).data(), m, k, n, &mut db);
                add_into(&mut grads[b.0], Tensor::from_vec(vec![k, n], db).unwrap());
            }
        }
        Op::AddColBias(a, b) => {
            if wants(*a) {
                add_into(&mut grads[a.0], g.clone());
            }
            if wants(*b) {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut db = vec![T::zero(); m];
                for i in 0..m {
                    db[i] = g.data()[i * n..(i + 1) * n].iter().copied().sum();
                }
                add_into(&mut grads[b.0], Tensor::from_vec(vec![m], db).unwrap());
            }
        }
        Op::MulBcast0(a, b) => {
            let c = val(*a).shape()[0];
            let plane = val(*a).len() / c;
            if wants(*a) {
                let vb = val(*b);
                let mut da = Vec::with_capacity(g.len());
                for ch in 0..c {
                    da.extend(
                        g.data()[ch * plane..(ch + 1) * plane]
                            .iter()
                            .zip(vb.data())
                            .map(|(&gv, &y)| gv * y),
                    );
                }
                add_into(
                    &mut grads[a.0],
                    Tensor::from_vec(val(*a).shape().to_vec(), da).unwrap(),
                );
            }
            if wants(*b) {
                let va = val(*a);
                let mut db = vec![T::zero(); plane];
                for ch in 0..c {
                    for (slot, (&gv, &x)) in db.iter_mut().zip(
                        g.data()[ch * plane..(ch + 1) * plane]
                            .iter()
                            .zip(va.data()[ch * plane..(ch + 1) * plane].iter()),
                    ) {
                        *slot = *slot + gv * x;
                    }
                }
                add_into(
                    &mut grads[b.0],
                    Tensor::from_vec(val(*b).shape().to_vec(), db).unwrap(),
                );
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            fused_relu,
        } => {
            let vx = val(*x);
            let vw = val(*w);
            let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (cout, k) = (vw.shape()[0], vw.shape()[2]);
            // With the fused ReLU, gradients pass only where the output is
            // strictly positive.
            let gated;
            let g_eff: &Tensor<T> = if *fused_relu {
                let out = &nodes[id].value;
                gated = zip_map(g, out, |gv, o| if o > T::zero() { gv } else { T::zero() });
                &gated
            } else {
                g
            };
            if wants(*x) {
                let mut dx = vec![T::zero(); cin * h * wd];
                kernels::conv2d_backward_input(
                    g_eff.data(),
                    vw.data(),
                    cin,
                    cout,
                    h,
                    wd,
                    k,
                    &mut dx,
                );
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(vec![cin, h, wd], dx).unwrap(),
                );
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); cout * cin * k * k];
                kernels::conv2d_backward_weight(g_eff.data(), vx.data(), cin, h, wd, k, &mut dw);
                add_into(
                    &mut grads[w.0],
                    Tensor::from_vec(vec![cout, cin, k, k], dw).unwrap(),
                );
            }
            if wants(*b) {
                let mut db = vec![T::zero(); cout];
                for o in 0..cout {
                    db[o] = g_eff.data()[o * h * wd..(o + 1) * h * wd]
                        .iter()
                        .copied()
                        .sum();
                }
                add_into(&mut grads[b.0], Tensor::from_vec(vec![cout], db).unwrap());
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if wants(*x) {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src as usize] = dx[src as usize] + gv;
                }
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(val(*x).shape().to_vec(), dx).unwrap(),
                );
            }
        }
        Op::Upsample { x } => {
            if wants(*x) {
                let vx = val(*x);
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (h_out, w_out) = (nodes[id].value.shape()[1], nodes[id].value.shape()[2]);
                let ys = kernels::resample_axis(h_out, h);
                let xs = kernels::resample_axis(w_out, w);
                let gdata = g.data();
                let mut dx = vec![T::zero(); c * h * w];
                exec::fill_chunks(&mut dx, h * w, |ch, piece| {
                    kernels::upsample_plane_grad(
                        &gdata[ch * h_out * w_out..(ch + 1) * h_out * w_out],
                        w,
                        &ys,
                        &xs,
                        piece,
                    );
                });
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(vec![c, h, w], dx).unwrap(),
                );
            }
        }
        Op::PointSample { x, pts } => {
            if wants(*x) {
                let vx = val(*x);
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let mut dx = vec![T::zero(); c * h * w];
                kernels::point_sample_grad(g.data(), c, h, w, pts, &mut dx);
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(vec![c, h, w], dx).unwrap(),
                );
            }
        }
        Op::Concat0(parts) => {
            let mut offset = 0usize;
            for &p in parts {
                let len = val(p).len();
                if wants(p) {
                    let piece = g.data()[offset..offset + len].to_vec();
                    add_into(
                        &mut grads[p.0],
                        Tensor::from_vec(val(p).shape().to_vec(), piece).unwrap(),
                    );
                }
                offset += len;
            }
        }
        Op::SelectRows0 { x, idx } => {
            if wants(*x) {
                let vx = val(*x);
                let plane: usize = vx.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); vx.len()];
                for (j, &r) in idx.iter().enumerate() {
                    for (slot, &gv) in dx[r * plane..(r + 1) * plane]
                        .iter_mut()
                        .zip(&g.data()[j * plane..(j + 1) * plane])
                    {
                        *slot = *slot + gv;
                    }
                }
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(vx.shape().to_vec(), dx).unwrap(),
                );
            }
        }
        Op::ScatterRows0 { x, idx } => {
            if wants(*x) {
                let vx = val(*x);
                let plane: usize = vx.shape()[1..].iter().product();
                let mut dx = Vec::with_capacity(vx.len());
                for &r in idx {
                    dx.extend_from_slice(&g.data()[r * plane..(r + 1) * plane]);
                }
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(vx.shape().to_vec(), dx).unwrap(),
                );
            }
        }
        Op::Softmax { x, axis } => {
            if wants(*x) {
                let p = &nodes[id].value;
                let (_, k, inner_len) = lane_dims(p.shape(), *axis);
                let pd = p.data();
                let gd = g.data();
                let mut dx = vec![T::zero(); p.len()];
                exec::fill_chunks(&mut dx, k * inner_len, |o, piece| {
                    let base = o * k * inner_len;
                    for i in 0..inner_len {
                        let mut dot = T::zero();
                        for j in 0..k {
                            let idx = base + j * inner_len + i;
                            dot = dot + gd[idx] * pd[idx];
                        }
                        for j in 0..k {
                            let idx = base + j * inner_len + i;
                            piece[j * inner_len + i] = pd[idx] * (gd[idx] - dot);
                        }
                    }
                });
                add_into(
                    &mut grads[x.0],
                    Tensor::from_vec(p.shape().to_vec(), dx).unwrap(),
                );
            }
        }
        Op::SumAll(a) => {
            if wants(*a) {
                let gv = g.item();
                add_into(&mut grads[a.0], Tensor::full(val(*a).shape().to_vec(), gv));
            }
        }
        Op::MeanAll(a) => {
            if wants(*a) {
                let n = T::from_f64(val(*a).len() as f64);
                let gv = g.item() / n;
                add_into(&mut grads[a.0], Tensor::full(val(*a).shape().to_vec(), gv));
            }
        }
        Op::CrossEntropyMean {
            logits,
            labels,
            probs,
        } => {
            if wants(*logits) {
                let (k, n) = (probs.shape()[0], probs.shape()[1]);
                let scale = g.item() / T::from_f64(n as f64);
                let mut dl = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    dl[l * n + i] = dl[l * n + i] - T::one();
                }
                for v in dl.iter_mut() {
                    *v = *v * scale;
                }
                add_into(
                    &mut grads[logits.0],
                    Tensor::from_vec(vec![k, n], dl).unwrap(),
                );
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}
