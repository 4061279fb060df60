//! Forward op builders. Each records a node on the shared tape.

use super::{Node, Op, Tensor, BCE_EPS};
use crate::error::{Error, Result};

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let inner = self.graph.inner.borrow();
        let src = &inner.nodes[self.id];
        let value: Vec<f64> = src.value.iter().map(|&v| f(v)).collect();
        let node = Node {
            shape: src.shape.clone(),
            value,
            requires_grad: src.requires_grad,
            grad: None,
            op,
        };
        drop(inner);
        self.graph.push(node, self.shape.clone())
    }

    fn binary_same_shape(
        &self,
        rhs: &Tensor,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.graph.same_graph(&rhs.graph)?;
        if self.shape != rhs.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id];
        let b = &inner.nodes[rhs.id];
        let value: Vec<f64> = a
            .value
            .iter()
            .zip(&b.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let node = Node {
            shape: a.shape.clone(),
            value,
            requires_grad: a.requires_grad || b.requires_grad,
            grad: None,
            op,
        };
        drop(inner);
        Ok(self.graph.push(node, self.shape.clone()))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    /// Elementwise division. Caller guarantees a nonzero denominator.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(rhs, Op::Div(self.id, rhs.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log. Domain: strictly positive values.
    pub fn ln(&self) -> Tensor {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    /// Domain: non-negative values.
    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid(self.id), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sin(&self) -> Tensor {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::MulScalar(self.id, c), |v| v * c)
    }

    /// Elementwise clamp. Gradient is masked to zero outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Multiply every element by a `[1]` tensor.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&s.graph)?;
        if s.len() != 1 {
            return Err(Error::Shape(format!(
                "scale_by expects a [1] tensor, got {:?}",
                s.shape
            )));
        }
        let sv = s.scalar_value();
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let node = Node {
            shape: x.shape.clone(),
            value: x.value.iter().map(|&v| v * sv).collect(),
            requires_grad: x.requires_grad || inner.nodes[s.id].requires_grad,
            grad: None,
            op: Op::ScaleBy { x: self.id, s: s.id },
        };
        drop(inner);
        Ok(self.graph.push(node, self.shape.clone()))
    }

    /// Add a `[1]` tensor to every element.
    pub fn offset_by(&self, s: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&s.graph)?;
        if s.len() != 1 {
            return Err(Error::Shape(format!(
                "offset_by expects a [1] tensor, got {:?}",
                s.shape
            )));
        }
        let sv = s.scalar_value();
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let node = Node {
            shape: x.shape.clone(),
            value: x.value.iter().map(|&v| v + sv).collect(),
            requires_grad: x.requires_grad || inner.nodes[s.id].requires_grad,
            grad: None,
            op: Op::OffsetBy { x: self.id, s: s.id },
        };
        drop(inner);
        Ok(self.graph.push(node, self.shape.clone()))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&rhs.graph)?;
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => {
                return Err(Error::Shape(format!(
                    "matmul lhs must be 2-D, got {:?}",
                    self.shape
                )))
            }
        };
        let (k2, n) = match rhs.shape[..] {
            [k2, n] => (k2, n),
            _ => {
                return Err(Error::Shape(format!(
                    "matmul rhs must be 2-D, got {:?}",
                    rhs.shape
                )))
            }
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents disagree: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[rhs.id].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let out = &mut value[i * n..(i + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let requires = inner.nodes[self.id].requires_grad || inner.nodes[rhs.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![m, n],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::Matmul {
                    a: self.id,
                    b: rhs.id,
                    m,
                    k,
                    n,
                },
            },
            vec![m, n],
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = match self.shape[..] {
            [r, c] => (r, c),
            _ => {
                return Err(Error::Shape(format!(
                    "transpose needs a 2-D tensor, got {:?}",
                    self.shape
                )))
            }
        };
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = x.value[i * c + j];
            }
        }
        let requires = x.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![c, r],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::Transpose2 {
                    x: self.id,
                    rows: r,
                    cols: c,
                },
            },
            vec![c, r],
        ))
    }

    /// Numerically stabilised softmax along `axis`. Outputs are in (0,1)
    /// and sum to 1 over the axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let value = softmax_forward(&x.value, &x.shape, axis);
        let requires = x.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: self.shape.clone(),
                value,
                requires_grad: requires,
                grad: None,
                op: Op::Softmax { x: self.id, axis },
            },
            self.shape.clone(),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let node = Node {
            shape: vec![1],
            value: vec![x.value.iter().sum()],
            requires_grad: x.requires_grad,
            grad: None,
            op: Op::Sum(self.id),
        };
        drop(inner);
        self.graph.push(node, vec![1])
    }

    pub fn mean(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let n = x.value.len() as f64;
        let node = Node {
            shape: vec![1],
            value: vec![x.value.iter().sum::<f64>() / n],
            requires_grad: x.requires_grad,
            grad: None,
            op: Op::Mean(self.id),
        };
        drop(inner);
        self.graph.push(node, vec![1])
    }

    /// Max over all elements, returned as a `[1]` tensor. Gradient routes
    /// to the first flat index attaining the max.
    pub fn max_all(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let (argmax, best) = x
            .value
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        let node = Node {
            shape: vec![1],
            value: vec![best],
            requires_grad: x.requires_grad,
            grad: None,
            op: Op::MaxReduce { x: self.id, argmax },
        };
        drop(inner);
        self.graph.push(node, vec![1])
    }

    /// Reinterpret the data with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let node = Node {
            shape: shape.to_vec(),
            value: x.value.clone(),
            requires_grad: x.requires_grad,
            grad: None,
            op: Op::Reshape(self.id),
        };
        drop(inner);
        Ok(self.graph.push(node, shape.to_vec()))
    }

    /// Concatenate along axis 0. All trailing extents must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat0 of zero tensors".into()))?;
        let graph = first.graph.clone();
        let tail = &first.shape[1..];
        let mut rows = 0;
        for p in parts {
            graph.same_graph(&p.graph)?;
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "concat0 trailing extents disagree: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let inner = graph.inner.borrow();
        let mut value = Vec::with_capacity(shape.iter().product());
        let mut requires = false;
        for p in parts {
            let n = &inner.nodes[p.id];
            value.extend_from_slice(&n.value);
            requires |= n.requires_grad;
        }
        let ids = parts.iter().map(|p| p.id).collect();
        drop(inner);
        Ok(graph.push(
            Node {
                shape: shape.clone(),
                value,
                requires_grad: requires,
                grad: None,
                op: Op::Concat0(ids),
            },
            shape,
        ))
    }

    /// Per-channel affine map over a `[C,H,W]` tensor:
    /// `out[c] = scale[c] * x[c] + offset[c]`.
    pub fn channel_affine(&self, scale: &Tensor, offset: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&scale.graph)?;
        self.graph.same_graph(&offset.graph)?;
        let c = match self.shape[..] {
            [c, _, _] => c,
            _ => {
                return Err(Error::Shape(format!(
                    "channel_affine needs [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        if scale.shape != [c] || offset.shape != [c] {
            return Err(Error::Shape(format!(
                "channel_affine scale/offset must be [{c}], got {:?}/{:?}",
                scale.shape, offset.shape
            )));
        }
        let hw = self.len() / c;
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let sv = &inner.nodes[scale.id].value;
        let ov = &inner.nodes[offset.id].value;
        let mut value = Vec::with_capacity(x.value.len());
        for ch in 0..c {
            let (s, o) = (sv[ch], ov[ch]);
            value.extend(x.value[ch * hw..(ch + 1) * hw].iter().map(|&v| s * v + o));
        }
        let requires = x.requires_grad
            || inner.nodes[scale.id].requires_grad
            || inner.nodes[offset.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: self.shape.clone(),
                value,
                requires_grad: requires,
                grad: None,
                op: Op::ChannelAffine {
                    x: self.id,
                    scale: scale.id,
                    offset: offset.id,
                },
            },
            self.shape.clone(),
        ))
    }

    /// 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,k,k]`.
    /// Output extent per side: `floor((H + 2*pad - k)/stride) + 1`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        self.graph.same_graph(&weight.graph)?;
        let (ci, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d input must be [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        let (co, ci2, kh, kw) = match weight.shape[..] {
            [co, ci2, kh, kw] => (co, ci2, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d weight must be [Co,Ci,k,k], got {:?}",
                    weight.shape
                )))
            }
        };
        if ci != ci2 || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                weight.shape, self.shape
            )));
        }
        if kh % 2 == 0 {
            return Err(Error::ParamRange(format!("conv2d kernel must be odd, got {kh}")));
        }
        if stride == 0 {
            return Err(Error::ParamRange("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let wt = &inner.nodes[weight.id].value;
        let value = conv2d_forward(x, wt, ci, h, w, co, kh, stride, pad, oh, ow);
        let requires =
            inner.nodes[self.id].requires_grad || inner.nodes[weight.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![co, oh, ow],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::Conv2d {
                    x: self.id,
                    w: weight.id,
                    stride,
                    pad,
                },
            },
            vec![co, oh, ow],
        ))
    }

    /// `out[c,h,w] = x[c,h,w] + b[c]` for `[C,H,W]` input and `[C]` bias.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&bias.graph)?;
        let c = match self.shape[..] {
            [c, _, _] => c,
            _ => {
                return Err(Error::Shape(format!(
                    "add_channel_bias needs [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        if bias.shape != [c] {
            return Err(Error::Shape(format!(
                "bias must be [{c}], got {:?}",
                bias.shape
            )));
        }
        let hw = self.len() / c;
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let bv = &inner.nodes[bias.id].value;
        let mut value = Vec::with_capacity(x.value.len());
        for ch in 0..c {
            let b = bv[ch];
            value.extend(x.value[ch * hw..(ch + 1) * hw].iter().map(|&v| v + b));
        }
        let requires = x.requires_grad || inner.nodes[bias.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: self.shape.clone(),
                value,
                requires_grad: requires,
                grad: None,
                op: Op::AddChannelBias {
                    x: self.id,
                    b: bias.id,
                },
            },
            self.shape.clone(),
        ))
    }

    /// 2x2 average pooling with stride 2; extents must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (c, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "avg_pool2 needs [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let mut value = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    value[ch * oh * ow + oy * ow + ox] =
                        0.25 * (x.value[base] + x.value[base + 1] + x.value[base + w] + x.value[base + w + 1]);
                }
            }
        }
        let requires = x.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![c, oh, ow],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::AvgPool2(self.id),
            },
            vec![c, oh, ow],
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` tensor.
    pub fn upsample_nearest2(&self) -> Result<Tensor> {
        let (c, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "upsample_nearest2 needs [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        let (oh, ow) = (2 * h, 2 * w);
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id];
        let mut value = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    value[ch * oh * ow + y * ow + xo] = x.value[ch * h * w + (y / 2) * w + xo / 2];
                }
            }
        }
        let requires = x.requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![c, oh, ow],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::UpsampleNearest2(self.id),
            },
            vec![c, oh, ow],
        ))
    }

    /// Bilinear sampling of a `[C,H,W]` tensor at a `[H',W',2]` grid of
    /// normalized `(x, y)` coordinates in `[-1,1]` (pixel centers at
    /// `(2i+1)/N - 1`). Out-of-range taps read zero. Differentiable in
    /// both the input and the grid.
    pub fn bilinear_sample(&self, grid: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&grid.graph)?;
        let (c, h, w) = match self.shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "bilinear_sample input must be [C,H,W], got {:?}",
                    self.shape
                )))
            }
        };
        let (gh, gw) = match grid.shape[..] {
            [gh, gw, 2] => (gh, gw),
            _ => {
                return Err(Error::Shape(format!(
                    "grid must be [H',W',2], got {:?}",
                    grid.shape
                )))
            }
        };
        let inner = self.graph.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let g = &inner.nodes[grid.id].value;
        let mut value = vec![0.0; c * gh * gw];
        for p in 0..gh * gw {
            let px = 0.5 * ((g[2 * p] + 1.0) * w as f64 - 1.0);
            let py = 0.5 * ((g[2 * p + 1] + 1.0) * h as f64 - 1.0);
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                let tap = |xx: i64, yy: i64| -> f64 {
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        0.0
                    } else {
                        plane[yy as usize * w + xx as usize]
                    }
                };
                value[ch * gh * gw + p] = (1.0 - fx) * (1.0 - fy) * tap(x0, y0)
                    + fx * (1.0 - fy) * tap(x0 + 1, y0)
                    + (1.0 - fx) * fy * tap(x0, y0 + 1)
                    + fx * fy * tap(x0 + 1, y0 + 1);
            }
        }
        let requires =
            inner.nodes[self.id].requires_grad || inner.nodes[grid.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![c, gh, gw],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::BilinearSample {
                    x: self.id,
                    grid: grid.id,
                },
            },
            vec![c, gh, gw],
        ))
    }

    /// Zip two `[n]` tensors into `[n,2]`: `out[i] = (a[i], b[i])`.
    pub fn interleave2(&self, b: &Tensor) -> Result<Tensor> {
        self.graph.same_graph(&b.graph)?;
        if self.shape.len() != 1 || self.shape != b.shape {
            return Err(Error::Shape(format!(
                "interleave2 needs matching 1-D tensors, got {:?} and {:?}",
                self.shape, b.shape
            )));
        }
        let n = self.shape[0];
        let inner = self.graph.inner.borrow();
        let av = &inner.nodes[self.id].value;
        let bv = &inner.nodes[b.id].value;
        let mut value = Vec::with_capacity(2 * n);
        for i in 0..n {
            value.push(av[i]);
            value.push(bv[i]);
        }
        let requires = inner.nodes[self.id].requires_grad || inner.nodes[b.id].requires_grad;
        drop(inner);
        Ok(self.graph.push(
            Node {
                shape: vec![n, 2],
                value,
                requires_grad: requires,
                grad: None,
                op: Op::Interleave2 { a: self.id, b: b.id },
            },
            vec![n, 2],
        ))
    }

    /// Sum of elementwise products of two same-shape tensors, as `[1]`.
    pub fn dot(&self, rhs: &Tensor) -> Result<Tensor> {
        Ok(self.mul(rhs)?.sum())
    }

    /// Euclidean norm as a `[1]` tensor. Domain: gradient undefined at the
    /// zero vector; callers guard for that.
    pub fn norm(&self) -> Tensor {
        self.mul(self).expect("same shape").sum().sqrt()
    }
}

/// Mean binary cross-entropy with clamped predictions:
/// `mean(-(t*ln(p) + (1-t)*ln(1-p)))`, `p = clamp(pred, 1e-7, 1 - 1e-7)`.
pub fn loss_bce(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "bce on {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = target.mul(&p.ln())?;
    let neg = target.neg().add_scalar(1.0).mul(&p.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(&neg)?.neg().mean())
}

/// Mean squared error.
pub fn loss_mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.mean())
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * axis_len * inner + j * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..axis_len {
                mx = mx.max(x[idx(j)]);
            }
            let mut z = 0.0;
            for j in 0..axis_len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..axis_len {
                out[idx(j)] /= z;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    wt: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        for ic in 0..ci {
            let plane = &x[ic * h * w..(ic + 1) * h * w];
            let kbase = oc * ci * k * k + ic * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[kbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut out[oc * oh * ow + oy * ow..oc * oh * ow + (oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix >= 0 && ix < w as i64 {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
