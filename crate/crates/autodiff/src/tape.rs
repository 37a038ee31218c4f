//! The recording tape and every differentiable primitive.
//!
//! Operations append a node holding the forward value plus whatever context
//! its adjoint needs; [`Tape::backward`] walks the nodes once in reverse
//! creation order, which is a valid topological order because a node can
//! only reference nodes created before it.

use crate::conv::{
    batch_to_channel_major, channel_to_batch_major, col2im, conv_output_len,
    conv_transpose_output_len, im2col, ConvGeom,
};
use crate::error::{AutodiffError, Result};
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        c_in: usize,
        x_mat: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<f64>,
        inner: usize,
        rest: usize,
        channels: usize,
    },
    Concat {
        inputs: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumTrailing {
        x: Var,
        inner: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::AvgPool { .. } => "adaptive_avg_pool2d",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumTrailing { .. } => "sum_trailing",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation for one forward/backward pass.
///
/// A tape is single-use: after [`Tape::backward`] it holds the gradients of
/// its trainable leaves and rejects a second backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
    flops: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contrib)
            .for_each(|(e, c)| *e += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            flops: 0,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations spent in matrix products and convolutions
    /// during the forward pass (multiply-add counted as 2).
    pub fn forward_flops(&self) -> u64 {
        self.flops
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns a leaf gradient.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NumericFault { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::from_vec(shape, data)?;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_broadcast(sa, sb) {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.check_broadcast(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let block = bv.len().max(1);
        let data = av
            .data()
            .chunks(block)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((av.shape().to_vec(), data))
    }

    /// `a + b`, where `b`'s shape must be a suffix of `a`'s (leading
    /// dimensions broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(shape, data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(shape, data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(shape, data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * c).collect();
        let shape = v.shape().to_vec();
        self.push(shape, data, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = v.shape().to_vec();
        self.push(shape, data, Op::Relu(a), &[a])
    }

    /// `[..., k] x [k, n] -> [..., n]`; leading dimensions of `a` are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.flops += 2 * (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[N, m, k] x [N, k, n]`, or `[N, m, k] x [N, n, k]^T`
    /// when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.flops += 2 * (batch * m * k * n) as u64;
        self.push(
            vec![batch, m, n],
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    /// 2-D cross-correlation of `x: [b, c_in, h, w]` with
    /// `kernel: [c_out, c_in, kh, kw]` (odd kernel sides), optional per-channel
    /// bias `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (kh, kw) = (sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::InvalidGeometry {
                op: "conv2d",
                reason: format!("kernel sides must be odd, got {kh}x{kw}"),
            });
        }
        let c_out = sk[0];
        let geom = self.conv_geom("conv2d", &sx, kh, kw, stride, pad)?;
        self.check_bias("conv2d", bias, c_out)?;
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let mut out_mat = vec![T::zero(); c_out * ncols];
        gemm(c_out, geom.rows(), ncols, self.value(kernel).data(), false, &cols, false, &mut out_mat, false);
        self.flops += 2 * (c_out * geom.rows() * ncols) as u64;
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (row, &bb) in out_mat.chunks_mut(ncols).zip(bd) {
                row.iter_mut().for_each(|v| *v += bb);
            }
        }
        let out = channel_to_batch_major(&out_mat, geom.batch, c_out, geom.oh * geom.ow);
        let shape = vec![geom.batch, c_out, geom.oh, geom.ow];
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                c_out,
                cols,
            },
            &inputs,
        )
    }

    /// Transposed convolution of `x: [b, c_in, h, w]` with
    /// `kernel: [c_in, c_out, kh, kw]`: the adjoint of [`Tape::conv2d`] with the
    /// same kernel, stride and padding.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (batch, c_in, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sk[1], sk[2], sk[3]);
        let bad = |axis: &str| AutodiffError::InvalidGeometry {
            op: "conv_transpose2d",
            reason: format!("empty output along {axis}"),
        };
        let oh = conv_transpose_output_len(h, kh, stride.0, pad.0).ok_or_else(|| bad("height"))?;
        let ow = conv_transpose_output_len(w, kw, stride.1, pad.1).ok_or_else(|| bad("width"))?;
        self.check_bias("conv_transpose2d", bias, c_out)?;
        let geom = ConvGeom {
            batch,
            channels: c_out,
            h: oh,
            w: ow,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            oh: h,
            ow: w,
        };
        let x_mat = batch_to_channel_major(self.value(x).data(), batch, c_in, h * w);
        let ncols = geom.cols();
        let mut cols = vec![T::zero(); geom.rows() * ncols];
        gemm(geom.rows(), c_in, ncols, self.value(kernel).data(), true, &x_mat, false, &mut cols, false);
        self.flops += 2 * (geom.rows() * c_in * ncols) as u64;
        let mut out = vec![T::zero(); batch * c_out * oh * ow];
        col2im(&cols, &geom, &mut out);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, plane) in out.chunks_mut(oh * ow).enumerate() {
                let bb = bd[i % c_out];
                plane.iter_mut().for_each(|v| *v += bb);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push(
            vec![batch, c_out, oh, ow],
            out,
            Op::ConvTranspose2d {
                x,
                kernel,
                bias,
                geom,
                c_in,
                x_mat,
            },
            &inputs,
        )
    }

    fn conv_geom(
        &self,
        op: &'static str,
        sx: &[usize],
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<ConvGeom> {
        let (h, w) = (sx[2], sx[3]);
        let oh = conv_output_len(h, kh, stride.0, pad.0);
        let ow = conv_output_len(w, kw, stride.1, pad.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(ConvGeom {
                batch: sx[0],
                channels: sx[1],
                h,
                w,
                kh,
                kw,
                sh: stride.0,
                sw: stride.1,
                ph: pad.0,
                pw: pad.1,
                oh,
                ow,
            }),
            _ => Err(AutodiffError::InvalidGeometry {
                op,
                reason: format!("{h}x{w} input, {kh}x{kw} kernel, stride {stride:?}, pad {pad:?}"),
            }),
        }
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, c_out: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: vec![c_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// 2x2 max pooling with stride 2 over the last two axes of
    /// `[b, c, h, w]`; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(AutodiffError::InvalidGeometry {
                op: "max_pool2d",
                reason: format!("need [b, c, h>=2, w>=2], got {sx:?}"),
            });
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![sx[0], sx[1], oh, ow], out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Adaptive average pooling of `[b, c, h, w]` to `[b, c, oh, ow]`; bin
    /// `i` covers `floor(i*h/oh) .. ceil((i+1)*h/oh)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (oh, ow) = out_hw;
        if sx.len() != 4 || oh == 0 || ow == 0 || sx[2] == 0 || sx[3] == 0 {
            return Err(AutodiffError::InvalidGeometry {
                op: "adaptive_avg_pool2d",
                reason: format!("input {sx:?}, output {oh}x{ow}"),
            });
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = pool_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bin(ox, w, ow);
                    let mut acc = 0.0f64;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += plane[yy * w + xx].as_f64();
                        }
                    }
                    out.push(T::lit(acc / ((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        self.push(
            vec![sx[0], sx[1], oh, ow],
            out,
            Op::AvgPool {
                x,
                planes,
                h,
                w,
                oh,
                ow,
            },
            &[x],
        )
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "softmax",
                axis,
                rank: sx.len(),
            });
        }
        let (outer, len, inner) = axis_split(&sx, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(xd[at(l)].as_f64());
                }
                let mut sum = 0.0f64;
                for l in 0..len {
                    let e = (xd[at(l)].as_f64() - mx).exp();
                    out[at(l)] = T::lit(e);
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] = T::lit(out[at(l)].as_f64() / sum);
                }
            }
        }
        self.push(sx, out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Normalizes each slice spanning axes `axis..` to zero mean and unit
    /// variance, then applies a per-index affine map along `axis`
    /// (`gain`, `bias`: `[shape[axis]]`).
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "layer_norm",
                axis,
                rank: sx.len(),
            });
        }
        let channels = sx[axis];
        for p in [gain, bias] {
            if self.shape(p) != [channels] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![channels],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis..].iter().product();
        let rest = inner / channels.max(1);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(outer);
        for o in 0..outer {
            let slice = &xd[o * inner..(o + 1) * inner];
            let mean = slice.iter().map(|v| v.as_f64()).sum::<f64>() / inner as f64;
            let var = slice
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / inner as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for (j, &v) in slice.iter().enumerate() {
                let xh = (v.as_f64() - mean) * r;
                let c = j / rest;
                xhat[o * inner + j] = T::lit(xh);
                out[o * inner + j] = T::lit(xh * gd[c].as_f64() + bd[c].as_f64());
            }
        }
        self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                inner,
                rest,
                channels,
            },
            &[x, gain, bias],
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                lens,
                outer,
                inner,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = v.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(AutodiffError::ShapeMismatch {
                op: "permute",
                lhs: sx,
                rhs: axes.to_vec(),
            });
        }
        let data = permute_data(self.value(x).data(), &sx, axes);
        let shape = axes.iter().map(|&a| sx[a]).collect();
        self.push(
            shape,
            data,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push(Vec::new(), vec![T::lit(s)], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum_f64() / v.numel().max(1) as f64;
        self.push(Vec::new(), vec![T::lit(s)], Op::MeanAll(x), &[x])
    }

    /// Sums over every axis from `axis` on; the result has shape
    /// `shape[..axis]`.
    pub fn sum_trailing(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis > sx.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "sum_trailing",
                axis,
                rank: sx.len(),
            });
        }
        let inner: usize = sx[axis..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(inner.max(1))
            .map(|c| T::lit(c.iter().map(|v| v.as_f64()).sum()))
            .collect();
        self.push(sx[..axis].to_vec(), data, Op::SumTrailing { x, inner }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Afterwards every trainable leaf
    /// that influenced the loss holds `d loss / d leaf` (see [`Tape::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::StaleTape);
        }
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = leaf_grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_vec(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        self.grads = leaf_grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by the caller"),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.wants(*b) {
                    let block = self.val(*b).len();
                    let mut gb = vec![T::zero(); block];
                    for chunk in g.chunks(block) {
                        gb.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v);
                    }
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a), self.val(*b));
                let block = bd.len();
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); block];
                    for (gc, ac) in g.chunks(block).zip(ad.chunks(block)) {
                        for ((s, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
                            *s += gv * av;
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
                if self.wants(*a) {
                    let ga = g
                        .chunks(block)
                        .flat_map(|gc| gc.iter().zip(bd).map(|(&gv, &bv)| gv * bv))
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let out = node.value.data();
                    let ga = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::MatMul(a, b) => {
                let sb = self.nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = self.val(*a).len() / k.max(1);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, &g, false, self.val(*b), true, &mut ga, false);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, self.val(*a), true, &g, false, &mut gb, false);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            &Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (self.val(a), self.val(b));
                if self.wants(a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // C = A B -> dA = G B^T ; C = A B^T -> dA = G B
                        gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                c_out,
                cols,
            } => {
                let ncols = geom.cols();
                let g_mat = batch_to_channel_major(&g, geom.batch, *c_out, geom.oh * geom.ow);
                if self.wants(*kernel) {
                    let mut gk = vec![T::zero(); c_out * geom.rows()];
                    gemm(*c_out, ncols, geom.rows(), &g_mat, false, cols, true, &mut gk, false);
                    accumulate(&mut grads[kernel.0], gk);
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let gb = g_mat
                            .chunks(ncols)
                            .map(|row| T::lit(row.iter().map(|v| v.as_f64()).sum()))
                            .collect();
                        accumulate(&mut grads[bv.0], gb);
                    }
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); geom.rows() * ncols];
                    gemm(geom.rows(), *c_out, ncols, self.val(*kernel), true, &g_mat, false, &mut gcols, false);
                    let mut gx = vec![T::zero(); self.val(*x).len()];
                    col2im(&gcols, geom, &mut gx);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ConvTranspose2d {
                x,
                kernel,
                bias,
                geom,
                c_in,
                x_mat,
            } => {
                let ncols = geom.cols();
                let gcols = im2col(&g, geom);
                if self.wants(*kernel) {
                    let mut gk = vec![T::zero(); c_in * geom.rows()];
                    gemm(*c_in, ncols, geom.rows(), x_mat, false, &gcols, true, &mut gk, false);
                    accumulate(&mut grads[kernel.0], gk);
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let c_out = geom.channels;
                        let plane = geom.h * geom.w;
                        let mut gb = vec![0.0f64; c_out];
                        for (p, chunk) in g.chunks(plane).enumerate() {
                            gb[p % c_out] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        accumulate(&mut grads[bv.0], gb.into_iter().map(T::lit).collect());
                    }
                }
                if self.wants(*x) {
                    let mut gx_mat = vec![T::zero(); c_in * ncols];
                    gemm(*c_in, geom.rows(), ncols, self.val(*kernel), false, &gcols, false, &mut gx_mat, false);
                    let gx = channel_to_batch_major(&gx_mat, geom.batch, *c_in, geom.oh * geom.ow);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); self.val(*x).len()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        gx[idx] += gv;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            &Op::AvgPool {
                x,
                planes,
                h,
                w,
                oh,
                ow,
            } => {
                if self.wants(x) {
                    let mut gx = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        for oy in 0..oh {
                            let (y0, y1) = pool_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_bin(ox, w, ow);
                                let share = g[(p * oh + oy) * ow + ox]
                                    / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[p * h * w + yy * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if self.wants(x) {
                    let y = node.value.data();
                    let mut gx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)].as_f64() * y[at(l)].as_f64()).sum();
                            for l in 0..len {
                                gx[at(l)] = T::lit(y[at(l)].as_f64() * (g[at(l)].as_f64() - dot));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                inner,
                rest,
                channels,
            } => {
                let gd = self.val(*gain);
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![0.0f64; *channels];
                    let mut gbias = vec![0.0f64; *channels];
                    for (j, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        let c = (j % inner) / rest;
                        gg[c] += gv.as_f64() * xh.as_f64();
                        gbias[c] += gv.as_f64();
                    }
                    if self.wants(*gain) {
                        accumulate(&mut grads[gain.0], gg.into_iter().map(T::lit).collect());
                    }
                    if self.wants(*bias) {
                        accumulate(&mut grads[bias.0], gbias.into_iter().map(T::lit).collect());
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (o, &r) in rstd.iter().enumerate() {
                        let range = o * inner..(o + 1) * inner;
                        let mut mean_g = 0.0f64;
                        let mut mean_gx = 0.0f64;
                        for j in range.clone() {
                            let gh = g[j].as_f64() * gd[(j % inner) / rest].as_f64();
                            mean_g += gh;
                            mean_gx += gh * xhat[j].as_f64();
                        }
                        mean_g /= *inner as f64;
                        mean_gx /= *inner as f64;
                        for j in range {
                            let gh = g[j].as_f64() * gd[(j % inner) / rest].as_f64();
                            let xh = xhat[j].as_f64();
                            gx[j] = T::lit(r * (gh - mean_g - xh * mean_gx));
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Concat {
                inputs,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + len * inner]);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let gx = permute_data(&g, node.value.shape(), &inverse);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                if self.wants(*x) {
                    let n = self.val(*x).len();
                    let v = if matches!(node.op, Op::MeanAll(..)) {
                        g[0] / T::lit(n as f64)
                    } else {
                        g[0]
                    };
                    accumulate(&mut grads[x.0], vec![v; n]);
                }
            }
            Op::SumTrailing { x, inner } => {
                if self.wants(*x) {
                    let gx = g
                        .iter()
                        .flat_map(|&v| std::iter::repeat(v).take(*inner))
                        .collect();
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
    }
}

fn pool_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}
