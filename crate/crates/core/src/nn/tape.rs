//! Operation tape: forward evaluation with recorded reverse-mode gradients.
//!
//! A [`Tape`] owns every intermediate [`Tensor`] produced during a forward
//! pass. Each op appends a node referencing its inputs by [`Var`] index, so
//! node order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep. Gradients accumulate additively, which makes shared
//! subexpressions (skip connections, reused parameters) correct for free.

use matrixmultiply::dgemm;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Log clamp inside the cross-entropy: `log(p + BCE_EPSILON)`. Stated as a
/// constant so loss values are reproducible down to the last bit.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    Relu {
        x: Var,
    },
    Add {
        x: Var,
        y: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    AvgPoolGlobal {
        x: Var,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    Softmax2 {
        x: Var,
    },
    BceLoss {
        probs: Var,
        targets: Tensor,
        pos_weight: f64,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
}

/// Recorded computation graph. Build one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded tensor.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, flat.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Gradient reshaped to the tensor's own shape.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].value.shape(), self.nodes[v.0].grad.clone())
            .expect("grad buffer matches value shape")
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    // -- forward ops --------------------------------------------------------

    /// 2-D cross-correlation with zero padding, stride, and dilation.
    ///
    /// `w` has shape `(out_ch, in_ch, kh, kw)` with odd `kh`, `kw`; `b` has
    /// shape `(1, out_ch, 1, 1)`. Output spatial size follows
    /// `floor((H + 2·pad − dilation·(k−1) − 1) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Shape(format!(
                "conv2d stride {stride} and dilation {dilation} must be >= 1"
            )));
        }
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let bs = self.value(b).shape();
        let [batch, in_c, h, wdt] = xs;
        let [out_c, w_in_c, kh, kw] = ws;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if w_in_c != in_c {
            return Err(Error::Shape(format!(
                "conv2d input has {in_c} channels but weight expects {w_in_c}"
            )));
        }
        if bs != [1, out_c, 1, 1] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {bs:?} does not match {out_c} output channels"
            )));
        }
        let out_h = conv_out_size(h, kh, stride, padding, dilation)?;
        let out_w = conv_out_size(wdt, kw, stride, padding, dilation)?;

        let k = in_c * kh * kw;
        let l = out_h * out_w;
        let mut cols = vec![0.0; k * l];
        let mut out = Tensor::zeros([batch, out_c, out_h, out_w]);
        for bi in 0..batch {
            im2col(
                self.value(x),
                bi,
                kh,
                kw,
                stride,
                padding,
                dilation,
                out_h,
                out_w,
                &mut cols,
            );
            let dst_start = bi * out_c * l;
            gemm_rowmajor(
                out_c,
                k,
                l,
                1.0,
                self.value(w).data(),
                (k as isize, 1),
                &cols,
                (l as isize, 1),
                0.0,
                &mut out.data_mut()[dst_start..dst_start + out_c * l],
            );
            for oc in 0..out_c {
                let bias = self.value(b).data()[oc];
                for v in &mut out.data_mut()[dst_start + oc * l..dst_start + (oc + 1) * l] {
                    *v += bias;
                }
            }
        }
        out.check_finite("conv2d")?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                dilation,
            },
            out,
        ))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let out = Tensor::new(
            value.shape(),
            value.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        Ok(self.push(Op::Relu { x }, out))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.shape() != yv.shape() {
            return Err(Error::Shape(format!(
                "add shapes {:?} vs {:?}",
                xv.shape(),
                yv.shape()
            )));
        }
        let data = xv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        out.check_finite("add")?;
        Ok(self.push(Op::Add { x, y }, out))
    }

    /// Concatenate along the channel axis; batch and spatial dims must match.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyBatch)?;
        let [batch, _, h, w] = self.value(first).shape();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != batch || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!(
                    "concat_channels mixes {:?} with batch {batch}, {h}x{w}",
                    s
                )));
            }
            total_c += s[1];
        }
        let mut out = Tensor::zeros([batch, total_c, h, w]);
        let hw = h * w;
        for bi in 0..batch {
            let mut c_off = 0;
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                let src = &pv.data()[bi * pc * hw..(bi + 1) * pc * hw];
                let dst_start = (bi * total_c + c_off) * hw;
                out.data_mut()[dst_start..dst_start + pc * hw].copy_from_slice(src);
                c_off += pc;
            }
        }
        Ok(self.push(
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            out,
        ))
    }

    /// Per-channel spatial mean, broadcast back over `H×W` (output shape
    /// equals input shape).
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [batch, c, h, w] = xv.shape();
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros([batch, c, h, w]);
        for bi in 0..batch {
            for ci in 0..c {
                let mean = xv.plane(bi, ci).iter().sum::<f64>() / hw;
                let start = (bi * c + ci) * h * w;
                out.data_mut()[start..start + h * w].fill(mean);
            }
        }
        out.check_finite("avg_pool_global")?;
        Ok(self.push(Op::AvgPoolGlobal { x }, out))
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be >= 1".into()));
        }
        let xv = self.value(x);
        let [batch, c, h, w] = xv.shape();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros([batch, c, oh, ow]);
        for bi in 0..batch {
            for ci in 0..c {
                for y in 0..oh {
                    let sy = y / factor;
                    for xx in 0..ow {
                        *out.at_mut(bi, ci, y, xx) = xv.at(bi, ci, sy, xx / factor);
                    }
                }
            }
        }
        Ok(self.push(Op::UpsampleNearest { x, factor }, out))
    }

    /// Softmax over exactly two channels, stabilized by max subtraction.
    /// Channel 0 of the output is the target likelihood `P_t`, channel 1 the
    /// background likelihood `P_b`; they sum to 1 at every pixel.
    pub fn softmax2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [batch, c, h, w] = xv.shape();
        if c != 2 {
            return Err(Error::Shape(format!(
                "softmax2 requires exactly 2 channels, got {c}"
            )));
        }
        let mut out = Tensor::zeros([batch, 2, h, w]);
        for bi in 0..batch {
            for y in 0..h {
                for xx in 0..w {
                    let z0 = xv.at(bi, 0, y, xx);
                    let z1 = xv.at(bi, 1, y, xx);
                    let m = z0.max(z1);
                    let e0 = (z0 - m).exp();
                    let e1 = (z1 - m).exp();
                    let sum = e0 + e1;
                    *out.at_mut(bi, 0, y, xx) = e0 / sum;
                    *out.at_mut(bi, 1, y, xx) = e1 / sum;
                }
            }
        }
        out.check_finite("softmax2")?;
        Ok(self.push(Op::Softmax2 { x }, out))
    }

    /// Weighted binary cross-entropy over a two-channel likelihood tensor.
    ///
    /// `probs` is a `(B, 2, H, W)` softmax output (channel 0 = target);
    /// `targets` is `(B, 1, H, W)` with values in `{0, 1}`. Returns the
    /// scalar `−(1/|Ω|)·Σ [pos_weight·y·log(P_t+ε) + (1−y)·log(P_b+ε)]`
    /// with `|Ω| = B·H·W` and `ε =` [`BCE_EPSILON`].
    pub fn bce_loss(&mut self, probs: Var, targets: &Tensor, pos_weight: f64) -> Result<Var> {
        let pv = self.value(probs);
        let [batch, c, h, w] = pv.shape();
        if c != 2 {
            return Err(Error::Shape(format!(
                "bce_loss requires 2 probability channels, got {c}"
            )));
        }
        if targets.shape() != [batch, 1, h, w] {
            return Err(Error::DimensionMismatch(format!(
                "bce_loss targets {:?} vs probs {:?}",
                targets.shape(),
                pv.shape()
            )));
        }
        if !(pos_weight.is_finite() && pos_weight > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pos_weight must be finite and > 0, got {pos_weight}"
            )));
        }
        if let Some(&y) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::MaskNotBinary { value: y });
        }
        let n = (batch * h * w) as f64;
        let mut acc = 0.0;
        for bi in 0..batch {
            for y in 0..h {
                for xx in 0..w {
                    let t = targets.at(bi, 0, y, xx);
                    let pt = pv.at(bi, 0, y, xx);
                    let pb = pv.at(bi, 1, y, xx);
                    acc += pos_weight * t * (pt + BCE_EPSILON).ln()
                        + (1.0 - t) * (pb + BCE_EPSILON).ln();
                }
            }
        }
        let out = Tensor::scalar(-acc / n);
        out.check_finite("bce_loss")?;
        Ok(self.push(
            Op::BceLoss {
                probs,
                targets: targets.clone(),
                pos_weight,
            },
            out,
        ))
    }

    /// Scalar dot product `Σ x·weights`, the generic readout used by the
    /// finite-difference harness to check non-scalar ops.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum shapes {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let dot: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let out = Tensor::scalar(dot);
        out.check_finite("weighted_sum")?;
        Ok(self.push(
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            out,
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Fills every node's gradient buffer;
    /// leaves hold `dloss/dleaf` afterwards. Gradients from earlier
    /// `backward` calls on the same tape accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward source must be scalar, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..=loss.0).rev() {
            let gout = std::mem::take(&mut self.nodes[i].grad);
            let (inputs, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                    dilation,
                } => backward_conv2d(
                    inputs, *x, *w, *b, *stride, *padding, *dilation, &node.value, &gout,
                ),
                Op::Relu { x } => {
                    let xn = &mut inputs[x.0];
                    for (i, g) in gout.iter().enumerate() {
                        if xn.value.data()[i] > 0.0 {
                            xn.grad[i] += g;
                        }
                    }
                }
                Op::Add { x, y } => {
                    for (gi, g) in inputs[x.0].grad.iter_mut().zip(&gout) {
                        *gi += g;
                    }
                    for (gi, g) in inputs[y.0].grad.iter_mut().zip(&gout) {
                        *gi += g;
                    }
                }
                Op::ConcatChannels { parts } => {
                    let [batch, total_c, h, w] = node.value.shape();
                    let hw = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let pn = &mut inputs[p.0];
                        let pc = pn.value.shape()[1];
                        for bi in 0..batch {
                            let src = (bi * total_c + c_off) * hw;
                            let dst = bi * pc * hw;
                            for j in 0..pc * hw {
                                pn.grad[dst + j] += gout[src + j];
                            }
                        }
                        c_off += pc;
                    }
                }
                Op::AvgPoolGlobal { x } => {
                    let xn = &mut inputs[x.0];
                    let [batch, c, h, w] = xn.value.shape();
                    let hw = h * w;
                    for bi in 0..batch {
                        for ci in 0..c {
                            let start = (bi * c + ci) * hw;
                            let gsum: f64 = gout[start..start + hw].iter().sum();
                            let share = gsum / hw as f64;
                            for gi in &mut xn.grad[start..start + hw] {
                                *gi += share;
                            }
                        }
                    }
                }
                Op::UpsampleNearest { x, factor } => {
                    let f = *factor;
                    let xn = &mut inputs[x.0];
                    let [batch, c, h, w] = xn.value.shape();
                    let (oh, ow) = (h * f, w * f);
                    for bi in 0..batch {
                        for ci in 0..c {
                            for y in 0..oh {
                                let base_out = ((bi * c + ci) * oh + y) * ow;
                                let base_in = ((bi * c + ci) * h + y / f) * w;
                                for xx in 0..ow {
                                    xn.grad[base_in + xx / f] += gout[base_out + xx];
                                }
                            }
                        }
                    }
                }
                Op::Softmax2 { x } => {
                    let xn = &mut inputs[x.0];
                    let [batch, _, h, w] = xn.value.shape();
                    let hw = h * w;
                    for bi in 0..batch {
                        for j in 0..hw {
                            let i0 = bi * 2 * hw + j;
                            let i1 = i0 + hw;
                            let (p0, p1) = (node.value.data()[i0], node.value.data()[i1]);
                            let pp = p0 * p1;
                            xn.grad[i0] += pp * (gout[i0] - gout[i1]);
                            xn.grad[i1] += pp * (gout[i1] - gout[i0]);
                        }
                    }
                }
                Op::BceLoss {
                    probs,
                    targets,
                    pos_weight,
                } => {
                    let g = gout[0];
                    let pn = &mut inputs[probs.0];
                    let [batch, _, h, w] = pn.value.shape();
                    let hw = h * w;
                    let n = (batch * hw) as f64;
                    for bi in 0..batch {
                        for j in 0..hw {
                            let i0 = bi * 2 * hw + j;
                            let i1 = i0 + hw;
                            let t = targets.data()[bi * hw + j];
                            let pt = pn.value.data()[i0];
                            let pb = pn.value.data()[i1];
                            pn.grad[i0] += g * (-pos_weight * t / (pt + BCE_EPSILON)) / n;
                            pn.grad[i1] += g * (-(1.0 - t) / (pb + BCE_EPSILON)) / n;
                        }
                    }
                }
                Op::WeightedSum { x, weights } => {
                    let g = gout[0];
                    let xn = &mut inputs[x.0];
                    for (gi, wv) in xn.grad.iter_mut().zip(weights.data()) {
                        *gi += g * wv;
                    }
                }
            }
            self.nodes[i].grad = gout;
        }
        Ok(())
    }
}

/// `floor((size + 2·pad − dilation·(k−1) − 1)/stride) + 1`, rejecting
/// configurations with no valid output position.
fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = size + 2 * pad;
    if padded < span {
        return Err(Error::Shape(format!(
            "kernel span {span} exceeds padded input {padded}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// Gather one batch item's conv patches into a `(in_c·kh·kw) × (out_h·out_w)`
/// row-major matrix; out-of-bounds taps are zero (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Tensor,
    bi: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
    cols: &mut [f64],
) {
    let [_, in_c, h, w] = x.shape();
    let l = out_h * out_w;
    let mut row = 0;
    for ic in 0..in_c {
        let plane = x.plane(bi, ic);
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * l..(row + 1) * l];
                row += 1;
                for oy in 0..out_h {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    let seg = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in seg.iter_mut().enumerate() {
                        let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns gradient back to the input gradient (adjoint of
/// [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    grad_cols: &[f64],
    bi: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_h: usize,
    out_w: usize,
    shape: [usize; 4],
    grad_x: &mut [f64],
) {
    let [_, in_c, h, w] = shape;
    let l = out_h * out_w;
    let mut row = 0;
    for ic in 0..in_c {
        let plane_start = (bi * in_c + ic) * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &grad_cols[row * l..(row + 1) * l];
                row += 1;
                for oy in 0..out_h {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_start = plane_start + iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            grad_x[row_start + ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_conv2d(
    inputs: &mut [Node],
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
    dilation: usize,
    out: &Tensor,
    gout: &[f64],
) {
    let xshape = inputs[x.0].value.shape();
    let wshape = inputs[w.0].value.shape();
    let [batch, in_c, _, _] = xshape;
    let [out_c, _, kh, kw] = wshape;
    let [_, _, out_h, out_w] = out.shape();
    let k = in_c * kh * kw;
    let l = out_h * out_w;

    // Bias: sum the output gradient over batch and spatial positions.
    for bi in 0..batch {
        for oc in 0..out_c {
            let start = (bi * out_c + oc) * l;
            inputs[b.0].grad[oc] += gout[start..start + l].iter().sum::<f64>();
        }
    }

    let mut cols = vec![0.0; k * l];
    let mut grad_cols = vec![0.0; k * l];
    for bi in 0..batch {
        let g_b = &gout[bi * out_c * l..(bi + 1) * out_c * l];

        // Weight: grad_W += G · colsᵀ  (out_c×L)·(L×K).
        im2col(
            &inputs[x.0].value,
            bi,
            kh,
            kw,
            stride,
            padding,
            dilation,
            out_h,
            out_w,
            &mut cols,
        );
        gemm_rowmajor(
            out_c,
            l,
            k,
            1.0,
            g_b,
            (l as isize, 1),
            &cols,
            (1, l as isize),
            1.0,
            &mut inputs[w.0].grad,
        );

        // Input: grad_cols = Wᵀ · G  (K×out_c)·(out_c×L), then scatter.
        gemm_rowmajor(
            k,
            out_c,
            l,
            1.0,
            inputs[w.0].value.data(),
            (1, k as isize),
            g_b,
            (l as isize, 1),
            0.0,
            &mut grad_cols,
        );
        col2im_add(
            &grad_cols,
            bi,
            kh,
            kw,
            stride,
            padding,
            dilation,
            out_h,
            out_w,
            xshape,
            &mut inputs[x.0].grad,
        );
    }
}

/// Safe wrapper over `matrixmultiply::dgemm`:
/// `C(m×n) = alpha·A(m×k)·B(k×n) + beta·C` with explicit (row, col) strides
/// for A and B; C is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
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
