//! Forward and backward (vector-Jacobian) primitives for every layer kind:
//! bias-free linear and 2-d convolution, average pooling, ReLU, and the
//! softmax cross-entropy loss head.
//!
//! Convolution is plain cross-correlation with zero padding. The stride-1
//! inner loops are written as contiguous slice walks so they vectorize.

use super::{Scalar, Tensor};
use crate::error::{Result, SnnError};

/// Shape of a 2-d convolution layer. Bias-free by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { out_channels, in_channels, kernel, stride, padding }
    }

    /// Output spatial extent; the division must be exact.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        if self.kernel < 1 || self.stride < 1 {
            return Err(SnnError::Config(format!(
                "convolution kernel and stride must be >= 1, got kernel={} stride={}",
                self.kernel, self.stride
            )));
        }
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(SnnError::Config(format!(
                "kernel {} does not fit input extent {} with padding {}",
                self.kernel, input, self.padding
            )));
        }
        let span = padded - self.kernel;
        if span % self.stride != 0 {
            return Err(SnnError::Config(format!(
                "non-integer convolution output extent: ({input} + 2*{} - {}) is not divisible by stride {}",
                self.padding, self.kernel, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Valid output-column interval [lo, hi) such that
/// 0 <= ox*stride + k_off - pad < w_in.
fn col_range(w_in: usize, w_out: usize, k_off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    if w_in + pad <= k_off {
        return (0, 0);
    }
    let hi = ((w_in + pad - k_off).div_ceil(stride)).min(w_out);
    (lo, hi.max(lo))
}

/// y[b,i] = sum_j w[i,j] * x[b,j]
pub fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (xb, xin) = match x.shape() {
        [b, n] => (*b, *n),
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "linear_fwd input",
                lhs: x.shape().to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    let (wout, win) = match w.shape() {
        [o, n] => (*o, *n),
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "linear_fwd weights",
                lhs: w.shape().to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if xin != win {
        return Err(SnnError::ShapeMismatch {
            op: "linear_fwd",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[xb, wout]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for b in 0..xb {
        let xrow = &xd[b * xin..(b + 1) * xin];
        let yrow = &mut yd[b * wout..(b + 1) * wout];
        for (o, out) in yrow.iter_mut().enumerate() {
            let wrow = &wd[o * win..(o + 1) * win];
            let mut acc = T::zero();
            for (&xi, &wi) in xrow.iter().zip(wrow.iter()) {
                acc = acc + xi * wi;
            }
            *out = acc;
        }
    }
    Ok(y)
}

/// Adjoint of [`linear_fwd`]: returns (g_x, g_w).
pub fn linear_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [xb, xin] = [x.shape()[0], x.shape()[1]];
    let [wout, win] = [w.shape()[0], w.shape()[1]];
    if g_out.shape() != [xb, wout] {
        return Err(SnnError::ShapeMismatch {
            op: "linear_vjp",
            lhs: g_out.shape().to_vec(),
            rhs: vec![xb, wout],
        });
    }
    if xin != win {
        return Err(SnnError::ShapeMismatch {
            op: "linear_vjp",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut g_x = Tensor::zeros(&[xb, xin]);
    let mut g_w = Tensor::zeros(&[wout, win]);
    let xd = x.data();
    let wd = w.data();
    let gd = g_out.data();
    let gxd = g_x.data_mut();
    let gwd = g_w.data_mut();
    for b in 0..xb {
        let xrow = &xd[b * xin..(b + 1) * xin];
        let gxrow = &mut gxd[b * xin..(b + 1) * xin];
        let grow = &gd[b * wout..(b + 1) * wout];
        for (o, &g) in grow.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let wrow = &wd[o * win..(o + 1) * win];
            let gwrow = &mut gwd[o * win..(o + 1) * win];
            for i in 0..win {
                gwrow[i] = gwrow[i] + g * xrow[i];
                gxrow[i] = gxrow[i] + g * wrow[i];
            }
        }
    }
    Ok((g_x, g_w))
}

fn conv_shapes<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let [b, c, h, wid] = match x.shape() {
        [b, c, h, w] => [*b, *c, *h, *w],
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "conv2d input rank",
                lhs: x.shape().to_vec(),
                rhs: vec![0; 4],
            })
        }
    };
    if c != spec.in_channels {
        return Err(SnnError::ShapeMismatch {
            op: "conv2d channels",
            lhs: vec![c],
            rhs: vec![spec.in_channels],
        });
    }
    if w.shape() != spec.weight_shape() {
        return Err(SnnError::ShapeMismatch {
            op: "conv2d weights",
            lhs: w.shape().to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    let oh = spec.out_extent(h)?;
    let ow = spec.out_extent(wid)?;
    Ok((b, h, wid, oh, ow))
}

/// Cross-correlation with zero padding, no bias.
pub fn conv2d_fwd<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, h, wid, oh, ow) = conv_shapes(x, spec, w)?;
    let (oc, ic, k, s, p) = (
        spec.out_channels,
        spec.in_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
    );
    let mut y = Tensor::zeros(&[batch, oc, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    let x_plane = h * wid;
    let y_plane = oh * ow;
    for b in 0..batch {
        for o in 0..oc {
            let y_base = (b * oc + o) * y_plane;
            for i in 0..ic {
                let x_base = (b * ic + i) * x_plane;
                let w_base = (o * ic + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[w_base + ky * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (lo, hi) = col_range(wid, ow, kx, p, s);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let iy = iy - p;
                            let yrow = &mut yd[y_base + oy * ow + lo..y_base + oy * ow + hi];
                            if s == 1 {
                                let ix0 = lo + kx - p;
                                let xrow = &xd[x_base + iy * wid + ix0..x_base + iy * wid + ix0 + (hi - lo)];
                                for (yv, &xv) in yrow.iter_mut().zip(xrow.iter()) {
                                    *yv = *yv + wv * xv;
                                }
                            } else {
                                for (j, yv) in yrow.iter_mut().enumerate() {
                                    let ix = (lo + j) * s + kx - p;
                                    *yv = *yv + wv * xd[x_base + iy * wid + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Exact adjoint of [`conv2d_fwd`]: returns (g_x, g_w).
pub fn conv2d_vjp<T: Scalar>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    g_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, h, wid, oh, ow) = conv_shapes(x, spec, w)?;
    if g_out.shape() != [batch, spec.out_channels, oh, ow] {
        return Err(SnnError::ShapeMismatch {
            op: "conv2d_vjp cotangent",
            lhs: g_out.shape().to_vec(),
            rhs: vec![batch, spec.out_channels, oh, ow],
        });
    }
    let (oc, ic, k, s, p) = (
        spec.out_channels,
        spec.in_channels,
        spec.kernel,
        spec.stride,
        spec.padding,
    );
    let mut g_x = Tensor::zeros(x.shape());
    let mut g_w = Tensor::zeros(&spec.weight_shape());
    let xd = x.data();
    let wd = w.data();
    let gd = g_out.data();
    let gxd = g_x.data_mut();
    let gwd = g_w.data_mut();
    let x_plane = h * wid;
    let y_plane = oh * ow;
    for b in 0..batch {
        for o in 0..oc {
            let y_base = (b * oc + o) * y_plane;
            for i in 0..ic {
                let x_base = (b * ic + i) * x_plane;
                let w_base = (o * ic + i) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[w_base + ky * k + kx];
                        let (lo, hi) = col_range(wid, ow, kx, p, s);
                        if lo >= hi {
                            continue;
                        }
                        let mut w_acc = T::zero();
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let iy = iy - p;
                            let grow = &gd[y_base + oy * ow + lo..y_base + oy * ow + hi];
                            if s == 1 {
                                let ix0 = lo + kx - p;
                                let xrow = &xd[x_base + iy * wid + ix0..x_base + iy * wid + ix0 + (hi - lo)];
                                let gxrow = &mut gxd
                                    [x_base + iy * wid + ix0..x_base + iy * wid + ix0 + (hi - lo)];
                                for ((&g, &xv), gx) in
                                    grow.iter().zip(xrow.iter()).zip(gxrow.iter_mut())
                                {
                                    w_acc = w_acc + g * xv;
                                    *gx = *gx + wv * g;
                                }
                            } else {
                                for (j, &g) in grow.iter().enumerate() {
                                    let ix = (lo + j) * s + kx - p;
                                    w_acc = w_acc + g * xd[x_base + iy * wid + ix];
                                    gxd[x_base + iy * wid + ix] =
                                        gxd[x_base + iy * wid + ix] + wv * g;
                                }
                            }
                        }
                        gwd[w_base + ky * k + kx] = gwd[w_base + ky * k + kx] + w_acc;
                    }
                }
            }
        }
    }
    Ok((g_x, g_w))
}

/// Mean over non-overlapping k x k windows; stride equals the kernel and the
/// spatial extents must divide exactly (no partial windows).
pub fn avgpool_fwd<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = match x.shape() {
        [b, c, h, w] => [*b, *c, *h, *w],
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "avgpool input rank",
                lhs: x.shape().to_vec(),
                rhs: vec![0; 4],
            })
        }
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(SnnError::Config(format!(
            "avgpool kernel {k} must divide spatial extents {h}x{w} exactly"
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    let xd = x.data();
    let yd = y.data_mut();
    for plane in 0..b * c {
        let x_base = plane * h * w;
        let y_base = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    let row = x_base + (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        acc = acc + xd[row + dx];
                    }
                }
                yd[y_base + oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`avgpool_fwd`]: every input position receives its window's
/// cotangent divided by k^2.
pub fn avgpool_vjp<T: Scalar>(g_out: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [b, c, oh, ow] = match g_out.shape() {
        [b, c, h, w] => [*b, *c, *h, *w],
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "avgpool_vjp rank",
                lhs: g_out.shape().to_vec(),
                rhs: vec![0; 4],
            })
        }
    };
    if k == 0 {
        return Err(SnnError::Config("avgpool kernel must be >= 1".into()));
    }
    let (h, w) = (oh * k, ow * k);
    let inv = T::one() / T::from_usize(k * k);
    let mut g_x = Tensor::zeros(&[b, c, h, w]);
    let gd = g_out.data();
    let gxd = g_x.data_mut();
    for plane in 0..b * c {
        let g_base = plane * oh * ow;
        let x_base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gd[g_base + oy * ow + ox] * inv;
                for dy in 0..k {
                    let row = x_base + (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        gxd[row + dx] = v;
                    }
                }
            }
        }
    }
    Ok(g_x)
}

/// max(0, x)
pub fn relu_fwd<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where x > 0; the subgradient at exactly 0 is 0.
pub fn relu_vjp<T: Scalar>(x: &Tensor<T>, g_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != g_out.shape() {
        return Err(SnnError::ShapeMismatch {
            op: "relu_vjp",
            lhs: x.shape().to_vec(),
            rhs: g_out.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(g_out.data().iter())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_vec(x.shape(), data).expect("shape preserved"))
}

/// Row-wise softmax, numerically stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, n] = match logits.shape() {
        [b, n] => [*b, *n],
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "softmax rank",
                lhs: logits.shape().to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    let mut out = Tensor::zeros(&[b, n]);
    let ld = logits.data();
    let od = out.data_mut();
    for r in 0..b {
        let row = &ld[r * n..(r + 1) * n];
        let orow = &mut od[r * n..(r + 1) * n];
        let m = row.iter().fold(T::neg_infinity(), |a, &x| if x > a { x } else { a });
        let mut z = T::zero();
        for (o, &x) in orow.iter_mut().zip(row.iter()) {
            let e = (x - m).exp();
            *o = e;
            z = z + e;
        }
        for o in orow.iter_mut() {
            *o = *o / z;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the batch plus its gradient w.r.t. the logits,
/// `(softmax - one_hot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [b, n] = match logits.shape() {
        [b, n] => [*b, *n],
        _ => {
            return Err(SnnError::ShapeMismatch {
                op: "softmax_cross_entropy rank",
                lhs: logits.shape().to_vec(),
                rhs: vec![0, 0],
            })
        }
    };
    if n < 2 {
        return Err(SnnError::Config(format!(
            "softmax_cross_entropy needs at least 2 classes, got {n}"
        )));
    }
    if targets.len() != b {
        return Err(SnnError::ShapeMismatch {
            op: "softmax_cross_entropy targets",
            lhs: vec![targets.len()],
            rhs: vec![b],
        });
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(SnnError::Input(format!(
                "target {t} for sample {i} is outside [0, {n})"
            )));
        }
    }
    let mut grad = softmax(logits)?;
    let inv_b = T::one() / T::from_usize(b);
    let mut loss = T::zero();
    let gd = grad.data_mut();
    for (r, &t) in targets.iter().enumerate() {
        let p_true = gd[r * n + t];
        // p_true > 0 always holds after max-subtracted softmax
        loss = loss - p_true.ln();
        gd[r * n + t] = gd[r * n + t] - T::one();
    }
    for g in gd.iter_mut() {
        *g = *g * inv_b;
    }
    loss = loss * inv_b;
    grad.ensure_finite("softmax_cross_entropy gradient")?;
    if !loss.is_finite() {
        return Err(SnnError::NonFinite("softmax_cross_entropy loss".into()));
    }
    Ok((loss, grad))
}
