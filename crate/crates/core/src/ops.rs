//! Forward and backward kernels for the dense layers.
//!
//! Every kernel accepts a single sample (`[C, H, W]`, `[D]`) or a batch with a
//! leading axis (`[N, C, H, W]`, `[N, D]`). The tape in [`crate::tape`] wires
//! these into a differentiable graph; the free functions here are also usable
//! directly for inference.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * a @ b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index the kernel touches.
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
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Interprets a feature-map shape as `(N, C, H, W)`.
pub(crate) fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [C,H,W] or [N,C,H,W], got {:?}", shape),
        )),
    }
}

fn with_batch(batched: bool, n: usize, rest: &[usize]) -> Vec<usize> {
    let mut shape = Vec::with_capacity(rest.len() + 1);
    if batched {
        shape.push(n);
    }
    shape.extend_from_slice(rest);
    shape
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) fn conv_geometry(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let (n, c_in, h, w) = nchw("conv2d", input)?;
    let [c_out, wc_in, kh, kw] = *weight else {
        return Err(Error::shape(
            "conv2d",
            format!("weight must be [C_out,C_in,kH,kW], got {:?}", weight),
        ));
    };
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channel axis is {} but weight C_in axis is {}",
                c_in, wc_in
            ),
        ));
    }
    if bias != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias must be [{}] to match weight C_out axis, got {:?}",
                c_out, bias
            ),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} does not fit padded input {}x{} (H,W axes, pad {})",
                kh, kw, h, w, pad
            ),
        ));
    }
    Ok(ConvGeometry {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

/// Unfolds input patches into a `[C_in*kH*kW, N*H'*W']` matrix.
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let ncols = g.cols();
    let mut col = vec![0.0; g.patch() * ncols];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let dst = &mut col[row * ncols + n * p..][..p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let out_row = &mut dst[oy * g.ow..][..g.ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(g: &ConvGeometry, col: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let ncols = g.cols();
    let mut x = vec![0.0; g.n * g.c_in * g.h * g.w];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &mut x[(n * g.c_in + c) * g.h * g.w..][..g.h * g.w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let src = &col[row * ncols + n * p..][..p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution output plus the unfolded patch matrix kept for the backward pass.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>, ConvGeometry)> {
    let g = conv_geometry(input.shape(), weight.shape(), bias.shape(), stride, pad)?;
    let col = im2col(&g, input.data());
    let p = g.oh * g.ow;
    let ncols = g.cols();
    let mut tmp = vec![0.0; g.c_out * ncols];
    gemm(
        g.c_out,
        g.patch(),
        ncols,
        weight.data(),
        (g.patch(), 1),
        &col,
        (ncols, 1),
        0.0,
        &mut tmp,
        (ncols, 1),
    );
    let mut out = vec![0.0; g.n * g.c_out * p];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let b = bias.data()[co];
            let src = &tmp[co * ncols + n * p..][..p];
            let dst = &mut out[(n * g.c_out + co) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    let shape = with_batch(input.rank() == 4, g.n, &[g.c_out, g.oh, g.ow]);
    Ok((Tensor::new(shape, out)?, col, g))
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv2d_forward(input, weight, bias, stride, pad).map(|(out, _, _)| out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    col: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> ConvGrads {
    let p = g.oh * g.ow;
    let ncols = g.cols();
    let patch = g.patch();
    let mut dt = vec![0.0; g.c_out * ncols];
    let mut db = vec![0.0; g.c_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let src = &grad_out[(n * g.c_out + co) * p..][..p];
            db[co] += src.iter().sum::<f64>();
            dt[co * ncols + n * p..][..p].copy_from_slice(src);
        }
    }
    let mut dw = vec![0.0; g.c_out * patch];
    gemm(
        g.c_out,
        ncols,
        patch,
        &dt,
        (ncols, 1),
        col,
        (1, ncols),
        0.0,
        &mut dw,
        (patch, 1),
    );
    let input = need_input.then(|| {
        let mut dcol = vec![0.0; patch * ncols];
        gemm(
            patch,
            g.c_out,
            ncols,
            weight,
            (1, patch),
            &dt,
            (ncols, 1),
            0.0,
            &mut dcol,
            (ncols, 1),
        );
        col2im(g, &dcol)
    });
    ConvGrads {
        input,
        weight: dw,
        bias: db,
    }
}

fn fc_dims(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, d) = match *input {
        [d] => (1, d),
        [n, d] => (n, d),
        _ => {
            return Err(Error::shape(
                "fully_connected",
                format!("input must be [D] or [N,D], got {:?}", input),
            ))
        }
    };
    let [k, wd] = *weight else {
        return Err(Error::shape(
            "fully_connected",
            format!("weight must be [K,D], got {:?}", weight),
        ));
    };
    if wd != d {
        return Err(Error::shape(
            "fully_connected",
            format!("weight D axis is {} but input length is {}", wd, d),
        ));
    }
    if bias != [k] {
        return Err(Error::shape(
            "fully_connected",
            format!(
                "bias must be [{}] to match weight K axis, got {:?}",
                k, bias
            ),
        ));
    }
    Ok((n, d, k))
}

pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d, k) = fc_dims(input.shape(), weight.shape(), bias.shape())?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * k);
    for row in x.chunks_exact(d.max(1)).take(n) {
        for (kk, wrow) in w.chunks_exact(d.max(1)).take(k).enumerate() {
            let dot: f64 = if d == 0 {
                0.0
            } else {
                row.iter().zip(wrow).map(|(a, b)| a * b).sum()
            };
            out.push(dot + b[kk]);
        }
    }
    let shape = with_batch(input.rank() == 2, n, &[k]);
    Tensor::new(shape, out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn fully_connected_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = weight.shape()[0];
    let d = weight.shape()[1];
    let n = input.numel() / d.max(1);
    let (x, w) = (input.data(), weight.data());
    let mut dx = vec![0.0; n * d];
    let mut dw = vec![0.0; k * d];
    let mut db = vec![0.0; k];
    for i in 0..n {
        for kk in 0..k {
            let go = grad_out[i * k + kk];
            db[kk] += go;
            if go == 0.0 {
                continue;
            }
            for j in 0..d {
                dx[i * d + j] += go * w[kk * d + j];
                dw[kk * d + j] += go * x[i * d + j];
            }
        }
    }
    (dx, dw, db)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

pub(crate) fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Windowed max with the flat index of each winner (first row-major maximum).
pub(crate) fn max_pool2d_forward(
    input: &Tensor,
    k: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = nchw("max_pool2d", input.shape())?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid(
            "max_pool2d",
            "window and stride must be >= 1",
        ));
    }
    if k > h || k > w {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {} larger than input H,W axes {}x{}", k, h, w),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    let shape = with_batch(input.rank() == 4, n, &[c, oh, ow]);
    Ok((Tensor::new(shape, out)?, arg))
}

pub fn max_pool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    max_pool2d_forward(input, k, stride).map(|(t, _)| t)
}

/// Scatters `grad_out` onto recorded argmax positions; `None` marks outputs
/// with no source (empty RoI bins).
pub(crate) fn scatter_argmax<I>(input_len: usize, argmax: I, grad_out: &[f64]) -> Vec<f64>
where
    I: IntoIterator<Item = Option<usize>>,
{
    let mut dx = vec![0.0; input_len];
    for (src, &g) in argmax.into_iter().zip(grad_out) {
        if let Some(i) = src {
            dx[i] += g;
        }
    }
    dx
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw("global_avg_pool", input.shape())?;
    if h * w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let inv = 1.0 / (h * w) as f64;
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() * inv)
        .collect();
    let shape = with_batch(input.rank() == 4, n, &[c]);
    Tensor::new(shape, out)
}

pub(crate) fn global_avg_pool_backward(shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (_, _, h, w) = nchw("global_avg_pool", shape).expect("validated in forward");
    let inv = 1.0 / (h * w) as f64;
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, h * w))
        .collect()
}

/// Row-wise softmax over the last axis, stabilized by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = match logits.shape() {
        [k] | [_, k] if *k > 0 => *k,
        s => {
            return Err(Error::shape(
                "softmax",
                format!("expected [K] or [N,K] with K >= 1, got {:?}", s),
            ))
        }
    };
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over rows with a label; `None` rows are ignored.
///
/// Returns the loss, the softmax probabilities and the number of labelled
/// rows. With no labelled rows the loss is 0.
pub(crate) fn softmax_cross_entropy_forward(
    logits: &Tensor,
    labels: &[Option<usize>],
) -> Result<(f64, Tensor, usize)> {
    let probs = softmax(logits)?;
    let k = *logits.shape().last().unwrap();
    let rows = logits.numel() / k;
    if labels.len() != rows {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} label(s) for {} row(s) of logits", labels.len(), rows),
        ));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        if label >= k {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", label, k),
            ));
        }
        let row = &logits.data()[r * k..][..k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
        count += 1;
    }
    let loss = if count == 0 {
        0.0
    } else {
        total / count as f64
    };
    Ok((loss, probs, count))
}

/// Loss and gradient for a single logit vector.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.rank() != 1 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("expected [K], got {:?}", logits.shape()),
        ));
    }
    let (loss, probs, _) = softmax_cross_entropy_forward(logits, &[Some(label)])?;
    let grad = softmax_cross_entropy_backward(&probs, &[Some(label)], 1, 1.0);
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub(crate) fn softmax_cross_entropy_backward(
    probs: &Tensor,
    labels: &[Option<usize>],
    count: usize,
    grad_loss: f64,
) -> Vec<f64> {
    let k = *probs.shape().last().unwrap();
    let mut dx = vec![0.0; probs.numel()];
    if count == 0 {
        return dx;
    }
    let scale = grad_loss / count as f64;
    for (r, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        let p = &probs.data()[r * k..][..k];
        let d = &mut dx[r * k..][..k];
        for (j, (dj, pj)) in d.iter_mut().zip(p).enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *dj = scale * (pj - onehot);
        }
    }
    dx
}
