//! Layer kinds and their forward/backward kernels.

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// One building block of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected layer acting on the last axis.
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    /// Stride-1 2-D convolution on a CxHxW tensor with `pad` zero padding.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        pad: usize,
    },
    /// 2x2 max pooling with stride 2; spatial extents must be even.
    MaxPool2,
    /// 2x2 transposed convolution with stride 2.
    UpConv2 {
        in_ch: usize,
        out_ch: usize,
    },
    /// Concatenates the output of layer `skip` (channels first) with the
    /// current activation along the channel axis.
    Concat {
        skip: usize,
    },
    /// Softmax over channels (3-D input) or the last axis (otherwise).
    Softmax,
}

impl LayerSpec {
    /// Weight and bias shapes, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerSpec::Conv2d { in_ch, out_ch, k, .. } => Some((vec![out_ch, in_ch, k, k], vec![out_ch])),
            LayerSpec::UpConv2 { in_ch, out_ch } => Some((vec![in_ch, out_ch, 2, 2], vec![out_ch])),
            _ => None,
        }
    }

    /// He-normal fan-in.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d { in_ch, k, .. } => in_ch * k * k,
            LayerSpec::UpConv2 { in_ch, .. } => in_ch,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::UpConv2 { .. } => "upconv2",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::Softmax => "softmax",
        }
    }
}

pub(crate) fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let last = *x.shape().last().unwrap();
    if last != inp {
        return Err(Error::Shape(format!("dense expects width {inp}, got {:?}", x.shape())));
    }
    let rows = x.len() / inp;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(b.data());
    }
    gemm(
        rows,
        inp,
        out,
        Mat::rm(x.data(), inp),
        Mat::rm_t(w.data(), inp),
        1.0,
        &mut y,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::new(shape, y)
}

/// Returns (dW, db, dX).
pub(crate) fn dense_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / inp;
    let mut dw = Tensor::zeros(w.shape());
    gemm(
        out,
        rows,
        inp,
        Mat::rm_t(gy.data(), out),
        Mat::rm(x.data(), inp),
        0.0,
        dw.data_mut(),
    );
    let mut db = Tensor::zeros(&[out]);
    for r in 0..rows {
        for (d, g) in db.data_mut().iter_mut().zip(&gy.data()[r * out..(r + 1) * out]) {
            *d += g;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        rows,
        out,
        inp,
        Mat::rm(gy.data(), out),
        Mat::rm(w.data(), inp),
        0.0,
        dx.data_mut(),
    );
    (dw, db, dx)
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub(crate) fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut dx = gy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Unfolds a CxHxW input into a (C*k*k) x (H'*W') column matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut cols = vec![0.0; c * k * k * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(ow);
                    for ox in x_lo..x_hi {
                        drow[ox] = src[ox + kx - pad];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f64]) {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(ow);
                    for ox in x_lo..x_hi {
                        drow[ox + kx - pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn conv_dims(x: &Tensor, in_ch: usize, k: usize, pad: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    if c != in_ch {
        return Err(Error::Shape(format!("conv2d expects {in_ch} channels, got {c}")));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!(
            "conv2d kernel {k} larger than padded input {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

pub(crate) fn conv_forward(x: &Tensor, wt: &Tensor, b: &Tensor, k: usize, pad: usize) -> Result<Tensor> {
    let (out_ch, in_ch) = (wt.shape()[0], wt.shape()[1]);
    let (c, h, w) = conv_dims(x, in_ch, k, pad)?;
    let ckk = c * k * k;
    let (cols_owned, oh, ow);
    let cols: &[f64] = if k == 1 && pad == 0 {
        oh = h;
        ow = w;
        x.data()
    } else {
        let r = im2col(x.data(), c, h, w, k, pad);
        cols_owned = r.0;
        oh = r.1;
        ow = r.2;
        &cols_owned
    };
    let n = oh * ow;
    let mut y = vec![0.0; out_ch * n];
    for (o, chunk) in y.chunks_mut(n).enumerate() {
        chunk.iter_mut().for_each(|v| *v = b.data()[o]);
    }
    gemm(out_ch, ckk, n, Mat::rm(wt.data(), ckk), Mat::rm(cols, n), 1.0, &mut y);
    Tensor::new(vec![out_ch, oh, ow], y)
}

pub(crate) fn conv_backward(x: &Tensor, wt: &Tensor, gy: &Tensor, k: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (out_ch, in_ch) = (wt.shape()[0], wt.shape()[1]);
    let (_, h, w) = x.chw().expect("validated in forward");
    let ckk = in_ch * k * k;
    let (_, oh, ow) = gy.chw().expect("validated in forward");
    let n = oh * ow;
    let im2 = k != 1 || pad != 0;
    let cols_owned;
    let cols: &[f64] = if im2 {
        cols_owned = im2col(x.data(), in_ch, h, w, k, pad).0;
        &cols_owned
    } else {
        x.data()
    };
    let mut dw = Tensor::zeros(wt.shape());
    gemm(
        out_ch,
        n,
        ckk,
        Mat::rm(gy.data(), n),
        Mat::rm_t(cols, n),
        0.0,
        dw.data_mut(),
    );
    let db = Tensor::from_vec(gy.data().chunks(n).map(|c| c.iter().sum()).collect());
    let mut dx = Tensor::zeros(x.shape());
    if im2 {
        let mut dcols = vec![0.0; ckk * n];
        gemm(
            ckk,
            out_ch,
            n,
            Mat::rm_t(wt.data(), ckk),
            Mat::rm(gy.data(), n),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, in_ch, h, w, k, pad, dx.data_mut());
    } else {
        gemm(
            ckk,
            out_ch,
            n,
            Mat::rm_t(wt.data(), ckk),
            Mat::rm(gy.data(), n),
            0.0,
            dx.data_mut(),
        );
    }
    (dw, db, dx)
}

/// Returns the pooled tensor and, per output, the flat index of the maximum.
pub(crate) fn maxpool_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                y.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], y)?, arg))
}

pub(crate) fn maxpool_backward(x_shape: &[usize], arg: &[usize], gy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    for (&i, &g) in arg.iter().zip(gy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

pub(crate) fn upconv_forward(x: &Tensor, wt: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (in_ch, out_ch) = (wt.shape()[0], wt.shape()[1]);
    let (c, h, w) = x.chw()?;
    if c != in_ch {
        return Err(Error::Shape(format!("upconv2 expects {in_ch} channels, got {c}")));
    }
    let n = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; out_ch * oh * ow];
    let mut tmp = vec![0.0; out_ch * n];
    for ab in 0..4 {
        let (a, bb) = (ab / 2, ab % 2);
        // W_ab^T is out_ch x in_ch with element (o, c) at c*out_ch*4 + o*4 + ab.
        let wm = Mat {
            data: &wt.data()[ab..],
            rs: 4,
            cs: (out_ch * 4) as isize,
        };
        gemm(out_ch, in_ch, n, wm, Mat::rm(x.data(), n), 0.0, &mut tmp);
        for o in 0..out_ch {
            let bias = b.data()[o];
            for i in 0..h {
                let dst = &mut y[o * oh * ow + (2 * i + a) * ow..];
                let src = &tmp[o * n + i * w..o * n + (i + 1) * w];
                for (j, &v) in src.iter().enumerate() {
                    dst[2 * j + bb] = v + bias;
                }
            }
        }
    }
    Tensor::new(vec![out_ch, oh, ow], y)
}

pub(crate) fn upconv_backward(x: &Tensor, wt: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (in_ch, out_ch) = (wt.shape()[0], wt.shape()[1]);
    let (_, h, w) = x.chw().expect("validated in forward");
    let n = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dw = Tensor::zeros(wt.shape());
    let mut dx = Tensor::zeros(x.shape());
    let mut gab = vec![0.0; out_ch * n];
    let mut dwab = vec![0.0; in_ch * out_ch];
    for ab in 0..4 {
        let (a, bb) = (ab / 2, ab % 2);
        for o in 0..out_ch {
            for i in 0..h {
                let src = &gy.data()[o * oh * ow + (2 * i + a) * ow..];
                for j in 0..w {
                    gab[o * n + i * w + j] = src[2 * j + bb];
                }
            }
        }
        // dX += W_ab (in_ch x out_ch) * G_ab (out_ch x n)
        let wm = Mat {
            data: &wt.data()[ab..],
            rs: (out_ch * 4) as isize,
            cs: 4,
        };
        gemm(in_ch, out_ch, n, wm, Mat::rm(&gab, n), 1.0, dx.data_mut());
        // dW_ab = X (in_ch x n) * G_ab^T (n x out_ch)
        gemm(
            in_ch,
            n,
            out_ch,
            Mat::rm(x.data(), n),
            Mat::rm_t(&gab, n),
            0.0,
            &mut dwab,
        );
        for c in 0..in_ch {
            for o in 0..out_ch {
                dw.data_mut()[c * out_ch * 4 + o * 4 + ab] = dwab[c * out_ch + o];
            }
        }
    }
    let hw = oh * ow;
    let db = Tensor::from_vec(gy.data().chunks(hw).map(|c| c.iter().sum()).collect());
    (dw, db, dx)
}

pub(crate) fn concat_forward(skip: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (cs, hs, ws) = skip.chw()?;
    let (cx, hx, wx) = x.chw()?;
    if (hs, ws) != (hx, wx) {
        return Err(Error::Shape(format!(
            "concat needs equal spatial extents, got {hs}x{ws} and {hx}x{wx}"
        )));
    }
    let mut data = Vec::with_capacity(skip.len() + x.len());
    data.extend_from_slice(skip.data());
    data.extend_from_slice(x.data());
    Tensor::new(vec![cs + cx, hs, ws], data)
}

/// Splits the concatenated gradient back into (skip, current).
pub(crate) fn concat_backward(skip_shape: &[usize], gy: &Tensor) -> (Tensor, Tensor) {
    let n_skip: usize = skip_shape.iter().product();
    let (c, h, w) = gy.chw().expect("validated in forward");
    let gs = Tensor::new(skip_shape.to_vec(), gy.data()[..n_skip].to_vec()).unwrap();
    let gx = Tensor::new(vec![c - skip_shape[0], h, w], gy.data()[n_skip..].to_vec()).unwrap();
    (gs, gx)
}

/// (groups, classes, stride) describing how softmax walks a tensor.
fn softmax_layout(shape: &[usize]) -> (usize, usize, usize) {
    if shape.len() == 3 {
        (shape[1] * shape[2], shape[0], shape[1] * shape[2])
    } else {
        let c = *shape.last().unwrap();
        (shape.iter().product::<usize>() / c, c, 1)
    }
}

fn group_base(g: usize, classes: usize, stride: usize) -> usize {
    if stride == 1 {
        g * classes
    } else {
        g
    }
}

pub(crate) fn softmax_forward(x: &Tensor) -> Tensor {
    let (groups, classes, stride) = softmax_layout(x.shape());
    let mut y = x.clone();
    let d = y.data_mut();
    for g in 0..groups {
        let base = group_base(g, classes, stride);
        let max = (0..classes)
            .map(|c| d[base + c * stride])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..classes {
            let e = (d[base + c * stride] - max).exp();
            d[base + c * stride] = e;
            sum += e;
        }
        for c in 0..classes {
            d[base + c * stride] /= sum;
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let (groups, classes, stride) = softmax_layout(y.shape());
    let mut dx = Tensor::zeros(y.shape());
    for g in 0..groups {
        let base = group_base(g, classes, stride);
        let dot: f64 = (0..classes)
            .map(|c| y.data()[base + c * stride] * gy.data()[base + c * stride])
            .sum();
        for c in 0..classes {
            let i = base + c * stride;
            dx.data_mut()[i] = y.data()[i] * (gy.data()[i] - dot);
        }
    }
    dx
}
