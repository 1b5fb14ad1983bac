//! Differentiable layers operating on whole mini-batches.
//!
//! Every parallel loop partitions *outputs*; each output element is
//! accumulated sequentially in a fixed order, so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

use super::tensor::{axpy, gemm, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }
}

pub trait Layer: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Inference; leaves no state behind.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;

    /// Forward pass that keeps what [`Layer::backward`] needs.
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor>;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Like `forward`, additionally pushing any attention maps computed.
    fn forward_collect(&self, x: &Tensor, _maps: &mut Vec<Tensor>) -> Result<Tensor> {
        self.forward(x)
    }
}

fn no_cache(kind: &str) -> Error {
    Error::State(format!("{kind}: backward called without a training forward pass"))
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::shape(format!(
            "{what} expects a rank-{rank} tensor, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: gradient shape {:?} does not match {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OIKK weights, got {input:?} and {weight:?}"
            )));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c || k != k2 {
            return Err(Error::shape(format!(
                "conv2d weights {weight:?} incompatible with input {input:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Source row for output row `oy` and kernel row `kh`, if inside.
    #[inline]
    fn src_row(&self, oy: usize, kh: usize) -> Option<usize> {
        let iy = (oy * self.stride + kh) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Output columns `[lo, hi)` whose source column `ox*s + kw - pad` is inside.
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kw = kw as isize;
        let lo = if p > kw { (p - kw + s - 1) / s } else { 0 };
        let last = self.w as isize - 1 + p - kw;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.ow as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }

    #[inline]
    fn src_col(&self, ox: usize, kw: usize) -> usize {
        ox * self.stride + kw - self.pad
    }
}

impl ConvGeometry {
    /// Unfolds one sample (`[C, H, W]`) into a `[C·K·K, OH·OW]` patch matrix.
    fn im2col(&self, src: &[f64], col: &mut [f64], cols: &[(usize, usize)]) {
        let plane = self.oh * self.ow;
        for c in 0..self.c {
            let img = &src[c * self.h * self.w..][..self.h * self.w];
            for kh in 0..self.k {
                for (kw, &(lo, hi)) in cols.iter().enumerate() {
                    let dst = &mut col[((c * self.k + kh) * self.k + kw) * plane..][..plane];
                    for oy in 0..self.oh {
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let Some(iy) = self.src_row(oy, kh) else {
                            drow.fill(0.0);
                            continue;
                        };
                        let srow = &img[iy * self.w..(iy + 1) * self.w];
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if self.stride == 1 && lo < hi {
                            let off = self.src_col(lo, kw);
                            drow[lo..hi].copy_from_slice(&srow[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = srow[self.src_col(ox, kw)];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-adds a patch matrix
    /// back onto a `[C, H, W]` buffer.
    fn col2im(&self, col: &[f64], dst: &mut [f64], cols: &[(usize, usize)]) {
        let plane = self.oh * self.ow;
        for c in 0..self.c {
            let img = &mut dst[c * self.h * self.w..][..self.h * self.w];
            for kh in 0..self.k {
                for (kw, &(lo, hi)) in cols.iter().enumerate() {
                    let src = &col[((c * self.k + kh) * self.k + kw) * plane..][..plane];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src_row(oy, kh) else { continue };
                        let drow = &mut img[iy * self.w..(iy + 1) * self.w];
                        let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 && lo < hi {
                            let off = self.src_col(lo, kw);
                            for (d, v) in drow[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[self.src_col(ox, kw)] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        self.c * self.k * self.k * self.oh * self.ow
    }

    fn col_ranges(&self) -> Vec<(usize, usize)> {
        (0..self.k).map(|kw| self.col_range(kw)).collect()
    }
}

/// Cross-correlation of an NCHW batch with OIKK weights.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.len() != g.o {
        return Err(Error::shape(format!(
            "conv2d bias has {} entries for {} output channels",
            bias.len(),
            g.o
        )));
    }
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let cols = g.col_ranges();
    let plane = g.oh * g.ow;
    let ckk = g.c * g.k * g.k;
    let mut out = vec![0.0; g.n * g.o * plane];
    out.par_chunks_mut(g.o * plane).enumerate().for_each(|(n, dst)| {
        let mut col = vec![0.0; g.col_len()];
        g.im2col(&x[n * g.c * g.h * g.w..][..g.c * g.h * g.w], &mut col, &cols);
        for (row, &bv) in dst.chunks_exact_mut(plane).zip(b) {
            row.fill(bv);
        }
        gemm(g.o, ckk, plane, wt, false, &col, false, 1.0, dst);
    });
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`]: `(input, weight, bias)`. The input
/// gradient is skipped when `need_input` is false.
///
/// Per-sample weight gradients are summed in sample order, independent of
/// how the samples were scheduled across threads.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.o, g.oh, g.ow]
        )));
    }
    let (x, wt, dy) = (input.data(), weight.data(), grad_out.data());
    let cols = g.col_ranges();
    let plane = g.oh * g.ow;
    let in_len = g.c * g.h * g.w;
    let ckk = g.c * g.k * g.k;

    let mut dbias = vec![0.0; g.o];
    for n in 0..g.n {
        for (o, db) in dbias.iter_mut().enumerate() {
            *db += dy[(n * g.o + o) * plane..][..plane].iter().sum::<f64>();
        }
    }

    let mut dx = vec![0.0; if need_input { x.len() } else { 0 }];
    let per_sample = |n: usize, dxn: Option<&mut [f64]>| {
        let gy = &dy[n * g.o * plane..][..g.o * plane];
        let mut col = vec![0.0; g.col_len()];
        g.im2col(&x[n * in_len..][..in_len], &mut col, &cols);
        let mut dwn = vec![0.0; g.o * ckk];
        gemm(g.o, plane, ckk, gy, false, &col, true, 0.0, &mut dwn);
        if let Some(dxn) = dxn {
            gemm(ckk, g.o, plane, wt, true, gy, false, 0.0, &mut col);
            g.col2im(&col, dxn, &cols);
        }
        dwn
    };
    let per_n: Vec<Vec<f64>> = if need_input {
        dx.par_chunks_mut(in_len)
            .enumerate()
            .map(|(n, dxn)| per_sample(n, Some(dxn)))
            .collect()
    } else {
        (0..g.n).into_par_iter().map(|n| per_sample(n, None)).collect()
    };
    let mut dw = vec![0.0; g.o * ckk];
    for dwn in &per_n {
        axpy(1.0, dwn, &mut dw);
    }

    let dx = if need_input {
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![g.o], dbias)?,
    ))
}

pub struct Conv2d {
    weight: Param,
    bias: Param,
    stride: usize,
    padding: usize,
    /// The first layer of a network has no use for its input gradient.
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{prefix}.weight"),
                Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            ),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = ConvGeometry::new(&[1, self.weight.value.shape()[1], h, w], self.weight.value.shape(), self.stride, self.padding)?;
        Ok((g.oh, g.ow))
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight.value, &self.bias.value, self.stride, self.padding)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("conv2d"))?;
        let (dx, dw, db) =
            conv2d_backward(x, &self.weight.value, grad, self.stride, self.padding, self.input_grad)?;
        self.weight.grad.add_assign(&dw)?;
        self.bias.grad.add_assign(&db)?;
        Ok(dx.unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------- linear

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
pub struct Linear {
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Param::new(format!("{prefix}.weight"), Tensor::zeros(&[inputs, outputs])),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.last_dim() != self.inputs() {
            return Err(Error::shape(format!(
                "{}: expected last axis {}, got {:?}",
                self.weight.name,
                self.inputs(),
                x.shape()
            )));
        }
        Ok(())
    }
}

impl Layer for Linear {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (fan_in, fan_out) = (self.inputs(), self.outputs());
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(rows, fan_in, fan_out, x.data(), false, self.weight.value.data(), false, 1.0, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        Tensor::new(shape, out)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("linear"))?;
        let (fan_in, fan_out) = (self.inputs(), self.outputs());
        let rows = x.rows();
        if grad.last_dim() != fan_out || grad.rows() != rows {
            return Err(Error::shape(format!(
                "{}: upstream gradient {:?} does not match output",
                self.weight.name,
                grad.shape()
            )));
        }
        let (xs, gy) = (x.data(), grad.data());
        gemm(fan_in, rows, fan_out, xs, true, gy, false, 1.0, self.weight.grad.data_mut());
        let db = self.bias.grad.data_mut();
        for row in gy.chunks_exact(fan_out) {
            axpy(1.0, row, db);
        }
        let mut dx = vec![0.0; xs.len()];
        gemm(rows, fan_out, fan_in, gy, false, self.weight.value.data(), true, 0.0, &mut dx);
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------- activations

#[derive(Default)]
pub struct Relu {
    /// Shape and positive-input mask from the last training pass.
    cache: Option<(Vec<usize>, Vec<bool>)>,
}

impl Layer for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some((x.shape().to_vec(), x.data().iter().map(|&v| v > 0.0).collect()));
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self.cache.as_ref().ok_or_else(|| no_cache("relu"))?;
        if grad.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "relu: gradient shape {:?} does not match input {shape:?}",
                grad.shape()
            )));
        }
        let data = mask
            .iter()
            .zip(grad.data())
            .map(|(&m, &g)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(shape.clone(), data)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[derive(Default)]
pub struct Gelu {
    cache: Option<Tensor>,
}

impl Layer for Gelu {
    fn kind(&self) -> &'static str {
        "gelu"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("gelu"))?;
        same_shape(x, grad, "gelu")?;
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| {
                let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                g * (0.5 * (1.0 + t) + 0.5 * v * dt)
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Row-wise softmax over the last axis, max-subtracted.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `dx = p * (dp - <dp, p>)` per row.
pub(crate) fn softmax_backward_rows(p: &[f64], dp: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((pr, gr), o) in p.chunks_exact(d).zip(dp.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
        let s: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((oi, &pi), &gi) in o.iter_mut().zip(pr).zip(gr) {
            *oi = pi * (gi - s);
        }
    }
    out
}

#[derive(Default)]
pub struct Softmax {
    cache: Option<Tensor>,
}

impl Layer for Softmax {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(x))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = softmax_rows(x);
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let p = self.cache.as_ref().ok_or_else(|| no_cache("softmax"))?;
        same_shape(p, grad, "softmax")?;
        Tensor::new(p.shape().to_vec(), softmax_backward_rows(p.data(), grad.data(), p.last_dim()))
    }
}

// ---------------------------------------------------------------- pooling & reshaping

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Ties go to the first maximum in row-major window order.
#[derive(Default)]
pub struct MaxPool2 {
    /// Input shape and, per output, the winning offset within its plane.
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2 {
    fn pool(x: &Tensor, want_index: bool) -> Result<(Tensor, Vec<u32>)> {
        expect_rank(x, 4, "maxpool2x2")?;
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!("maxpool2x2 needs at least 2x2, got {h}x{w}")));
        }
        let out_plane = oh * ow;
        let nc = s[0] * s[1];
        let mut out = vec![0.0; nc * out_plane];
        let mut idx = vec![0u32; if want_index { nc * out_plane } else { 0 }];
        let body = |p: usize, dst: &mut [f64], di: Option<&mut [u32]>| {
            let src = &x.data()[p * h * w..][..h * w];
            let mut di = di;
            for oy in 0..oh {
                let r0 = &src[2 * oy * w..][..w];
                let r1 = &src[(2 * oy + 1) * w..][..w];
                for ox in 0..ow {
                    let cands = [r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cands[k] > cands[best] {
                            best = k;
                        }
                    }
                    dst[oy * ow + ox] = cands[best];
                    if let Some(di) = di.as_deref_mut() {
                        let (dy, dx) = (best / 2, best % 2);
                        di[oy * ow + ox] = ((2 * oy + dy) * w + 2 * ox + dx) as u32;
                    }
                }
            }
        };
        if want_index {
            out.par_chunks_mut(out_plane)
                .zip(idx.par_chunks_mut(out_plane))
                .enumerate()
                .for_each(|(p, (dst, di))| body(p, dst, Some(di)));
        } else {
            out.par_chunks_mut(out_plane)
                .enumerate()
                .for_each(|(p, dst)| body(p, dst, None));
        }
        Ok((Tensor::new(vec![s[0], s[1], oh, ow], out)?, idx))
    }
}

impl Layer for MaxPool2 {
    fn kind(&self) -> &'static str {
        "maxpool2x2"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::pool(x, false)?.0)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.len() / x.shape().first().copied().unwrap_or(1) > u32::MAX as usize {
            return Err(Error::shape("maxpool2x2 plane too large"));
        }
        let (y, idx) = Self::pool(x, true)?;
        self.cache = Some((x.shape().to_vec(), idx));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, idx) = self.cache.as_ref().ok_or_else(|| no_cache("maxpool2x2"))?;
        let expected = [shape[0], shape[1], shape[2] / 2, shape[3] / 2];
        if grad.shape() != expected {
            return Err(Error::shape(format!(
                "maxpool2x2 upstream gradient {:?}, expected {expected:?}",
                grad.shape()
            )));
        }
        let in_plane = shape[2] * shape[3];
        let out_plane = expected[2] * expected[3];
        let mut dx = vec![0.0; shape.iter().product()];
        dx.par_chunks_mut(in_plane)
            .zip(grad.data().par_chunks(out_plane).zip(idx.par_chunks(out_plane)))
            .for_each(|(dst, (g, ix))| {
                for (&i, &gv) in ix.iter().zip(g) {
                    dst[i as usize] += gv;
                }
            });
        Tensor::new(shape.clone(), dx)
    }
}

/// `[N, ...] -> [N, prod(...)]`.
#[derive(Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        x.clone().reshape(vec![n, x.len() / n])
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.clone().ok_or_else(|| no_cache("flatten"))?;
        grad.clone().reshape(shape)
    }
}

/// Mean over the token axis: `[B, T, D] -> [B, D]`.
#[derive(Default)]
pub struct MeanPool {
    input_shape: Option<Vec<usize>>,
}

impl Layer for MeanPool {
    fn kind(&self) -> &'static str {
        "mean_pool"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 3, "mean_pool")?;
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; b * d];
        for (bi, dst) in out.chunks_exact_mut(d).enumerate() {
            for ti in 0..t {
                axpy(1.0, &x.data()[(bi * t + ti) * d..][..d], dst);
            }
            dst.iter_mut().for_each(|v| *v /= t as f64);
        }
        Tensor::new(vec![b, d], out)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.clone().ok_or_else(|| no_cache("mean_pool"))?;
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if grad.shape() != [b, d] {
            return Err(Error::shape(format!("mean_pool upstream gradient {:?}", grad.shape())));
        }
        let mut dx = vec![0.0; b * t * d];
        for bi in 0..b {
            let g = &grad.data()[bi * d..(bi + 1) * d];
            for ti in 0..t {
                for (o, &gv) in dx[(bi * t + ti) * d..][..d].iter_mut().zip(g) {
                    *o = gv / t as f64;
                }
            }
        }
        Tensor::new(shape, dx)
    }
}

// ---------------------------------------------------------------- layer norm

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Normalises the last axis, then applies a learned scale and shift.
pub struct LayerNorm {
    gamma: Param,
    beta: Param,
    cache: Option<Tensor>,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{prefix}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: Param::new(format!("{prefix}.beta"), Tensor::zeros(&[dim])),
            cache: None,
        }
    }

    fn stats(row: &[f64]) -> (f64, f64) {
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
    }
}

impl Layer for LayerNorm {
    fn kind(&self) -> &'static str {
        "layernorm"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.gamma.value.len();
        if x.last_dim() != d {
            return Err(Error::shape(format!(
                "{}: expected last axis {d}, got {:?}",
                self.gamma.name,
                x.shape()
            )));
        }
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let (mean, inv) = Self::stats(row);
            for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *v = (*v - mean) * inv * gi + bi;
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| no_cache("layernorm"))?;
        same_shape(x, grad, "layernorm")?;
        let d = x.last_dim();
        let g = self.gamma.value.data().to_vec();
        let mut dx = vec![0.0; x.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for ((row, gy), out) in x
            .data()
            .chunks_exact(d)
            .zip(grad.data().chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
        {
            let (mean, inv) = Self::stats(row);
            for j in 0..d {
                xhat[j] = (row[j] - mean) * inv;
                dxhat[j] = gy[j] * g[j];
                dgamma[j] += gy[j] * xhat[j];
                dbeta[j] += gy[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                out[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        axpy(1.0, &dgamma, self.gamma.grad.data_mut());
        axpy(1.0, &dbeta, self.beta.grad.data_mut());
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------- loss

const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-sum(target * ln(max(p, 1e-12)))`.
pub fn cross_entropy(probabilities: &Tensor, targets: &Tensor) -> Result<f64> {
    if probabilities.shape() != targets.shape() || probabilities.shape().len() != 2 {
        return Err(Error::shape(format!(
            "cross entropy needs matching B×C tensors, got {:?} and {:?}",
            probabilities.shape(),
            targets.shape()
        )));
    }
    let c = probabilities.last_dim();
    let b = probabilities.rows();
    let mut total = 0.0;
    for (p, t) in probabilities
        .data()
        .chunks_exact(c)
        .zip(targets.data().chunks_exact(c))
    {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probability row sums to {s}")));
        }
        total -= p
            .iter()
            .zip(t)
            .filter(|(_, &ti)| ti != 0.0)
            .map(|(&pi, &ti)| ti * pi.max(PROB_FLOOR).ln())
            .sum::<f64>();
    }
    Ok(total / b as f64)
}

/// Gradient of `cross_entropy(softmax(z), t)` with respect to the logits `z`.
pub fn softmax_cross_entropy_grad(probabilities: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if probabilities.shape() != targets.shape() {
        return Err(Error::shape("probabilities and targets differ in shape"));
    }
    let b = probabilities.rows() as f64;
    let data = probabilities
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) / b)
        .collect();
    Tensor::new(probabilities.shape().to_vec(), data)
}
