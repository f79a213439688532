//! Differentiable layer ops and the per-op backward rules.

use crate::error::{shape_err, Result};
use crate::scalar::{matmul, Scalar};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

/// Convolution geometry seen from the larger ("image") side.
///
/// For a convolution the image is the input and the grid is the output; a
/// transposed convolution swaps the two.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub filters: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn grid_len(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    fn im2col<T: Scalar>(&self, img: &[T]) -> Vec<T> {
        let n = self.grid_len();
        let ghw = self.grid_h * self.grid_w;
        let mut cols = vec![T::zero(); self.ckk() * n];
        for c in 0..self.channels {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for b in 0..self.batch {
                        let plane = &img[(b * self.channels + c) * self.img_h * self.img_w..];
                        for gy in 0..self.grid_h {
                            let iy = (gy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.img_h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * self.img_w..];
                            let out = &mut dst[b * ghw + gy * self.grid_w..];
                            for gx in 0..self.grid_w {
                                let ix = (gx * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.img_w as isize {
                                    out[gx] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let n = self.grid_len();
        let ghw = self.grid_h * self.grid_w;
        for c in 0..self.channels {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for b in 0..self.batch {
                        let base = (b * self.channels + c) * self.img_h * self.img_w;
                        for gy in 0..self.grid_h {
                            let iy = (gy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.img_h as isize {
                                continue;
                            }
                            let row_off = base + iy as usize * self.img_w;
                            let s = &src[b * ghw + gy * self.grid_w..];
                            for gx in 0..self.grid_w {
                                let ix = (gx * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.img_w as isize {
                                    img[row_off + ix as usize] += s[gx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, S]` (NCHW with S = H·W) ↔ `[C, B·S]` channel-major layout.
fn nchw_to_cm<T: Scalar>(x: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let n = batch * spatial;
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * spatial..][..spatial];
            out[c * n + b * spatial..][..spatial].copy_from_slice(src);
        }
    }
    out
}

fn cm_to_nchw<T: Scalar>(x: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let n = batch * spatial;
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[c * n + b * spatial..][..spatial];
            out[(b * channels + c) * spatial..][..spatial].copy_from_slice(src);
        }
    }
    out
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += g[(b * channels + c) * spatial..][..spatial].iter().copied().sum::<T>();
        }
    }
    sums
}

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormSource<'a, T> {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running averages (inference).
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training batch; `var` is unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct BatchNormSaved<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl<T: Scalar> Tape<T> {
    /// `x · wᵀ + b` for `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xv, wv, bv) = (&self.node(xi).value, &self.node(wi).value, &self.node(bi).value);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || wv.shape()[1] != xv.shape()[1] {
            return shape_err(format!("linear: x {:?} w {:?}", xv.shape(), wv.shape()));
        }
        let (batch, inp, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        if bv.numel() != out {
            return shape_err(format!("linear: bias {:?} for {out} outputs", bv.shape()));
        }
        let mut y = vec![T::zero(); batch * out];
        matmul(batch, inp, out, xv.data(), false, wv.data(), true, &mut y, false);
        for row in y.chunks_mut(out) {
            for (v, &bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let value = Tensor::new(&[batch, out], y)?;
        self.record("linear", value, Op::Linear { x: xi, w: wi, b: bi }, &[xi, wi, bi])
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xv, wv, bv) = (&self.node(xi).value, &self.node(wi).value, &self.node(bi).value);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return shape_err(format!("conv2d: x {xs:?} w {ws:?}"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k || bv.numel() != ws[0] {
            return shape_err(format!("conv2d: kernel {k} does not fit {xs:?} (pad {pad})"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            img_h: xs[2],
            img_w: xs[3],
            grid_h: (xs[2] + 2 * pad - k) / stride + 1,
            grid_w: (xs[3] + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
            filters: ws[0],
        };
        let cols = geom.im2col(xv.data());
        let n = geom.grid_len();
        let mut out_mat = vec![T::zero(); geom.filters * n];
        matmul(geom.filters, geom.ckk(), n, wv.data(), false, &cols, false, &mut out_mat, false);
        let spatial = geom.grid_h * geom.grid_w;
        let mut y = cm_to_nchw(&out_mat, geom.batch, geom.filters, spatial);
        for b in 0..geom.batch {
            for (o, &bias) in bv.data().iter().enumerate() {
                for v in &mut y[(b * geom.filters + o) * spatial..][..spatial] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::new(&[geom.batch, geom.filters, geom.grid_h, geom.grid_w], y)?;
        let keep_cols = if self.node(wi).requires_grad { cols } else { Vec::new() };
        self.record(
            "conv2d",
            value,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
                cols: keep_cols,
            },
            &[xi, wi, bi],
        )
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`]),
    /// `x: [B, I, H, W]`, `w: [I, O, k, k]`, `b: [O]`; output side is
    /// `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (xv, wv, bv) = (&self.node(xi).value, &self.node(wi).value, &self.node(bi).value);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return shape_err(format!("conv_transpose2d: x {xs:?} w {ws:?}"));
        }
        let k = ws[2];
        let out_h = ((xs[2] - 1) * stride + k).checked_sub(2 * pad);
        let out_w = ((xs[3] - 1) * stride + k).checked_sub(2 * pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return shape_err("conv_transpose2d: padding larger than output");
        };
        if bv.numel() != ws[1] || out_h == 0 || out_w == 0 {
            return shape_err(format!("conv_transpose2d: bias {:?} for {} outputs", bv.shape(), ws[1]));
        }
        let geom = ConvGeom {
            batch: xs[0],
            channels: ws[1],
            img_h: out_h,
            img_w: out_w,
            grid_h: xs[2],
            grid_w: xs[3],
            k,
            stride,
            pad,
            filters: xs[1],
        };
        let spatial_in = xs[2] * xs[3];
        let xmat = nchw_to_cm(xv.data(), geom.batch, geom.filters, spatial_in);
        let n = geom.grid_len();
        let mut cols = vec![T::zero(); geom.ckk() * n];
        matmul(geom.ckk(), geom.filters, n, wv.data(), true, &xmat, false, &mut cols, false);
        let mut y = vec![T::zero(); geom.batch * geom.channels * out_h * out_w];
        geom.col2im(&cols, &mut y);
        let spatial = out_h * out_w;
        for b in 0..geom.batch {
            for (o, &bias) in bv.data().iter().enumerate() {
                for v in &mut y[(b * geom.channels + o) * spatial..][..spatial] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::new(&[geom.batch, geom.channels, out_h, out_w], y)?;
        self.record(
            "conv_transpose2d",
            value,
            Op::ConvTranspose2d { x: xi, w: wi, b: bi, geom },
            &[xi, wi, bi],
        )
    }

    /// Per-channel normalization of `x: [B, C, ...]` followed by the affine
    /// `gamma · x̂ + beta`. With [`NormSource::Batch`] the batch statistics
    /// are returned so the caller can fold them into running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        source: NormSource<'_, T>,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let (xv, gv, bv) = (&self.node(xi).value, &self.node(gi).value, &self.node(bi).value);
        let xs = xv.shape();
        if xs.len() < 2 {
            return shape_err(format!("batch_norm: x {xs:?}"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if gv.numel() != channels || bv.numel() != channels {
            return shape_err(format!("batch_norm: {channels} channels, gamma {:?}", gv.shape()));
        }
        let eps = T::lit(BN_EPS);
        let count = batch * spatial;
        let (mean, var_biased, stats) = match source {
            NormSource::Batch => {
                if count < 2 {
                    return shape_err("batch_norm: batch statistics need at least 2 values per channel");
                }
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        s += xv.data()[(b * channels + c) * spatial..][..spatial].iter().copied().sum::<T>();
                    }
                    mean[c] = s / cnt;
                    let mut ss = T::zero();
                    for b in 0..batch {
                        for &v in &xv.data()[(b * channels + c) * spatial..][..spatial] {
                            let d = v - mean[c];
                            ss += d * d;
                        }
                    }
                    var[c] = ss / cnt;
                }
                let unbiased = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, var, Some(stats))
            }
            NormSource::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return shape_err("batch_norm: running statistics have the wrong length");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut y = vec![T::zero(); xv.numel()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * spatial;
                for s in 0..spatial {
                    let h = (xv.data()[off + s] - mean[c]) * inv_std[c];
                    xhat[off + s] = h;
                    y[off + s] = gv.data()[c] * h + bv.data()[c];
                }
            }
        }
        let value = Tensor::new(xs, y)?;
        let saved = BatchNormSaved {
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
            batch,
            channels,
            spatial,
        };
        let var = self.record(
            "batch_norm",
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                saved,
            },
            &[xi, gi, bi],
        )?;
        Ok((var, stats))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let slope = T::lit(slope);
        let data = self.node(xi).value.data().iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let value = Tensor::new(self.node(xi).value.shape(), data)?;
        self.record("leaky_relu", value, Op::LeakyRelu { x: xi, slope }, &[xi])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let data = self.node(xi).value.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.node(xi).value.shape(), data)?;
        self.record("tanh", value, Op::Tanh { x: xi }, &[xi])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factors: &Tensor<T>) -> Result<Var> {
        let xi = self.index(x)?;
        if self.node(xi).value.shape() != factors.shape() {
            return shape_err(format!(
                "mul_const: {:?} vs {:?}",
                self.node(xi).value.shape(),
                factors.shape()
            ));
        }
        let data = self.node(xi).value.data().iter().zip(factors.data()).map(|(&v, &f)| v * f).collect();
        let value = Tensor::new(factors.shape(), data)?;
        let op = Op::MulConst {
            x: xi,
            factors: factors.data().to_vec(),
        };
        self.record("mul_const", value, op, &[xi])
    }

    /// Elementwise `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.index(x)?;
        let (scale, shift) = (T::lit(scale), T::lit(shift));
        let data = self.node(xi).value.data().iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(self.node(xi).value.shape(), data)?;
        self.record("affine", value, Op::Affine { x: xi, scale }, &[xi])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let value = self.node(xi).value.clone().reshape(shape)?;
        self.record("reshape", value, Op::Reshape { x: xi }, &[xi])
    }

    /// Concatenation along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows of nothing");
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let tail = self.node(idx[0]).value.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = &self.node(i).value;
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return shape_err(format!("concat_rows: {:?} vs tail {tail:?}", v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        self.record("concat_rows", value, Op::Concat { parts: idx.clone() }, &idx)
    }

    /// Rows `start .. start + len` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let v = &self.node(xi).value;
        if v.shape().is_empty() || start + len > v.shape()[0] {
            return shape_err(format!("slice_rows {start}+{len} of {:?}", v.shape()));
        }
        let rl = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, v.data()[start * rl..(start + len) * rl].to_vec())?;
        self.record("slice_rows", value, Op::SliceRows { x: xi, start }, &[xi])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (&self.node(ai).value, &self.node(bi).value);
        if av.shape() != bv.shape() {
            return shape_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.record("add", value, Op::Add { a: ai, b: bi }, &[ai, bi])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s: T = self.node(xi).value.data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum { x: xi }, &[xi])
    }

    /// Gradient contributions of node `idx` to its inputs, given its output
    /// gradient `g`. Only inputs that require gradients are returned.
    pub(crate) fn backprop(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let mut out = Vec::new();
        let needs = |i: usize| self.node(i).requires_grad;
        match &self.node(idx).op {
            Op::Constant | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.node(*x).value, &self.node(*w).value);
                let (batch, inp, outn) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if needs(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    matmul(batch, outn, inp, g.data(), false, wv.data(), false, &mut dx, false);
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); outn * inp];
                    matmul(outn, batch, inp, g.data(), true, xv.data(), false, &mut dw, false);
                    out.push((*w, Tensor::new(wv.shape(), dw)?));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); outn];
                    for row in g.data().chunks(outn) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, Tensor::new(self.node(*b).value.shape(), db)?));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let spatial = geom.grid_h * geom.grid_w;
                let n = geom.grid_len();
                let dmat = nchw_to_cm(g.data(), geom.batch, geom.filters, spatial);
                if needs(*w) {
                    let mut dw = vec![T::zero(); geom.filters * geom.ckk()];
                    matmul(geom.filters, n, geom.ckk(), &dmat, false, cols, true, &mut dw, false);
                    out.push((*w, Tensor::new(self.node(*w).value.shape(), dw)?));
                }
                if needs(*b) {
                    let db = channel_sums(g.data(), geom.batch, geom.filters, spatial);
                    out.push((*b, Tensor::new(self.node(*b).value.shape(), db)?));
                }
                if needs(*x) {
                    let wv = &self.node(*w).value;
                    let mut dcols = vec![T::zero(); geom.ckk() * n];
                    matmul(geom.ckk(), geom.filters, n, wv.data(), true, &dmat, false, &mut dcols, false);
                    let mut dx = vec![T::zero(); self.node(*x).value.numel()];
                    geom.col2im(&dcols, &mut dx);
                    out.push((*x, Tensor::new(self.node(*x).value.shape(), dx)?));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let n = geom.grid_len();
                let dcols = geom.im2col(g.data());
                let spatial_in = geom.grid_h * geom.grid_w;
                if needs(*x) {
                    let wv = &self.node(*w).value;
                    let mut dxmat = vec![T::zero(); geom.filters * n];
                    matmul(geom.filters, geom.ckk(), n, wv.data(), false, &dcols, false, &mut dxmat, false);
                    let dx = cm_to_nchw(&dxmat, geom.batch, geom.filters, spatial_in);
                    out.push((*x, Tensor::new(self.node(*x).value.shape(), dx)?));
                }
                if needs(*w) {
                    let xmat = nchw_to_cm(self.node(*x).value.data(), geom.batch, geom.filters, spatial_in);
                    let mut dw = vec![T::zero(); geom.filters * geom.ckk()];
                    matmul(geom.filters, n, geom.ckk(), &xmat, false, &dcols, true, &mut dw, false);
                    out.push((*w, Tensor::new(self.node(*w).value.shape(), dw)?));
                }
                if needs(*b) {
                    let db = channel_sums(g.data(), geom.batch, geom.channels, geom.img_h * geom.img_w);
                    out.push((*b, Tensor::new(self.node(*b).value.shape(), db)?));
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let gv = &self.node(*gamma).value;
                let (batch, channels, spatial) = (saved.batch, saved.channels, saved.spatial);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * spatial;
                        for s in 0..spatial {
                            dgamma[c] += g.data()[off + s] * saved.xhat[off + s];
                            dbeta[c] += g.data()[off + s];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.numel()];
                    let m = T::from_usize(batch * spatial).unwrap();
                    for c in 0..channels {
                        let gam = gv.data()[c];
                        let scale = gam * saved.inv_std[c];
                        for b in 0..batch {
                            let off = (b * channels + c) * spatial;
                            for s in 0..spatial {
                                dx[off + s] = if saved.batch_stats {
                                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                                    scale * (g.data()[off + s] - dbeta[c] / m - saved.xhat[off + s] * dgamma[c] / m)
                                } else {
                                    scale * g.data()[off + s]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(g.shape(), dx)?));
                }
                if needs(*gamma) {
                    out.push((*gamma, Tensor::new(gv.shape(), dgamma)?));
                }
                if needs(*beta) {
                    out.push((*beta, Tensor::new(self.node(*beta).value.shape(), dbeta)?));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.node(*x).value;
                let dx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > T::zero() { d } else { d * *slope })
                    .collect();
                out.push((*x, Tensor::new(xv.shape(), dx)?));
            }
            Op::Tanh { x } => {
                let y = &self.node(idx).value;
                let dx = y.data().iter().zip(g.data()).map(|(&t, &d)| d * (T::one() - t * t)).collect();
                out.push((*x, Tensor::new(y.shape(), dx)?));
            }
            Op::Affine { x, scale } => {
                let dx = g.data().iter().map(|&d| d * *scale).collect();
                out.push((*x, Tensor::new(g.shape(), dx)?));
            }
            Op::MulConst { x, factors } => {
                let dx = g.data().iter().zip(factors).map(|(&d, &f)| d * f).collect();
                out.push((*x, Tensor::new(g.shape(), dx)?));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(self.node(*x).value.shape())?));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.node(p).value.numel();
                    if needs(p) {
                        out.push((p, Tensor::new(self.node(p).value.shape(), g.data()[offset..offset + len].to_vec())?));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &self.node(*x).value;
                let rl = xv.row_len();
                let mut dx = vec![T::zero(); xv.numel()];
                dx[start * rl..start * rl + g.numel()].copy_from_slice(g.data());
                out.push((*x, Tensor::new(xv.shape(), dx)?));
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(self.node(*x).value.shape(), g.item())));
            }
            Op::CrossEntropy { .. }
            | Op::Mae { .. }
            | Op::BceReal { .. }
            | Op::BceLogit { .. }
            | Op::FeatureMatch { .. } => {
                out.extend(self.backprop_loss(idx, g)?);
            }
        }
        out.retain(|(i, _)| needs(*i));
        Ok(out)
    }
}
