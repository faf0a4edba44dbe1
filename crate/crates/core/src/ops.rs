//! Eager tensor kernels. The tape in [`crate::autodiff`] records these and
//! supplies their adjoints; nothing here tracks gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix stored in `data`.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
        }
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    assert!(a.data.len() >= a.span(m, k), "gemm: lhs buffer too small");
    assert!(b.data.len() >= b.span(k, n), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, Mat::rows(a.data(), k), Mat::rows(b.data(), n), 0.0, &mut out);
    Tensor::new([m, n], out)
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

/// Adds `bias[c]` to every element of channel `c` (axis 1) of `x`.
pub fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1) {
        return Err(Error::dimension("bias_add", x.shape(), bias.shape()));
    }
    let channels = x.dim(1);
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = x.clone();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
        if inner == 0 {
            break;
        }
        let b = bias.data()[chunk_idx % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

/// 2×2 max pooling with stride 2 (floor geometry). Returns the pooled tensor
/// and, for each output element, the flat input index of its maximum
/// (first occurrence on ties).
pub fn max_pool2d(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    if x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2 {
        return Err(Error::dimension("max_pool2d", x.shape(), &[2, 2]));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, argmax))
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(Error::dimension("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::argument("conv2d stride must be at least 1"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::argument(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
            )));
        }
        Ok(Self {
            channels: input[1],
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Unfolds one `C×H×W` sample into a `(C·kh·kw) × (out_h·out_w)` matrix.
    pub fn im2col(&self, sample: &[f32], cols: &mut [f32]) {
        let out_len = self.out_len();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * out_len..(row + 1) * out_len];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &sample[(c * self.height + iy as usize) * self.width..][..self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back into a sample, accumulating.
    pub fn col2im(&self, cols: &[f32], sample: &mut [f32]) {
        let out_len = self.out_len();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * out_len..(row + 1) * out_len];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut sample[(c * self.height + iy as usize) * self.width..][..self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an `N×C×H×W` input with an `F×C×kh×kw` kernel,
/// zero padding, floor output geometry.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_forward(input, kernel, stride, pad, false).map(|(out, _)| out)
}

/// Forward convolution; optionally keeps the unfolded input for the kernel gradient.
pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<f32>>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let n = input.dim(0);
    let filters = kernel.dim(0);
    let (patch, out_len) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; n * filters * out_len];
    let mut saved = keep_cols.then(|| vec![0.0; n * patch * out_len]);
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![0.0; patch * out_len]
    };
    for s in 0..n {
        let cols: &mut [f32] = match saved.as_mut() {
            Some(all) => &mut all[s * patch * out_len..(s + 1) * patch * out_len],
            None => &mut scratch,
        };
        g.im2col(&input.data()[s * g.in_len()..(s + 1) * g.in_len()], cols);
        gemm(
            filters,
            patch,
            out_len,
            Mat::rows(kernel.data(), patch),
            Mat::rows(cols, out_len),
            0.0,
            &mut out[s * filters * out_len..(s + 1) * filters * out_len],
        );
    }
    Ok((Tensor::new([n, filters, g.out_h, g.out_w], out)?, saved))
}

/// Gradients of a convolution with respect to its input and/or kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    saved_cols: Option<&[f32]>,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, pad)?;
    let n = input.dim(0);
    let filters = kernel.dim(0);
    let (patch, out_len) = (g.patch_len(), g.out_len());
    let mut d_input = need_input.then(|| vec![0.0; input.numel()]);
    let mut d_kernel = need_kernel.then(|| vec![0.0; kernel.numel()]);
    let mut cols_buf = vec![0.0; patch * out_len];
    let mut dcols = if need_input {
        vec![0.0; patch * out_len]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let dout = &grad_out.data()[s * filters * out_len..(s + 1) * filters * out_len];
        if let Some(dk) = d_kernel.as_mut() {
            let cols: &[f32] = match saved_cols {
                Some(all) => &all[s * patch * out_len..(s + 1) * patch * out_len],
                None => {
                    g.im2col(&input.data()[s * g.in_len()..(s + 1) * g.in_len()], &mut cols_buf);
                    &cols_buf
                }
            };
            // dK[F×P] += dOut[F×L] · colsᵀ[L×P]
            gemm(
                filters,
                out_len,
                patch,
                Mat::rows(dout, out_len),
                Mat::transposed(cols, out_len),
                1.0,
                dk,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            // dCols[P×L] = Kᵀ[P×F] · dOut[F×L]
            gemm(
                patch,
                filters,
                out_len,
                Mat::transposed(kernel.data(), patch),
                Mat::rows(dout, out_len),
                0.0,
                &mut dcols,
            );
            g.col2im(&dcols, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
        }
    }
    Ok((
        d_input.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        d_kernel.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
    ))
}

/// How a per-sample loss is reduced over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Softmax cross-entropy of `N×K` logits against integer labels.
/// Returns the reduced loss and the row-wise softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], reduction: Reduction) -> Result<(f32, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::dimension(
            "softmax_cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::argument(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &z in row {
            denom += f64::from(z - max).exp();
        }
        let log_denom = denom.ln();
        for (p, &z) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (f64::from(z - max) - log_denom).exp() as f32;
        }
        total += log_denom - f64::from(row[y] - max);
    }
    let loss = match reduction {
        Reduction::Mean if n > 0 => total / n as f64,
        _ => total,
    };
    Ok((loss as f32, Tensor::new([n, k], probs)?))
}

/// Row-wise softmax of an `N×K` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::dimension("softmax", logits.shape(), &[0, 0]));
    }
    let labels = vec![0; logits.dim(0)];
    if logits.dim(1) == 0 {
        return Ok(logits.clone());
    }
    softmax_cross_entropy(logits, &labels, Reduction::Sum).map(|(_, p)| p)
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape().first().copied().unwrap_or(0);
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
