//! Forward and backward kernels shared by the tape and the tape-free
//! inference path. Both routes call the same functions, so a forward value
//! computed on a tape is bit-identical to the one computed without it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`,
/// each given with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= reach(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= reach(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a `[N, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[batch, in_channels, height, width] = input else {
            return Err(Error::shape(format!(
                "conv2d input must be [N, C, H, W], got {input:?}"
            )));
        };
        let &[out_channels, kc, kernel_h, kernel_w] = kernel else {
            return Err(Error::shape(format!(
                "conv2d kernel must be [O, C, kh, kw], got {kernel:?}"
            )));
        };
        if kc != in_channels {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {in_channels}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::shape("conv2d kernel must be non-empty"));
        }
        let span = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k {
                return Err(Error::shape(format!(
                    "kernel extent {k} exceeds padded input extent {padded}"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let out_h = span(height, kernel_h)?;
        let out_w = span(width, kernel_w)?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    /// Rows of the unfolded patch matrix: `C · kh · kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded patch matrix: `OH · OW`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn sample_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn output_dims(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Unfold one sample into a `patch_len × positions` matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = (c * self.kernel_h + i) * self.kernel_w + j;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let y = (oh * self.stride + i) as isize - pad;
                        let out_row = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if y < 0 || y >= self.height as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        if self.stride == 1 {
                            // valid output columns are the ones whose x = ow + j - pad is in range
                            let lo = (pad - j as isize).clamp(0, self.out_w as isize) as usize;
                            let hi = (self.width as isize + pad - j as isize).clamp(lo as isize, self.out_w as isize)
                                as usize;
                            out_row[..lo].fill(0.0);
                            let x0 = (lo as isize + j as isize - pad) as usize;
                            out_row[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                            out_row[hi..].fill(0.0);
                            continue;
                        }
                        for (ow, v) in out_row.iter_mut().enumerate() {
                            let x = (ow * self.stride + j) as isize - pad;
                            *v = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a `patch_len × positions` matrix back onto one sample.
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let p = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut sample[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = (c * self.kernel_h + i) * self.kernel_w + j;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let y = (oh * self.stride + i) as isize - pad;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for ow in 0..self.out_w {
                            let x = (ow * self.stride + j) as isize - pad;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: &Tensor, len: usize, what: &str) -> Result<()> {
    if bias.dims() != [len] {
        return Err(Error::shape(format!(
            "{what} bias must be [{len}], got {:?}",
            bias.dims()
        )));
    }
    Ok(())
}

/// Cross-correlation of a `[N, C, H, W]` batch with an `[O, C, kh, kw]`
/// kernel plus per-channel bias. When `keep_cols` is set the unfolded patch
/// matrices are returned for reuse by the backward pass.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    check_bias(bias, g.out_channels, "conv2d")?;
    let (k, p, o) = (g.patch_len(), g.positions(), g.out_channels);
    let mut out = Vec::with_capacity(g.batch * o * p);
    for _ in 0..g.batch {
        for &b in bias.data() {
            out.resize(out.len() + p, b);
        }
    }
    let mut kept = if keep_cols {
        vec![0.0; g.batch * k * p]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; k * p] };
    for n in 0..g.batch {
        let sample = &input.data()[n * g.sample_len()..(n + 1) * g.sample_len()];
        let cols: &mut [f64] = if keep_cols {
            &mut kept[n * k * p..(n + 1) * k * p]
        } else {
            &mut scratch
        };
        g.im2col(sample, cols);
        let dst = &mut out[n * o * p..(n + 1) * o * p];
        gemm(o, k, p, kernel.data(), (k, 1), cols, (p, 1), 1.0, dst);
    }
    let out = Tensor::new(g.output_dims(), out)?;
    Ok((out, keep_cols.then_some(kept)))
}

/// Gradients of a convolution. `cols` are the patch matrices saved by the
/// forward pass. Returns `(d_input, d_kernel, d_bias)`; `d_input` is only
/// computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input_dims: &[usize],
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    cols: &[f64],
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(input_dims, kernel.dims(), stride, padding)?;
    if grad_out.dims() != g.output_dims().as_slice() {
        return Err(Error::shape(format!(
            "conv2d gradient has dims {:?}, expected {:?}",
            grad_out.dims(),
            g.output_dims()
        )));
    }
    let (k, p, o) = (g.patch_len(), g.positions(), g.out_channels);
    let mut d_input = want_input.then(|| vec![0.0; g.batch * g.sample_len()]);
    let mut d_kernel = want_params.then(|| vec![0.0; o * k]);
    let mut d_bias = want_params.then(|| vec![0.0; o]);
    let mut d_cols = vec![0.0; if want_input { k * p } else { 0 }];
    for n in 0..g.batch {
        let gout = &grad_out.data()[n * o * p..(n + 1) * o * p];
        let sample_cols = &cols[n * k * p..(n + 1) * k * p];
        if let (Some(dk), Some(db)) = (d_kernel.as_mut(), d_bias.as_mut()) {
            // dK += gout[o×p] · colsᵀ[p×k]
            gemm(o, p, k, gout, (p, 1), sample_cols, (1, p), 1.0, dk);
            for (oc, row) in gout.chunks(p).enumerate() {
                db[oc] += row.iter().sum::<f64>();
            }
        }
        if let Some(di) = d_input.as_mut() {
            // dcols = Kᵀ[k×o] · gout[o×p]
            gemm(k, o, p, kernel.data(), (1, k), gout, (p, 1), 0.0, &mut d_cols);
            g.col2im(&d_cols, &mut di[n * g.sample_len()..(n + 1) * g.sample_len()]);
        }
    }
    Ok((
        d_input.map(|d| Tensor::new(input_dims.to_vec(), d)).transpose()?,
        d_kernel.map(|d| Tensor::new(kernel.dims().to_vec(), d)).transpose()?,
        d_bias.map(Tensor::from_vec),
    ))
}

/// 2×2, stride-2 max pooling over `[N, C, H, W]`; odd trailing rows/columns
/// are dropped. Returns the pooled tensor and, for each output cell, the flat
/// input index of the first maximal element in row-major window order.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[n, c, h, w] = input.dims() else {
        return Err(Error::shape(format!(
            "max-pool input must be [N, C, H, W], got {:?}",
            input.dims()
        )));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!(
            "max-pool needs at least 2×2 spatial input, got {h}×{w}"
        )));
    }
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = base + 2 * y * w + 2 * x;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// Values of [`max_pool2`] without the argmax bookkeeping.
pub fn max_pool2_values(input: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = input.dims() else {
        return Err(Error::shape(format!(
            "max-pool input must be [N, C, H, W], got {:?}",
            input.dims()
        )));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!(
            "max-pool needs at least 2×2 spatial input, got {h}×{w}"
        )));
    }
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            let top = &src[base + 2 * y * w..base + 2 * y * w + 2 * ow];
            let bottom = &src[base + (2 * y + 1) * w..base + (2 * y + 1) * w + 2 * ow];
            for (t, b) in top.chunks_exact(2).zip(bottom.chunks_exact(2)) {
                out.push(t[0].max(t[1]).max(b[0]).max(b[1]));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Affine map of a `[N, D]` batch: `x · Wᵀ + b` with `W` shaped `[O, D]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d, o) = dense_dims(input, weight)?;
    check_bias(bias, o, "dense")?;
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, d, o, input.data(), (d, 1), weight.data(), (1, d), 1.0, &mut out);
    Tensor::new(vec![n, o], out)
}

fn dense_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let &[n, d] = input.dims() else {
        return Err(Error::shape(format!(
            "dense input must be [N, D], got {:?}",
            input.dims()
        )));
    };
    let &[o, wd] = weight.dims() else {
        return Err(Error::shape(format!(
            "dense weight must be [O, D], got {:?}",
            weight.dims()
        )));
    };
    if wd != d {
        return Err(Error::shape(format!(
            "dense weight expects {wd} features, input has {d}"
        )));
    }
    Ok((n, d, o))
}

/// Gradients of [`dense`]: `(d_input, d_weight, d_bias)`.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (n, d, o) = dense_dims(input, weight)?;
    if grad_out.dims() != [n, o] {
        return Err(Error::shape(format!(
            "dense gradient has dims {:?}, expected [{n}, {o}]",
            grad_out.dims()
        )));
    }
    let gy = grad_out.data();
    let d_input = if want_input {
        let mut gx = vec![0.0; n * d];
        gemm(n, o, d, gy, (o, 1), weight.data(), (d, 1), 0.0, &mut gx);
        Some(Tensor::new(vec![n, d], gx)?)
    } else {
        None
    };
    let (d_weight, d_bias) = if want_params {
        let mut gw = vec![0.0; o * d];
        gemm(o, n, d, gy, (1, o), input.data(), (d, 1), 0.0, &mut gw);
        let mut gb = vec![0.0; o];
        for row in gy.chunks(o) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        (Some(Tensor::new(vec![o, d], gw)?), Some(Tensor::from_vec(gb)))
    } else {
        (None, None)
    };
    Ok((d_input, d_weight, d_bias))
}

/// Per-row softmax cross-entropy of `[N, K]` logits. Returns the row losses
/// and the row-major softmax probabilities.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let &[n, k] = logits.dims() else {
        return Err(Error::shape(format!("logits must be [N, K], got {:?}", logits.dims())));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut losses = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        if label >= k {
            return Err(Error::Index(format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // The max term contributes exp(0) = 1, so the sum is never below 1.
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        losses.push(log_norm - row[label]);
        probs.extend(row.iter().map(|&z| (z - log_norm).exp()));
    }
    Ok((losses, probs))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let input = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let kernel = Tensor::full(&[1, 1, 1, 1], 1.0);
        let bias = Tensor::zeros(&[1]);
        let (out, _) = conv2d(&input, &kernel, &bias, 1, 0, false).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let input = Tensor::full(&[1, 1, 2, 2], 1.0);
        let kernel = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (out, _) = conv2d(&input, &kernel, &Tensor::zeros(&[1]), 1, 0, false).unwrap();
        assert_eq!(out.dims(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn conv_output_size_follows_floor_rule() {
        let input = Tensor::zeros(&[1, 2, 7, 6]);
        let kernel = Tensor::zeros(&[3, 2, 3, 2]);
        let (out, _) = conv2d(&input, &kernel, &Tensor::zeros(&[3]), 2, 1, false).unwrap();
        // (7 + 2 - 3) / 2 + 1 = 4, (6 + 2 - 2) / 2 + 1 = 4
        assert_eq!(out.dims(), &[1, 3, 4, 4]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        let bias = Tensor::zeros(&[1]);
        let wrong_channels = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&input, &wrong_channels, &bias, 1, 0, false),
            Err(Error::Shape(_))
        ));
        let too_big = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            conv2d(&input, &too_big, &bias, 1, 0, false),
            Err(Error::Shape(_))
        ));
        let ok = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&input, &ok, &bias, 0, 0, false).is_err());
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, arg) = max_pool2(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let l = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_rows(&l, &[1]).unwrap();
        assert_eq!(loss[0], std::f64::consts::LN_2);

        let l = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_rows(&l, &[0]).unwrap();
        assert!((loss[0] - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
        assert!((loss[0] - 0.1269280110).abs() < 1e-10);

        let l = Tensor::zeros(&[1, 4]);
        let (loss, _) = cross_entropy_rows(&l, &[3]).unwrap();
        assert!((loss[0] - 4f64.ln()).abs() < 1e-15);
        assert!((loss[0] - 1.3862943611).abs() < 1e-10);

        assert!(matches!(cross_entropy_rows(&l, &[4]), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let l = Tensor::new(vec![1, 3], vec![1000.0, -1000.0, 0.0]).unwrap();
        let (loss, probs) = cross_entropy_rows(&l, &[1]).unwrap();
        assert!((loss[0] - 2000.0).abs() < 1e-9);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
