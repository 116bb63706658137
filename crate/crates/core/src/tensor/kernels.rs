//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices; shape validation happens in the tape layer.

/// Strided matrix view: `(data, rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn span_ok(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs;
        last >= 0 && (last as usize) < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub fn gemm_into(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], alpha: f64, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert!(a.span_ok() && b.span_ok(), "gemm operand out of bounds");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays
    // inside the three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major `[m,k] x [k,n]` product.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_into(MatRef::row_major(a, m, k), MatRef::row_major(b, k, n), &mut c, 1.0, 0.0);
    c
}

/// Output extent of a convolution or pooling window, `None` when empty.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[C,H,W]` into `[C*kh*kw, OH*OW]`.
fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward. Returns the output buffer and the unfolded
/// columns of every image (kept for the backward pass).
pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let img_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; g.n * rows * p];
    let mut out = vec![0.0; g.n * g.o * p];
    let w = MatRef::row_major(kernel, g.o, rows);
    for b in 0..g.n {
        let col = &mut cols[b * rows * p..(b + 1) * rows * p];
        im2col(&input[b * img_len..(b + 1) * img_len], g, col);
        gemm_into(w, MatRef::row_major(col, rows, p), &mut out[b * g.o * p..(b + 1) * g.o * p], 1.0, 0.0);
    }
    (out, cols)
}

/// Gradients of the convolution with respect to input and kernel.
pub(crate) fn conv2d_backward(
    grad_out: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let img_len = g.c * g.h * g.w;
    let mut d_kernel = want_kernel.then(|| vec![0.0; g.o * rows]);
    let mut d_input = want_input.then(|| vec![0.0; g.n * img_len]);
    let mut dcol = if want_input { vec![0.0; rows * p] } else { Vec::new() };
    let w = MatRef::row_major(kernel, g.o, rows);
    for b in 0..g.n {
        let dy = MatRef::row_major(&grad_out[b * g.o * p..(b + 1) * g.o * p], g.o, p);
        if let Some(dk) = d_kernel.as_mut() {
            let col = MatRef::row_major(&cols[b * rows * p..(b + 1) * rows * p], rows, p);
            gemm_into(dy, col.t(), dk, 1.0, 1.0);
        }
        if let Some(dx) = d_input.as_mut() {
            gemm_into(w.t(), dy, &mut dcol, 1.0, 0.0);
            col2im(&dcol, g, &mut dx[b * img_len..(b + 1) * img_len]);
        }
    }
    (d_input, d_kernel)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling; also returns, per output, the flat input index that won
/// (first maximal element in row-major window order).
pub(crate) fn max_pool_forward(input: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let i = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward(input: &[f64], g: &PoolGeom) -> Vec<f64> {
    let scale = 1.0 / (g.window * g.window) as f64;
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    acc += input[row..row + g.window].iter().sum::<f64>();
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], g: &PoolGeom) -> Vec<f64> {
    let scale = 1.0 / (g.window * g.window) as f64;
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for plane in 0..g.planes {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = grad_out[(plane * g.oh + oy) * g.ow + ox] * scale;
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &mut dx[row..row + g.window] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel statistics layout for an `[N,C,H,W]` (or `[N,C]`) buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelGeom {
    pub n: usize,
    pub c: usize,
    pub spatial: usize,
}

impl ChannelGeom {
    pub fn count(&self) -> usize {
        self.n * self.spatial
    }

    pub fn for_each_channel_block(&self, channel: usize, mut f: impl FnMut(std::ops::Range<usize>)) {
        for b in 0..self.n {
            let start = (b * self.c + channel) * self.spatial;
            f(start..start + self.spatial);
        }
    }
}

/// Mean and biased variance of every channel.
pub(crate) fn channel_moments(x: &[f64], g: &ChannelGeom) -> (Vec<f64>, Vec<f64>) {
    let m = g.count() as f64;
    let mut mean = vec![0.0; g.c];
    let mut var = vec![0.0; g.c];
    for ch in 0..g.c {
        let mut s = 0.0;
        g.for_each_channel_block(ch, |r| s += x[r].iter().sum::<f64>());
        let mu = s / m;
        let mut v = 0.0;
        g.for_each_channel_block(ch, |r| v += x[r].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>());
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Row-wise log-softmax of `x / tau` for a `[rows, k]` buffer.
pub(crate) fn log_softmax_rows(x: &[f64], k: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(k) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) / tau;
        let lse = row.iter().map(|&v| (v / tau - m).exp()).sum::<f64>().ln() + m;
        out.extend(row.iter().map(|&v| v / tau - lse));
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_case() {
        let c = gemm(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn transposed_views() {
        // a^T b with a = [[1,2],[3,4]] stored row-major.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; 4];
        gemm_into(MatRef::row_major(&a, 2, 2).t(), MatRef::row_major(&b, 2, 2), &mut c, 1.0, 0.0);
        assert_eq!(c, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn output_dims() {
        assert_eq!(conv_output_dim(32, 3, 1, 1), Some(32));
        assert_eq!(conv_output_dim(8, 2, 2, 0), Some(4));
        assert_eq!(conv_output_dim(2, 3, 1, 0), None);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
