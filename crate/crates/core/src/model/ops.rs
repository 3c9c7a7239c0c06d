//! 3×3 same-padded convolution via im2col + GEMM, 2×2 max pooling, leaky ReLU.
//! Activations are CHW, row-major.

/// Target size of one im2col tile, in floats.
const TILE_FLOATS: usize = 1 << 17;

/// Output rows per tile for a layer with `k` im2col rows.
fn tile_rows(k: usize, side: usize) -> usize {
    (TILE_FLOATS / (k * side)).clamp(1, side)
}

/// im2col restricted to output rows `y0..y1`: row `c*9 + ky*3 + kx`,
/// column `(y-y0)*side + x` holds `input[c][y+ky-1][x+kx-1]` (zero outside).
pub(crate) fn im2col_rows(input: &[f32], channels: usize, side: usize, y0: usize, y1: usize, col: &mut Vec<f32>) {
    let hw = side * side;
    let n = (y1 - y0) * side;
    col.clear();
    col.resize(channels * 9 * n, 0.0);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * n..][..n];
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { side - 1 } else { side };
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * side + x_lo + kx - 1..][..x_hi - x_lo];
                    row[(y - y0) * side + x_lo..][..x_hi - x_lo].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: adds column gradients into `grad_input`.
pub(crate) fn col2im_rows(col: &[f32], channels: usize, side: usize, y0: usize, y1: usize, grad_input: &mut [f32]) {
    let hw = side * side;
    let n = (y1 - y0) * side;
    for c in 0..channels {
        let plane = &mut grad_input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * n..][..n];
                let x_lo = usize::from(kx == 0);
                let x_hi = if kx == 2 { side - 1 } else { side };
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * side + x_lo + kx - 1..][..x_hi - x_lo];
                    let src = &row[(y - y0) * side + x_lo..][..x_hi - x_lo];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn im2col(input: &[f32], channels: usize, side: usize, col: &mut Vec<f32>) {
    im2col_rows(input, channels, side, 0, side, col);
}

#[cfg(test)]
pub(crate) fn col2im(col: &[f32], channels: usize, side: usize, grad_input: &mut [f32]) {
    grad_input.iter_mut().for_each(|v| *v = 0.0);
    col2im_rows(col, channels, side, 0, side, grad_input);
}

/// Row-major matrix view: `(data, row stride)`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f32],
    ld: usize,
    transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], ld: usize) -> Self {
        Self { data, ld, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        let (r, c) = if self.transposed { (cols, rows) } else { (rows, cols) };
        r == 0 || c == 0 || (r - 1) * self.ld + c <= self.data.len()
    }
}

/// `c = a · b + beta·c` where `a` is m×k, `b` is k×n and `c` is m×n with
/// row stride `ldc`.
pub(crate) fn gemm_into(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f32, c: &mut [f32], ldc: usize) {
    assert!(a.covers(m, k) && b.covers(k, n));
    assert!(m == 0 || n == 0 || (m - 1) * ldc + n <= c.len());
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Dense row-major `c (m×n) = a (m×k) · b (k×n) + beta·c`; `a_t`/`b_t` read
/// the stored operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    let a = if a_t { Mat::new(a, m).t() } else { Mat::new(a, k) };
    let b = if b_t { Mat::new(b, k).t() } else { Mat::new(b, n) };
    gemm_into(m, k, n, a, b, beta, c, n);
}

/// Convolution plus bias plus leaky ReLU. `col` is scratch space.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    input: &[f32],
    in_channels: usize,
    out_channels: usize,
    side: usize,
    weight: &[f32],
    bias: &[f32],
    slope: f32,
    col: &mut Vec<f32>,
) -> Vec<f32> {
    let hw = side * side;
    let k = in_channels * 9;
    let mut out = vec![0.0f32; out_channels * hw];
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[o]);
    }
    let step = tile_rows(k, side);
    for y0 in (0..side).step_by(step) {
        let y1 = (y0 + step).min(side);
        im2col_rows(input, in_channels, side, y0, y1, col);
        let n = (y1 - y0) * side;
        gemm_into(
            out_channels,
            k,
            n,
            Mat::new(weight, k),
            Mat::new(col, n),
            1.0,
            &mut out[y0 * side..],
            hw,
        );
    }
    for v in &mut out {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Back-propagates through leaky ReLU and the convolution. `grad_out` holds
/// the gradient with respect to the activated output and is overwritten
/// with the pre-activation gradient. Returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f32],
    output: &[f32],
    grad_out: &mut [f32],
    in_channels: usize,
    out_channels: usize,
    side: usize,
    weight: &[f32],
    slope: f32,
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    need_input_grad: bool,
    col: &mut Vec<f32>,
) -> Option<Vec<f32>> {
    let hw = side * side;
    let k = in_channels * 9;
    for (g, &y) in grad_out.iter_mut().zip(output) {
        if y <= 0.0 {
            *g *= slope;
        }
    }
    for (o, row) in grad_out.chunks_exact(hw).enumerate() {
        grad_bias[o] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
    let mut grad_in = need_input_grad.then(|| vec![0.0f32; in_channels * hw]);
    let mut dcol = Vec::new();
    let step = tile_rows(k, side);
    for y0 in (0..side).step_by(step) {
        let y1 = (y0 + step).min(side);
        let n = (y1 - y0) * side;
        let g = Mat::new(&grad_out[y0 * side..], hw);
        im2col_rows(input, in_channels, side, y0, y1, col);
        gemm_into(out_channels, n, k, g, Mat::new(col, n).t(), 1.0, grad_weight, k);
        if let Some(grad_in) = grad_in.as_mut() {
            dcol.resize(k * n, 0.0);
            gemm_into(k, out_channels, n, Mat::new(weight, k).t(), g, 0.0, &mut dcol, n);
            col2im_rows(&dcol, in_channels, side, y0, y1, grad_in);
        }
    }
    grad_in
}

/// 2×2 max pool with stride 2; returns pooled values and the flat input
/// index of each maximum (first maximum wins).
pub(crate) fn max_pool(input: &[f32], channels: usize, side: usize) -> (Vec<f32>, Vec<u32>) {
    let half = side / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut idx = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * side * side;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * side + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * side + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn max_pool_backward(grad_out: &[f32], indices: &[u32], input_len: usize) -> Vec<f32> {
    let mut grad = vec![0.0f32; input_len];
    for (&g, &i) in grad_out.iter().zip(indices) {
        grad[i as usize] += g;
    }
    grad
}
