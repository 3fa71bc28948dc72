//! im2col convolution kernels backed by `matrixmultiply::sgemm`.

/// Geometry of a square-kernel 2-D convolution on one batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Rows of the column matrix: `in_channels * kernel * kernel`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// A 1x1 stride-1 unpadded convolution needs no column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Number of elements spanned by a matrix with the given shape and strides.
fn span(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    assert!(strides.0 >= 0 && strides.1 >= 0);
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

/// `c = a * b + beta * c` with explicit strides.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= span(m, k, a_strides));
    assert!(b.len() >= span(k, n, b_strides));
    assert!(c.len() >= span(m, n, c_strides));
    // SAFETY: the assertions above bound every element sgemm reads or writes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Output columns `ox` whose input column `ox * stride - pad + kx` lies in
/// `0..width`.
fn valid_span(g: &ConvGeometry, kx: usize, ow: usize) -> (usize, usize) {
    let (s, p, w) = (g.stride as isize, g.pad as isize, g.width as isize);
    let off = kx as isize - p;
    // ox * s + off >= 0  and  ox * s + off < w
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if w - off <= 0 {
        0
    } else {
        (w - off + s - 1) / s
    };
    let lo = (lo as usize).min(ow);
    (lo, (hi as usize).clamp(lo, ow))
}

/// Fill the column matrix for output rows `oy0..oy1`. `cols` has
/// `patch_len` rows of `(oy1 - oy0) * out_width` entries.
pub fn im2col_rows(input: &[f32], g: &ConvGeometry, oy0: usize, oy1: usize, cols: &mut [f32]) {
    let ow = g.out_width();
    let tile = (oy1 - oy0) * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * tile);
    let (h, w) = (g.height as isize, g.width);
    let (s, p) = (g.stride, g.pad as isize);
    for ci in 0..g.in_channels {
        let src = &input[ci * g.height * w..(ci + 1) * g.height * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * tile..(row + 1) * tile];
                let (lo, hi) = valid_span(g, kx, ow);
                for oy in oy0..oy1 {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let out_row = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo < hi {
                        let first = lo * s + kx - g.pad;
                        if s == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (o, v) in out_row[lo..hi]
                                .iter_mut()
                                .zip(src_row[first..].iter().step_by(s))
                            {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column-matrix gradient for output rows `oy0..oy1` back
/// onto the input gradient.
pub fn col2im_rows(cols: &[f32], g: &ConvGeometry, oy0: usize, oy1: usize, grad_input: &mut [f32]) {
    let ow = g.out_width();
    let tile = (oy1 - oy0) * ow;
    let (h, w) = (g.height as isize, g.width);
    let (s, p) = (g.stride, g.pad as isize);
    for ci in 0..g.in_channels {
        let dst = &mut grad_input[ci * g.height * w..(ci + 1) * g.height * w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * tile..(row + 1) * tile];
                let (lo, hi) = valid_span(g, kx, ow);
                if lo >= hi {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[(oy - oy0) * ow + lo..(oy - oy0) * ow + hi];
                    let first = lo * s + kx - g.pad;
                    if s == 1 {
                        for (d, v) in dst_row[first..first + src_row.len()]
                            .iter_mut()
                            .zip(src_row)
                        {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst_row[first..].iter_mut().step_by(s).zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn im2col(input: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    im2col_rows(input, g, 0, g.out_height(), cols);
}

pub fn col2im(cols: &[f32], g: &ConvGeometry, grad_input: &mut [f32]) {
    col2im_rows(cols, g, 0, g.out_height(), grad_input);
}

/// Transposed column tile for output rows `oy0..oy1`: one row of
/// `patch_len` entries per output pixel.
pub fn im2col_rows_t(input: &[f32], g: &ConvGeometry, oy0: usize, oy1: usize, cols_t: &mut [f32]) {
    let ow = g.out_width();
    let k = g.patch_len();
    let kk = g.kernel;
    debug_assert_eq!(cols_t.len(), k * (oy1 - oy0) * ow);
    let (h, w) = (g.height as isize, g.width as isize);
    let (s, p) = (g.stride as isize, g.pad as isize);
    let plane = g.height * g.width;
    for oy in oy0..oy1 {
        let iy0 = oy as isize * s - p;
        let rows_inside = iy0 >= 0 && iy0 + kk as isize <= h;
        for ox in 0..ow {
            let ix0 = ox as isize * s - p;
            let dst = &mut cols_t[((oy - oy0) * ow + ox) * k..][..k];
            if rows_inside && ix0 >= 0 && ix0 + kk as isize <= w {
                let base = iy0 as usize * g.width + ix0 as usize;
                for (ci, chunk) in dst.chunks_exact_mut(kk * kk).enumerate() {
                    for (ky, taps) in chunk.chunks_exact_mut(kk).enumerate() {
                        let at = ci * plane + base + ky * g.width;
                        taps.copy_from_slice(&input[at..at + kk]);
                    }
                }
                continue;
            }
            let mut i = 0;
            for ci in 0..g.in_channels {
                for ky in 0..kk as isize {
                    for kx in 0..kk as isize {
                        let (iy, ix) = (iy0 + ky, ix0 + kx);
                        dst[i] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            input[ci * plane + (iy * w + ix) as usize]
                        } else {
                            0.0
                        };
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Column tiles are kept around this many floats so they stay in cache.
const TILE_FLOATS: usize = 1 << 18;

fn tile_rows(g: &ConvGeometry) -> usize {
    (TILE_FLOATS / (g.patch_len() * g.out_width()).max(1)).clamp(1, g.out_height().max(1))
}

/// Forward pass for one batch item.
pub fn conv_forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    g: &ConvGeometry,
    out: &mut [f32],
) {
    let plane = g.out_plane();
    let ow = g.out_width();
    let k = g.patch_len();
    for (o, b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].fill(*b);
    }
    if g.is_pointwise() {
        gemm(
            g.out_channels,
            k,
            plane,
            weight,
            (k as isize, 1),
            input,
            (plane as isize, 1),
            1.0,
            out,
            (plane as isize, 1),
        );
        return;
    }
    let rows = tile_rows(g);
    let mut cols = vec![0.0; k * rows * ow];
    let oh = g.out_height();
    let mut oy = 0;
    while oy < oh {
        let end = (oy + rows).min(oh);
        let n = (end - oy) * ow;
        let cols = &mut cols[..k * n];
        im2col_rows(input, g, oy, end, cols);
        gemm(
            g.out_channels,
            k,
            n,
            weight,
            (k as isize, 1),
            cols,
            (n as isize, 1),
            1.0,
            &mut out[oy * ow..],
            (plane as isize, 1),
        );
        oy = end;
    }
}

/// Backward pass for one batch item, accumulating into the provided buffers.
/// Column tiles are rebuilt from `input` rather than stored.
pub fn conv_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    g: &ConvGeometry,
    mut grad_input: Option<&mut [f32]>,
    mut grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    let plane = g.out_plane();
    let ow = g.out_width();
    let k = g.patch_len();
    let co = g.out_channels;
    if let Some(gb) = grad_bias {
        for (o, b) in gb.iter_mut().enumerate() {
            *b += grad_out[o * plane..(o + 1) * plane].iter().sum::<f32>();
        }
    }
    if g.is_pointwise() {
        if let Some(gw) = grad_weight {
            gemm(
                co,
                plane,
                k,
                grad_out,
                (plane as isize, 1),
                input,
                (1, plane as isize),
                1.0,
                gw,
                (k as isize, 1),
            );
        }
        if let Some(gi) = grad_input {
            gemm(
                k,
                co,
                plane,
                weight,
                (1, k as isize),
                grad_out,
                (plane as isize, 1),
                1.0,
                gi,
                (plane as isize, 1),
            );
        }
        return;
    }
    let rows = tile_rows(g);
    let mut cols = vec![0.0; k * rows * ow];
    let mut cols_t = if grad_weight.is_some() {
        vec![0.0; k * rows * ow]
    } else {
        Vec::new()
    };
    let oh = g.out_height();
    let mut oy = 0;
    while oy < oh {
        let end = (oy + rows).min(oh);
        let n = (end - oy) * ow;
        let cols = &mut cols[..k * n];
        let dout = &grad_out[oy * ow..];
        if let Some(gw) = grad_weight.as_deref_mut() {
            // dW += dOut * cols^T, with cols^T built row-major: sgemm packs a
            // contiguous right operand much faster than a strided one.
            let cols_t = &mut cols_t[..k * n];
            im2col_rows_t(input, g, oy, end, cols_t);
            gemm(
                co,
                n,
                k,
                dout,
                (plane as isize, 1),
                cols_t,
                (k as isize, 1),
                1.0,
                gw,
                (k as isize, 1),
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dCols = W^T * dOut
            gemm(
                k,
                co,
                n,
                weight,
                (1, k as isize),
                dout,
                (plane as isize, 1),
                0.0,
                cols,
                (n as isize, 1),
            );
            col2im_rows(cols, g, oy, end, gi);
        }
        oy = end;
    }
}
