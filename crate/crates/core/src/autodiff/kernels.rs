//! Dense numeric kernels behind the graph ops. All loops run in a fixed
//! order so results are bit-reproducible.

/// Geometry of one "same"-padded NHWC convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn same(
        batch: usize,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: (usize, usize),
    ) -> Self {
        let (sh, sw) = stride;
        let ho = h.div_ceil(sh);
        let wo = w.div_ceil(sw);
        let pad_h = ((ho - 1) * sh + kh).saturating_sub(h);
        let pad_w = ((wo - 1) * sw + kw).saturating_sub(w);
        Self {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            sh,
            sw,
            ho,
            wo,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input column range `[lo, hi)` of kernel taps `j` that land inside the
    /// image for output column `ox`, as `(j_lo, j_hi, x_of_j_lo)`.
    #[inline]
    fn tap_range(&self, ox: usize) -> (usize, usize, usize) {
        let x0 = (ox * self.sw) as isize - self.pad_left as isize;
        let j_lo = (-x0).max(0) as usize;
        let j_hi = ((self.w as isize - x0).min(self.kw as isize)).max(0) as usize;
        (j_lo, j_hi.max(j_lo), (x0 + j_lo as isize) as usize)
    }
}

/// Unfolds `x` (`[B, H, W, Cin]`) into `[B*Ho*Wo, Kh*Kw*Cin]` patches.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut Vec<f64>) {
    let plen = g.patch_len();
    cols.clear();
    cols.resize(g.out_rows() * plen, 0.0);
    let row_stride = g.w * g.cin;
    let img_stride = g.h * row_stride;
    let mut r = 0;
    for b in 0..g.batch {
        let img = &x[b * img_stride..(b + 1) * img_stride];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let patch = &mut cols[r * plen..(r + 1) * plen];
                let (j_lo, j_hi, x_lo) = g.tap_range(ox);
                for i in 0..g.kh {
                    let y = (oy * g.sh + i) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.h as isize || j_hi == j_lo {
                        continue;
                    }
                    let n = (j_hi - j_lo) * g.cin;
                    let src = y as usize * row_stride + x_lo * g.cin;
                    let dst = (i * g.kw + j_lo) * g.cin;
                    patch[dst..dst + n].copy_from_slice(&img[src..src + n]);
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plen = g.patch_len();
    let row_stride = g.w * g.cin;
    let img_stride = g.h * row_stride;
    let mut r = 0;
    for b in 0..g.batch {
        let img = &mut dx[b * img_stride..(b + 1) * img_stride];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let patch = &cols[r * plen..(r + 1) * plen];
                let (j_lo, j_hi, x_lo) = g.tap_range(ox);
                for i in 0..g.kh {
                    let y = (oy * g.sh + i) as isize - g.pad_top as isize;
                    if y < 0 || y >= g.h as isize || j_hi == j_lo {
                        continue;
                    }
                    let n = (j_hi - j_lo) * g.cin;
                    let dst = y as usize * row_stride + x_lo * g.cin;
                    let src = (i * g.kw + j_lo) * g.cin;
                    for (d, s) in img[dst..dst + n].iter_mut().zip(&patch[src..src + n]) {
                        *d += s;
                    }
                }
                r += 1;
            }
        }
    }
}

/// `c = op(a) . op(b) + beta * c` for row-major operands, where `op`
/// optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Broadcasts `bias` over the rows of a row-major `[rows, bias.len()]` buffer.
pub fn add_row_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub fn column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// Per-channel mean and biased variance of a `[rows, c]` buffer (two-pass).
pub fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = (x.len() / c) as f64;
    let mut mean = column_sums(x, c);
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows);
    (mean, var)
}
