//! Dense kernels behind the conv and linear ops.
//!
//! Every reduction runs in a fixed order (explicit 8-lane accumulators for dot
//! products, ascending inner index for row updates), so results do not depend
//! on the SIMD width the compiler picks.

use super::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += op(a) · b[k×n]`, where `op(a)[i][p] = a[i * rs + p * cs]`.
///
/// Register-tiled: `MR` rows of `op(a)` are packed into a panel, and each
/// `MR×NR` tile of `c` accumulates over the whole `k` range before being
/// added to `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    rs: usize,
    cs: usize,
    b: &[S],
    c: &mut [S],
) {
    debug_assert!(b.len() >= k * n && c.len() >= m * n);
    let n_full = n - n % NR;
    let mut panel = vec![[S::zero(); MR]; k];
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        for (p, slot) in panel.iter_mut().enumerate() {
            for r in 0..MR {
                slot[r] = if r < mr {
                    a[(i0 + r) * rs + p * cs]
                } else {
                    S::zero()
                };
            }
        }
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[S::zero(); NR]; MR];
            for (ap, brow) in panel.iter().zip(b[j0..].chunks(n)) {
                let brow: &[S; NR] = brow[..NR].try_into().unwrap();
                for r in 0..MR {
                    for jj in 0..NR {
                        acc[r][jj] += ap[r] * brow[jj];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate().take(mr) {
                let dst = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for j in n_full..n {
            for r in 0..mr {
                let mut acc = S::zero();
                for (p, ap) in panel.iter().enumerate() {
                    acc += ap[r] * b[p * n + j];
                }
                c[(i0 + r) * n + j] += acc;
            }
        }
        i0 += MR;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    gemm_rows(m, k, n, a, k, 1, b, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    gemm_rows(m, k, n, a, 1, m, b, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in a[chunks * 8..].iter().zip(&b[chunks * 8..]) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Geometry of one 2-D convolution over a single sample.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.wo);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one `[cin, h, w]` sample into `[cin·kh·kw, ho·wo]` columns.
pub fn im2col<S: Scalar>(g: &ConvGeom, input: &[S], col: &mut [S]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out.fill(S::zero());
                        continue;
                    }
                    out[..lo].fill(S::zero());
                    out[hi..].fill(S::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub fn col2im_add<S: Scalar>(g: &ConvGeom, col: &[S], input_grad: &mut [S]) {
    let p = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(vals) {
                        *d += v;
                    }
                }
            }
        }
    }
}
