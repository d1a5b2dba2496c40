// im2col-based 2-D convolution kernels over NCHW buffers.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Column buffers hold several images side by side: row `r` of image `i`
/// starts at `r * ld + i * positions`.
const GROUP_COLUMNS: usize = 1024;

impl ConvGeom {
    fn group(&self) -> usize {
        (GROUP_COLUMNS / self.positions().max(1)).clamp(1, self.n.max(1))
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, img: &[S], col: &mut [S], ld: usize) {
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ld..row * ld + g.positions()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeom, col: &[S], ld: usize, img: &mut [S]) {
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ld..row * ld + g.positions()];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Scalar>(g: &ConvGeom, input: &[S], kernel: &[S]) -> Vec<S> {
    let (patch, p) = (g.patch(), g.positions());
    let img_len = g.c * g.h * g.w;
    let group = g.group();
    let ld = group * p;
    let mut out = vec![S::zero(); g.n * g.f * p];
    let mut col = vec![S::zero(); patch * ld];
    let mut res = vec![S::zero(); g.f * ld];
    for n0 in (0..g.n).step_by(group) {
        let m = group.min(g.n - n0);
        for i in 0..m {
            let n = n0 + i;
            im2col(g, &input[n * img_len..(n + 1) * img_len], &mut col[i * p..], ld);
        }
        // res[F, m·P] = K[F, patch] · col[patch, m·P]
        S::gemm(g.f, patch, m * p, S::one(), kernel, patch as isize, 1, &col, ld as isize, 1, S::zero(), &mut res, ld as isize, 1);
        for i in 0..m {
            let dst = &mut out[(n0 + i) * g.f * p..(n0 + i + 1) * g.f * p];
            for f in 0..g.f {
                dst[f * p..(f + 1) * p].copy_from_slice(&res[f * ld + i * p..f * ld + (i + 1) * p]);
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernel)`; either side is skipped when not requested.
pub(crate) fn backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    kernel: &[S],
    d_out: &[S],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (patch, p) = (g.patch(), g.positions());
    let img_len = g.c * g.h * g.w;
    let group = g.group();
    let ld = group * p;
    let mut d_input = want_input.then(|| vec![S::zero(); g.n * img_len]);
    let mut d_kernel = want_kernel.then(|| vec![S::zero(); g.f * patch]);
    let mut col = vec![S::zero(); patch * ld];
    let mut dy = vec![S::zero(); g.f * ld];
    for n0 in (0..g.n).step_by(group) {
        let m = group.min(g.n - n0);
        for i in 0..m {
            let src = &d_out[(n0 + i) * g.f * p..(n0 + i + 1) * g.f * p];
            for f in 0..g.f {
                dy[f * ld + i * p..f * ld + (i + 1) * p].copy_from_slice(&src[f * p..(f + 1) * p]);
            }
        }
        let cols = m * p;
        if let Some(dk) = d_kernel.as_mut() {
            for i in 0..m {
                let n = n0 + i;
                im2col(g, &input[n * img_len..(n + 1) * img_len], &mut col[i * p..], ld);
            }
            // dK[F, patch] += dY[F, m·P] · colᵀ[m·P, patch]
            S::gemm(g.f, cols, patch, S::one(), &dy, ld as isize, 1, &col, 1, ld as isize, S::one(), dk, patch as isize, 1);
        }
        if let Some(dx) = d_input.as_mut() {
            // dcol[patch, m·P] = Kᵀ[patch, F] · dY[F, m·P]
            S::gemm(patch, g.f, cols, S::one(), kernel, 1, patch as isize, &dy, ld as isize, 1, S::zero(), &mut col, ld as isize, 1);
            for i in 0..m {
                let n = n0 + i;
                col2im_add(g, &col[i * p..], ld, &mut dx[n * img_len..(n + 1) * img_len]);
            }
        }
    }
    (d_input, d_kernel)
}
