//! Raw slice kernels behind the differentiable ops.

/// Strided matrix view: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a·b + beta * c`, with `c` row-major.
pub(crate) fn gemm(alpha: f32, a: &[f32], la: Layout, b: &[f32], lb: Layout, beta: f32, c: &mut [f32]) {
    assert_eq!(la.cols, lb.rows, "gemm inner extent");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() >= max_index(la) + 1);
    assert!(b.len() >= max_index(lb) + 1);
    // SAFETY: bounds of every operand were checked above against its layout.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_index(l: Layout) -> usize {
    ((l.rows as isize - 1) * l.rs + (l.cols as isize - 1) * l.cs) as usize
}

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
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn ohw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` is in bounds.
fn valid_span(out: usize, input: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let first = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last = if input + pad > k { (input + pad - k - 1) / stride + 1 } else { 0 };
    (first.min(out), last.min(out).max(first.min(out)))
}

/// Unfolds the whole batch into a `[C·kh·kw, N·OH·OW]` column matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let ncols = g.n * g.ohw();
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_span(g.oh, g.h, g.stride, ki, g.pad);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_span(g.ow, g.w, g.stride, kj, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * g.ohw()..(n + 1) * g.ohw()];
                    dst[..oy_lo * g.ow].fill(0.0);
                    dst[oy_hi * g.ow..].fill(0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        out[..ox_lo].fill(0.0);
                        out[ox_hi..].fill(0.0);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        let ix0 = ox_lo * g.stride + kj - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            out[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for (o, ix) in out[ox_lo..ox_hi].iter_mut().zip((ix0..).step_by(g.stride)) {
                                *o = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncols = g.n * g.ohw();
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_span(g.oh, g.h, g.stride, ki, g.pad);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_span(g.ow, g.w, g.stride, kj, g.pad);
                if ox_hi <= ox_lo {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * g.ohw()..(n + 1) * g.ohw()];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let ix0 = ox_lo * g.stride + kj - g.pad;
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let s = &src[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                        if g.stride == 1 {
                            for (d, v) in dst_row[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (v, ix) in s.iter().zip((ix0..).step_by(g.stride)) {
                                dst_row[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[F, N·P]` → `[N, F, P]`.
pub(crate) fn fnp_to_nfp(src: &[f32], f: usize, n: usize, p: usize, dst: &mut [f32]) {
    for fi in 0..f {
        for ni in 0..n {
            let s = &src[(fi * n + ni) * p..(fi * n + ni + 1) * p];
            dst[(ni * f + fi) * p..(ni * f + fi + 1) * p].copy_from_slice(s);
        }
    }
}

/// `[N, F, P]` → `[F, N·P]`.
pub(crate) fn nfp_to_fnp(src: &[f32], f: usize, n: usize, p: usize, dst: &mut [f32]) {
    for ni in 0..n {
        for fi in 0..f {
            let s = &src[(ni * f + fi) * p..(ni * f + fi + 1) * p];
            dst[(fi * n + ni) * p..(fi * n + ni + 1) * p].copy_from_slice(s);
        }
    }
}

/// Returns the `[N, F, OH, OW]` output and the column matrix it was built from.
pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let np = g.n * g.ohw();
    let mut cols = vec![0.0; g.ckk() * np];
    im2col(x, g, &mut cols);
    let mut fnp = vec![0.0; g.f * np];
    gemm(
        1.0,
        w,
        Layout::row_major(g.f, g.ckk()),
        &cols,
        Layout::row_major(g.ckk(), np),
        0.0,
        &mut fnp,
    );
    let mut out = vec![0.0; g.f * np];
    fnp_to_nfp(&fnp, g.f, g.n, g.ohw(), &mut out);
    (out, cols)
}

/// Returns `(dx, dw)` for upstream gradient `dy` laid out `[N, F, OH, OW]`.
pub(crate) fn conv2d_backward(
    x: &[f32],
    saved_cols: Option<&[f32]>,
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>) {
    let np = g.n * g.ohw();
    let mut dy_fnp = vec![0.0; g.f * np];
    nfp_to_fnp(dy, g.f, g.n, g.ohw(), &mut dy_fnp);
    let fresh;
    let cols: &[f32] = match saved_cols {
        Some(c) => c,
        None => {
            let mut c = vec![0.0; g.ckk() * np];
            im2col(x, g, &mut c);
            fresh = c;
            &fresh
        }
    };
    let mut dw = vec![0.0; g.f * g.ckk()];
    gemm(
        1.0,
        &dy_fnp,
        Layout::row_major(g.f, np),
        cols,
        Layout::row_major(g.ckk(), np).t(),
        0.0,
        &mut dw,
    );
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; g.ckk() * np];
        gemm(
            1.0,
            w,
            Layout::row_major(g.f, g.ckk()).t(),
            &dy_fnp,
            Layout::row_major(g.f, np),
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw)
}
