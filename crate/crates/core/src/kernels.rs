//! Slice-level numeric kernels shared by the tape's forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn gemm_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn gemm_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
}

/// Unfolds one image `[cin×h×w]` into columns `[cin·kh·kw × ho·wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let npix = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let npix = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a whole batch. `x` is `[b×cin×h×w]`, `k` is
/// `[cout×cin×kh×kw]`; returns `[b×cout×ho×wo]`.
pub fn conv2d_forward(x: &[f64], k: &[f64], batch: usize, cout: usize, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.cin * g.h * g.w;
    let npix = g.col_cols();
    let mut out = vec![0.0; batch * cout * npix];
    let mut cols = vec![0.0; g.col_rows() * npix];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * npix..(b + 1) * cout * npix];
        if is_pointwise(g) {
            gemm_acc(k, xb, ob, cout, g.cin, npix);
        } else {
            im2col(xb, g, &mut cols);
            gemm_acc(k, &cols, ob, cout, g.col_rows(), npix);
        }
    }
    out
}

/// Gradients of a batched convolution with respect to input and kernel.
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let in_len = g.cin * g.h * g.w;
    let npix = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * npix];
    let mut dcols = vec![0.0; rows * npix];
    let (mut dx, mut dk) = (dx, dk);
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * cout * npix..(b + 1) * cout * npix];
        let pointwise = is_pointwise(g);
        if let Some(dk) = dk.as_deref_mut() {
            if pointwise {
                gemm_a_bt_acc(dyb, xb, dk, cout, rows, npix);
            } else {
                im2col(xb, g, &mut cols);
                gemm_a_bt_acc(dyb, &cols, dk, cout, rows, npix);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm_at_b_acc(k, dyb, dxb, cout, rows, npix);
            } else {
                dcols.fill(0.0);
                gemm_at_b_acc(k, dyb, &mut dcols, cout, rows, npix);
                col2im_acc(&dcols, g, dxb);
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Source taps for bilinear resampling along one axis with half-pixel
/// centres: `(lo, hi, frac)` per output coordinate.
pub fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
