//! im2col convolution kernels on top of `matrixmultiply::sgemm`.

/// Geometry of a square-kernel convolution applied to a `c x h x w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output size of a transposed convolution.
pub(crate) fn transpose_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len - 1) * stride + k - 2 * pad
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let cols = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let cols = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major operands, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made through the strides.
    unsafe {
        matrixmultiply::sgemm(
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

/// Normalized 1-D gaussian kernel.
pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering of every `h x w` plane in `x`.
pub(crate) fn blur_valid(x: &[f32], planes: usize, h: usize, w: usize, kern: &[f32]) -> Vec<f32> {
    let k = kern.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0f32; h * ow];
    let mut out = vec![0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for ox in 0..ow {
                let row = &src[y * w + ox..y * w + ox + k];
                tmp[y * ow + ox] = row.iter().zip(kern).map(|(a, b)| a * b).sum();
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f32;
                for (i, kv) in kern.iter().enumerate() {
                    acc += tmp[(oy + i) * ow + ox] * kv;
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`].
pub(crate) fn blur_valid_adjoint(
    g: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kern: &[f32],
) -> Vec<f32> {
    let k = kern.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0f32; h * ow];
    let mut out = vec![0f32; planes * h * w];
    for p in 0..planes {
        tmp.fill(0.0);
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox];
                for (i, kv) in kern.iter().enumerate() {
                    tmp[(oy + i) * ow + ox] += v * kv;
                }
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for ox in 0..ow {
                let v = tmp[y * ow + ox];
                for (i, kv) in kern.iter().enumerate() {
                    dst[y * w + ox + i] += v * kv;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom, co: usize) -> Vec<f32> {
        let mut out = vec![0f32; co * g.oh * g.ow];
        for o in 0..co {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0f32;
                    for ci in 0..g.c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.c + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeom::new(3, 7, 6, 3, 2, 1);
        let x: Vec<f32> = (0..3 * 7 * 6).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let w: Vec<f32> = (0..4 * g.rows()).map(|i| ((i * 13) % 7) as f32 * 0.1).collect();
        let mut col = vec![0f32; g.rows() * g.cols()];
        im2col(&x, &g, &mut col);
        let mut out = vec![0f32; 4 * g.cols()];
        gemm(4, g.rows(), g.cols(), &w, false, &col, false, 0.0, &mut out);
        let expect = naive_conv(&x, &w, &g, 4);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 5, 3, 2, 1);
        let x: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..g.rows() * g.cols()).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut col = vec![0f32; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0f32; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn blur_adjoint_identity() {
        let kern: Vec<f32> = gaussian_kernel(5, 1.0).iter().map(|&v| v as f32).collect();
        let x: Vec<f32> = (0..2 * 9 * 8).map(|i| (i as f32 * 0.3).sin()).collect();
        let y: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32 * 0.7).cos()).collect();
        let fx = blur_valid(&x, 2, 9, 8, &kern);
        let aty = blur_valid_adjoint(&y, 2, 9, 8, &kern);
        let lhs: f32 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
