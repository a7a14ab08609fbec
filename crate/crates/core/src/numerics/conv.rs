//! 2D cross-correlation kernels on raw NCHW buffers.
//!
//! Two forward paths are kept: a direct loop nest (the reference) and an
//! im2col + GEMM path used by the tape. They must agree to 1e-10.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Output extent is `floor((H + 2p - k) / s) + 1`.
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = match x_shape {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", "input [N,C,H,W]", x_shape)),
        };
        let [c_out, wc_in, kh, kw] = match w_shape {
            &[a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", "kernel [Co,Ci,k,k]", w_shape)),
        };
        if wc_in != c_in {
            return Err(Error::shape("conv2d", format!("kernel C_in {c_in}"), wc_in));
        }
        if kh != kw {
            return Err(Error::invalid(format!("conv2d: only square kernels supported, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(format!(
                "conv2d: kernel {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.c_out * self.c_in * self.k * self.k * self.h_out * self.w_out) as u64
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Maps an output coordinate and kernel tap to an input coordinate, if in bounds.
    #[inline]
    fn src(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Reference implementation: one accumulation per (n, co, ho, wo, ci, kh, kw).
pub fn conv2d_direct(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let b = bias.map_or(0.0, |b| b[co]);
            for ho in 0..g.h_out {
                for wo in 0..g.w_out {
                    let mut acc = b;
                    for ci in 0..g.c_in {
                        for kh in 0..g.k {
                            let Some(hi) = g.src(ho, kh, g.h) else { continue };
                            for kw in 0..g.k {
                                let Some(wi) = g.src(wo, kw, g.w) else { continue };
                                acc += x[((n * g.c_in + ci) * g.h + hi) * g.w + wi]
                                    * kernel[((co * g.c_in + ci) * g.k + kh) * g.k + kw];
                            }
                        }
                    }
                    out[((n * g.c_out + co) * g.h_out + ho) * g.w_out + wo] = acc;
                }
            }
        }
    }
    out
}

/// Unfolds one sample into a `[C_in*k*k, H_out*W_out]` column matrix.
fn im2col(x_n: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let ncols = g.col_cols();
    for ci in 0..g.c_in {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ho in 0..g.h_out {
                    let hi = g.src(ho, kh, g.h);
                    for wo in 0..g.w_out {
                        dst[ho * g.w_out + wo] = match (hi, g.src(wo, kw, g.w)) {
                            (Some(hi), Some(wi)) => x_n[(ci * g.h + hi) * g.w + wi],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto one sample, accumulating overlaps.
fn col2im(cols: &[f64], g: &ConvGeometry, dx_n: &mut [f64]) {
    let ncols = g.col_cols();
    for ci in 0..g.c_in {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ho in 0..g.h_out {
                    let Some(hi) = g.src(ho, kh, g.h) else { continue };
                    for wo in 0..g.w_out {
                        if let Some(wi) = g.src(wo, kw, g.w) {
                            dx_n[(ci * g.h + hi) * g.w + wi] += src[ho * g.w_out + wo];
                        }
                    }
                }
            }
        }
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major buffers, `op` optionally transposing.
/// `a` is `m x k` after op, `b` is `k x n` after op.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the asserted buffer lengths.
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

pub fn conv2d_im2col(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * ncols;
    let mut out = vec![0.0; g.n * out_per];
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..g.n {
        im2col(&x[n * in_per..(n + 1) * in_per], g, &mut cols);
        let y = &mut out[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for co in 0..g.c_out {
                y[co * ncols..(co + 1) * ncols].fill(b[co]);
            }
        }
        gemm(g.c_out, rows, ncols, kernel, false, &cols, false, 1.0, y);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn conv2d_backward(x: &[f64], kernel: &[f64], dy: &[f64], g: &ConvGeometry, need_dx: bool) -> ConvGrads {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * ncols;
    let mut dkernel = vec![0.0; g.c_out * rows];
    let mut dbias = vec![0.0; g.c_out];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; rows * ncols];
    let mut dcols = vec![0.0; rows * ncols];
    for n in 0..g.n {
        let dy_n = &dy[n * out_per..(n + 1) * out_per];
        for co in 0..g.c_out {
            dbias[co] += dy_n[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
        }
        im2col(&x[n * in_per..(n + 1) * in_per], g, &mut cols);
        // dK += dY_n [Co, L] * cols^T [L, rows]
        gemm(g.c_out, ncols, rows, dy_n, false, &cols, true, 1.0, &mut dkernel);
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T [rows, Co] * dY_n [Co, L]
            gemm(rows, g.c_out, ncols, kernel, true, dy_n, false, 0.0, &mut dcols);
            col2im(&dcols, g, &mut dx[n * in_per..(n + 1) * in_per]);
        }
    }
    ConvGrads { dx, dkernel, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn rand_vec(n: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn ones_kernel_center_sums_nine() {
        let g = ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 1).unwrap();
        let out = conv2d_direct(&[1.0; 9], &[1.0; 9], None, &g);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        let fast = conv2d_im2col(&[1.0; 9], &[1.0; 9], None, &g);
        assert_eq!(fast[4], 9.0);
    }

    #[test]
    fn paths_agree_on_random_instances() {
        let mut rng = RngStream::new(3);
        for &(n, ci, h, w, co, k, s, p) in &[
            (2, 3, 5, 5, 4, 3, 1, 1),
            (1, 2, 8, 6, 3, 5, 1, 2),
            (2, 4, 8, 8, 2, 3, 2, 1),
            (1, 1, 7, 7, 1, 1, 1, 0),
            (3, 2, 9, 4, 5, 3, 2, 0),
        ] {
            let g = ConvGeometry::new(&[n, ci, h, w], &[co, ci, k, k], s, p).unwrap();
            let x = rand_vec(n * ci * h * w, &mut rng);
            let kern = rand_vec(co * ci * k * k, &mut rng);
            let b = rand_vec(co, &mut rng);
            let a = conv2d_direct(&x, &kern, Some(&b), &g);
            let f = conv2d_im2col(&x, &kern, Some(&b), &g);
            let err = a.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn stride_two_halves_even_extent() {
        let g = ConvGeometry::new(&[1, 1, 8, 8], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (4, 4));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 2, 2, 2], &[1, 2, 5, 5], 1, 0).is_err());
        assert!(ConvGeometry::new(&[2, 4, 4], &[1, 2, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
