//! Raw convolution kernels: forward map and its two adjoints.
//!
//! All three routines share one index mapping, so the transposed convolution
//! (implemented as the adjoint of the forward map) satisfies the inner-product
//! identity `<conv(A,K), B> == <A, tconv(B,K)>` by construction.
//!
//! Kernels are stored in convolution layout `[c_out, c_in, k1, k2]` for both
//! directions. Images are `[n, c, h, w]`.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Spatial output size of a convolution along one axis (floor division).
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution along one axis.
pub fn tconv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * padding + 1 {
        return Err(Error::Config(format!(
            "transposed conv output size would be non-positive: ({input}-1)*{stride} - 2*{padding} + {kernel}"
        )));
    }
    Ok(grown - 2 * padding)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k1: usize,
    pub k2: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub fn infer(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Input(format!(
                "conv expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc_in, k1, k2) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc_in != c_in {
            return Err(Error::Config(format!(
                "input has {c_in} channels but kernel expects {kc_in}"
            )));
        }
        let h_out = conv_out_dim(h, k1, stride, padding)?;
        let w_out = conv_out_dim(w, k2, stride, padding)?;
        Ok(ConvDims {
            n,
            c_in,
            h,
            w,
            c_out,
            k1,
            k2,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k1 * self.k2
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Gather one sample's receptive fields into a `[c_in*k1*k2, h_out*w_out]`
/// column matrix. Out-of-bounds (padding) positions are zero.
fn im2col(sample: &[f64], d: &ConvDims, col: &mut [f64]) {
    let cols = d.col_cols();
    col.fill(0.0);
    for ci in 0..d.c_in {
        let plane = &sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for a in 0..d.k1 {
            for b in 0..d.k2 {
                let row = (ci * d.k1 + a) * d.k2 + b;
                let out_row = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + a) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + b) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        out_row[oh * d.w_out + ow] = plane[ih * d.w + iw as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto one sample (adjoint of [`im2col`]).
fn col2im_add(col: &[f64], d: &ConvDims, sample: &mut [f64]) {
    let cols = d.col_cols();
    for ci in 0..d.c_in {
        let plane = &mut sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for a in 0..d.k1 {
            for b in 0..d.k2 {
                let row = (ci * d.k1 + a) * d.k2 + b;
                let in_row = &col[row * cols..(row + 1) * cols];
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + a) as isize - d.padding as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + b) as isize - d.padding as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        plane[ih * d.w + iw as usize] += in_row[oh * d.w_out + ow];
                    }
                }
            }
        }
    }
}

fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

/// Forward convolution: `out[n,co,oh,ow] = sum input[n,ci,oh*s+a-p,ow*s+b-p] * K[co,ci,a,b]`.
pub(crate) fn conv_fwd(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let rows = d.col_rows();
    let cols = d.col_cols();
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * cols;
    let mut out = vec![0.0; d.n * sample_out];
    out.par_chunks_mut(sample_out)
        .zip(input.par_chunks(sample_in))
        .for_each(|(out_n, in_n)| {
            let mut col = vec![0.0; rows * cols];
            im2col(in_n, d, &mut col);
            // [c_out, rows] x [rows, cols]
            dgemm_rowmajor(
                d.c_out,
                rows,
                cols,
                kernel,
                (rows as isize, 1),
                &col,
                (cols as isize, 1),
                0.0,
                out_n,
            );
        });
    out
}

/// Adjoint of [`conv_fwd`] with respect to the input.
///
/// `gout` has the forward output's shape; the result has the forward input's
/// shape. This is also the forward map of the transposed convolution.
pub(crate) fn conv_adj_input(gout: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let rows = d.col_rows();
    let cols = d.col_cols();
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * cols;
    let mut ginput = vec![0.0; d.n * sample_in];
    ginput
        .par_chunks_mut(sample_in)
        .zip(gout.par_chunks(sample_out))
        .for_each(|(gin_n, gout_n)| {
            let mut gcol = vec![0.0; rows * cols];
            // [rows, c_out] (kernel transposed) x [c_out, cols]
            dgemm_rowmajor(
                rows,
                d.c_out,
                cols,
                kernel,
                (1, rows as isize),
                gout_n,
                (cols as isize, 1),
                0.0,
                &mut gcol,
            );
            col2im_add(&gcol, d, gin_n);
        });
    ginput
}

/// Adjoint of [`conv_fwd`] with respect to the kernel.
pub(crate) fn conv_adj_kernel(input: &[f64], gout: &[f64], d: &ConvDims) -> Vec<f64> {
    let rows = d.col_rows();
    let cols = d.col_cols();
    let sample_in = d.c_in * d.h * d.w;
    let sample_out = d.c_out * cols;
    // Per-sample partials are reduced sequentially so the result does not
    // depend on thread scheduling.
    let partials: Vec<Vec<f64>> = (0..d.n)
        .into_par_iter()
        .map(|s| {
            let mut col = vec![0.0; rows * cols];
            im2col(&input[s * sample_in..(s + 1) * sample_in], d, &mut col);
            let mut gk = vec![0.0; d.c_out * rows];
            // [c_out, cols] x [cols, rows] (col transposed)
            dgemm_rowmajor(
                d.c_out,
                cols,
                rows,
                &gout[s * sample_out..(s + 1) * sample_out],
                (cols as isize, 1),
                &col,
                (1, cols as isize),
                0.0,
                &mut gk,
            );
            gk
        })
        .collect();
    let mut gkernel = vec![0.0; d.c_out * rows];
    for p in partials {
        for (g, v) in gkernel.iter_mut().zip(p) {
            *g += v;
        }
    }
    gkernel
}

/// Row-major matrix product `x[m,k] . w[o,k]^T -> [m,o]`.
pub(crate) fn matmul_nt(x: &[f64], w: &[f64], m: usize, k: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * o];
    dgemm_rowmajor(m, k, o, x, (k as isize, 1), w, (1, k as isize), 0.0, &mut out);
    out
}

/// Row-major matrix product `a[m,k] . b[k,n] -> [m,n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    dgemm_rowmajor(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut out);
    out
}

/// Row-major matrix product `a[k,m]^T . b[k,n] -> [m,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    dgemm_rowmajor(m, k, n, a, (1, m as isize), b, (n as isize, 1), 0.0, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> ConvDims {
        ConvDims::infer(input, kernel, stride, padding).unwrap()
    }

    #[test]
    fn out_dim_law() {
        assert_eq!(conv_out_dim(32, 9, 1, 0).unwrap(), 24);
        assert_eq!(conv_out_dim(16, 5, 1, 0).unwrap(), 12);
        assert_eq!(conv_out_dim(64, 23, 1, 3).unwrap(), 48);
        assert_eq!(tconv_out_dim(24, 9, 1, 0).unwrap(), 32);
        assert!(conv_out_dim(3, 5, 1, 0).is_err());
    }

    #[test]
    fn all_ones_sum() {
        let d = dims(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0);
        let out = conv_fwd(&[1.0; 9], &[1.0; 9], &d);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn strided_corner_kernel() {
        // input 4x4 = 0..16, kernel [[1,0],[0,0]], s=2 -> [[0,2],[8,10]]
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let d = dims(&[1, 1, 4, 4], &[1, 1, 2, 2], 2, 0);
        let out = conv_fwd(&input, &[1.0, 0.0, 0.0, 0.0], &d);
        assert_eq!(out, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn delta_input_reproduces_kernel() {
        let kernel: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        let d = dims(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 0);
        // tconv([1], K) == K
        let out = conv_adj_input(&[1.0], &kernel, &d);
        assert_eq!(out, kernel);
    }

    #[test]
    fn adjoint_identity_random() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(11, "adjoint");
        for _ in 0..20 {
            let (n, ci, co) = (2, 3, 2);
            let (h, w, k1, k2) = (
                rng.random_range(3..7),
                rng.random_range(3..7),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            let stride = rng.random_range(1..3);
            let padding = rng.random_range(0..2);
            let d = match ConvDims::infer(&[n, ci, h, w], &[co, ci, k1, k2], stride, padding) {
                Ok(d) => d,
                Err(_) => continue,
            };
            let a: Vec<f64> = (0..n * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..co * ci * k1 * k2)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..n * co * d.h_out * d.w_out)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let conv_ab: f64 = conv_fwd(&a, &k, &d).iter().zip(&b).map(|(x, y)| x * y).sum();
            let a_tconv: f64 = conv_adj_input(&b, &k, &d)
                .iter()
                .zip(&a)
                .map(|(x, y)| x * y)
                .sum();
            assert!(
                (conv_ab - a_tconv).abs() < 1e-10,
                "adjoint mismatch: {conv_ab} vs {a_tconv}"
            );
        }
    }

    #[test]
    fn matmul_shapes() {
        // x [2,3] . w [2,3]^T
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let out = matmul_nt(&x, &w, 2, 3, 2);
        assert_eq!(out, vec![1.0, 2.0, 4.0, 5.0]);
    }
}
