//! 2-D convolution by im2col + GEMM, and the single-channel 3×3×3 volume
//! convolution used by the value head.

use rayon::prelude::*;

/// Row-major `c (m×n) = a (m×k) · b (k×n) + beta·c`, with arbitrary strides
/// on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched is bounded by the asserts above and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        let p = oh * ow;
        for ci in 0..self.cin {
            for a in 0..self.k {
                for b in 0..self.k {
                    let row = &mut cols[((ci * self.k + a) * self.k + b) * p..][..p];
                    for oi in 0..oh {
                        let i = (oi * self.stride + a) as isize - self.pad as isize;
                        for oj in 0..ow {
                            let j = (oj * self.stride + b) as isize - self.pad as isize;
                            row[oi * ow + oj] = if i >= 0 && j >= 0 && (i as usize) < self.h && (j as usize) < self.w {
                                x[(ci * self.h + i as usize) * self.w + j as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = self.out_hw();
        let p = oh * ow;
        for ci in 0..self.cin {
            for a in 0..self.k {
                for b in 0..self.k {
                    let row = &cols[((ci * self.k + a) * self.k + b) * p..][..p];
                    for oi in 0..oh {
                        let i = (oi * self.stride + a) as isize - self.pad as isize;
                        if i < 0 || i as usize >= self.h {
                            continue;
                        }
                        for oj in 0..ow {
                            let j = (oj * self.stride + b) as isize - self.pad as isize;
                            if j >= 0 && (j as usize) < self.w {
                                dx[(ci * self.h + i as usize) * self.w + j as usize] += row[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let kk = g.patch();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; batch * g.cout * p];
    out.par_chunks_mut(g.cout * p).enumerate().for_each(|(n, o)| {
        let mut cols = vec![0.0; kk * p];
        g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(g.cout, kk, p, w, (kk, 1), &cols, (p, 1), o, 0.0);
        if let Some(b) = bias {
            for (co, bv) in b.iter().enumerate() {
                o[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f64>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], dy: &[f64]) -> ConvGrads {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let kk = g.patch();
    let in_len = g.cin * g.h * g.w;
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let mut cols = vec![0.0; kk * p];
            g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
            let d = &dy[n * g.cout * p..(n + 1) * g.cout * p];
            let mut dw = vec![0.0; g.cout * kk];
            gemm(g.cout, p, kk, d, (p, 1), &cols, (1, p), &mut dw, 0.0);
            let mut dcols = vec![0.0; kk * p];
            gemm(kk, g.cout, p, w, (1, kk), d, (p, 1), &mut dcols, 0.0);
            let mut dx = vec![0.0; in_len];
            g.col2im(&dcols, &mut dx);
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(batch * in_len);
    let mut dw = vec![0.0; g.cout * kk];
    for (sx, sw) in per_sample {
        dx.extend_from_slice(&sx);
        dw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; g.cout];
    for n in 0..batch {
        for (co, v) in db.iter_mut().enumerate() {
            *v += dy[(n * g.cout + co) * p..][..p].iter().sum::<f64>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Zero-padded 3×3×3 convolution of each `(depth, h, w)` volume.
pub(crate) fn conv3d_forward(batch: usize, d: usize, h: usize, w: usize, x: &[f64], k: &[f64]) -> Vec<f64> {
    let vol = d * h * w;
    let mut out = vec![0.0; batch * vol];
    out.par_chunks_mut(vol).enumerate().for_each(|(n, o)| {
        let xs = &x[n * vol..(n + 1) * vol];
        for z in 0..d {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        let zz = z + a;
                        if zz < 1 || zz > d {
                            continue;
                        }
                        for b in 0..3 {
                            let ii = i + b;
                            if ii < 1 || ii > h {
                                continue;
                            }
                            for c in 0..3 {
                                let jj = j + c;
                                if jj < 1 || jj > w {
                                    continue;
                                }
                                acc += k[(a * 3 + b) * 3 + c] * xs[((zz - 1) * h + ii - 1) * w + jj - 1];
                            }
                        }
                    }
                    o[(z * h + i) * w + j] = acc;
                }
            }
        }
    });
    out
}

/// Returns `(dx, dk)`.
pub(crate) fn conv3d_backward(
    batch: usize,
    d: usize,
    h: usize,
    w: usize,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let vol = d * h * w;
    let per_sample: Vec<(Vec<f64>, [f64; 27])> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let xs = &x[n * vol..(n + 1) * vol];
            let ds = &dy[n * vol..(n + 1) * vol];
            let mut dx = vec![0.0; vol];
            let mut dk = [0.0; 27];
            for z in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        let g = ds[(z * h + i) * w + j];
                        if g == 0.0 {
                            continue;
                        }
                        for a in 0..3 {
                            let zz = z + a;
                            if zz < 1 || zz > d {
                                continue;
                            }
                            for b in 0..3 {
                                let ii = i + b;
                                if ii < 1 || ii > h {
                                    continue;
                                }
                                for c in 0..3 {
                                    let jj = j + c;
                                    if jj < 1 || jj > w {
                                        continue;
                                    }
                                    let src = ((zz - 1) * h + ii - 1) * w + jj - 1;
                                    let t = (a * 3 + b) * 3 + c;
                                    dk[t] += g * xs[src];
                                    dx[src] += g * k[t];
                                }
                            }
                        }
                    }
                }
            }
            (dx, dk)
        })
        .collect();
    let mut dx = Vec::with_capacity(batch * vol);
    let mut dk = vec![0.0; 27];
    for (sx, sk) in per_sample {
        dx.extend_from_slice(&sx);
        dk.iter_mut().zip(sk).for_each(|(a, b)| *a += b);
    }
    (dx, dk)
}
