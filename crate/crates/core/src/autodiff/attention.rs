//! Fused multi-head self-attention over the spatial positions of a feature
//! map, with a hand-written backward pass.
//!
//! Per sample the map is read as tokens `X` (T×C, T = H·W); weights are C×C
//! matrices applied on the right: `Q = X·Wq`, `K = X·Wk`, `V = X·Wv`,
//! `Y = concat_h(softmax(Q_h K_hᵀ/√d) V_h)·Wo`.

use rayon::prelude::*;

use super::conv::gemm;

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnGeom {
    pub c: usize,
    pub t: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn dh(&self) -> usize {
        self.c / self.heads
    }
}

/// Channel-major `(C, T)` map to token-major `(T, C)`.
fn to_tokens(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for ch in 0..c {
        for p in 0..t {
            out[p * c + ch] = x[ch * t + p];
        }
    }
    out
}

fn from_tokens(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * c];
    for p in 0..t {
        for ch in 0..c {
            out[ch * t + p] = x[p * c + ch];
        }
    }
    out
}

fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut c, 0.0);
    c
}

/// `aᵀ·b` with `a` (k×m) and `b` (k×n).
fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (1, m), b, (n, 1), &mut c, 0.0);
    c
}

/// `a·bᵀ` with `a` (m×k) and `b` (n×k).
fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (1, k), &mut c, 0.0);
    c
}

struct SampleForward {
    y: Vec<f64>,
    /// `heads × T × T`
    probs: Vec<f64>,
}

fn forward_sample(g: &AttnGeom, x: &[f64], w: [&[f64]; 4]) -> SampleForward {
    let (c, t, dh) = (g.c, g.t, g.dh());
    let xt = to_tokens(x, c, t);
    let q = matmul(t, c, c, &xt, w[0]);
    let k = matmul(t, c, c, &xt, w[1]);
    let v = matmul(t, c, c, &xt, w[2]);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; g.heads * t * t];
    let mut o = vec![0.0; t * c];
    for hd in 0..g.heads {
        let off = hd * dh;
        let a = &mut probs[hd * t * t..(hd + 1) * t * t];
        for i in 0..t {
            let row = &mut a[i * t..(i + 1) * t];
            for (j, r) in row.iter_mut().enumerate() {
                *r = (0..dh).map(|d| q[i * c + off + d] * k[j * c + off + d]).sum::<f64>() * scale;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                z += *r;
            }
            row.iter_mut().for_each(|r| *r /= z);
            for d in 0..dh {
                o[i * c + off + d] = (0..t).map(|j| row[j] * v[j * c + off + d]).sum();
            }
        }
    }
    let y = matmul(t, c, c, &o, w[3]);
    SampleForward {
        y: from_tokens(&y, c, t),
        probs,
    }
}

/// Returns the output map and the attention probabilities (`N × heads × T × T`).
pub(crate) fn forward(g: &AttnGeom, batch: usize, x: &[f64], w: [&[f64]; 4]) -> (Vec<f64>, Vec<f64>) {
    let len = g.c * g.t;
    let per: Vec<SampleForward> = (0..batch)
        .into_par_iter()
        .map(|n| forward_sample(g, &x[n * len..(n + 1) * len], w))
        .collect();
    let mut y = Vec::with_capacity(batch * len);
    let mut probs = Vec::with_capacity(batch * g.heads * g.t * g.t);
    for s in per {
        y.extend_from_slice(&s.y);
        probs.extend_from_slice(&s.probs);
    }
    (y, probs)
}

/// Gradients for `x` and the four weight matrices.
pub(crate) struct AttnGrads {
    pub dx: Vec<f64>,
    pub dw: [Vec<f64>; 4],
}

pub(crate) fn backward(g: &AttnGeom, batch: usize, x: &[f64], w: [&[f64]; 4], probs: &[f64], dy: &[f64]) -> AttnGrads {
    let (c, t, dh) = (g.c, g.t, g.dh());
    let len = c * t;
    let scale = 1.0 / (dh as f64).sqrt();
    let per: Vec<(Vec<f64>, [Vec<f64>; 4])> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let xt = to_tokens(&x[n * len..(n + 1) * len], c, t);
            let dyt = to_tokens(&dy[n * len..(n + 1) * len], c, t);
            let p = &probs[n * g.heads * t * t..(n + 1) * g.heads * t * t];
            let q = matmul(t, c, c, &xt, w[0]);
            let k = matmul(t, c, c, &xt, w[1]);
            let v = matmul(t, c, c, &xt, w[2]);
            let mut o = vec![0.0; t * c];
            for hd in 0..g.heads {
                let off = hd * dh;
                let a = &p[hd * t * t..(hd + 1) * t * t];
                for i in 0..t {
                    for d in 0..dh {
                        o[i * c + off + d] = (0..t).map(|j| a[i * t + j] * v[j * c + off + d]).sum();
                    }
                }
            }
            let dwo = matmul_tn(c, t, c, &o, &dyt);
            let d_o = matmul_nt(t, c, c, &dyt, w[3]);
            let mut dq = vec![0.0; t * c];
            let mut dk = vec![0.0; t * c];
            let mut dv = vec![0.0; t * c];
            for hd in 0..g.heads {
                let off = hd * dh;
                let a = &p[hd * t * t..(hd + 1) * t * t];
                for i in 0..t {
                    let da: Vec<f64> = (0..t)
                        .map(|j| (0..dh).map(|d| d_o[i * c + off + d] * v[j * c + off + d]).sum())
                        .collect();
                    let dot: f64 = (0..t).map(|j| da[j] * a[i * t + j]).sum();
                    for j in 0..t {
                        let aij = a[i * t + j];
                        let ds = aij * (da[j] - dot) * scale;
                        for d in 0..dh {
                            dq[i * c + off + d] += ds * k[j * c + off + d];
                            dk[j * c + off + d] += ds * q[i * c + off + d];
                            dv[j * c + off + d] += aij * d_o[i * c + off + d];
                        }
                    }
                }
            }
            let dwq = matmul_tn(c, t, c, &xt, &dq);
            let dwk = matmul_tn(c, t, c, &xt, &dk);
            let dwv = matmul_tn(c, t, c, &xt, &dv);
            let mut dxt = matmul_nt(t, c, c, &dq, w[0]);
            for (m, wm) in [(&dk, w[1]), (&dv, w[2])] {
                let part = matmul_nt(t, c, c, m, wm);
                dxt.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            (from_tokens(&dxt, c, t), [dwq, dwk, dwv, dwo])
        })
        .collect();
    let mut dx = Vec::with_capacity(batch * len);
    let mut dw: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; c * c]);
    for (sx, sw) in per {
        dx.extend_from_slice(&sx);
        for (acc, part) in dw.iter_mut().zip(sw) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    AttnGrads { dx, dw }
}
