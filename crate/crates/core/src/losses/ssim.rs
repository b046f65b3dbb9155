//! Gaussian-window SSIM over the valid region, with its analytic gradient.

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter: `h×w` → `(h-10)×(w-10)`.
fn filter(x: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..WINDOW).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters an `(h-10)×(w-10)` map back to `h×w`.
fn filter_adjoint(g: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * ow];
    for i in 0..oh {
        for j in 0..ow {
            let v = g[i * ow + j];
            for t in 0..WINDOW {
                rows[(i + t) * ow + j] += k[t] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..ow {
            let v = rows[i * ow + j];
            for t in 0..WINDOW {
                out[i * w + j + t] += k[t] * v;
            }
        }
    }
    out
}

fn check(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<()> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape {
            context: "ssim",
            expected: vec![h, w],
            got: vec![a.len(), b.len()],
        });
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::validation(format!(
            "{h}x{w} grid is smaller than the {WINDOW}x{WINDOW} SSIM window"
        )));
    }
    Ok(())
}

/// Mean local SSIM of two `h×w` grids.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    ssim_impl(a, b, h, w, false).map(|(v, _)| v)
}

/// Mean local SSIM and its gradient with respect to `b`.
pub fn ssim_grad(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    ssim_impl(a, b, h, w, true).map(|(v, g)| (v, g.unwrap()))
}

fn ssim_impl(a: &[f64], b: &[f64], h: usize, w: usize, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check(a, b, h, w)?;
    let k = kernel();
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let ma = filter(a, h, w, &k);
    let mb = filter(b, h, w, &k);
    let eaa = filter(&sq(a, a), h, w, &k);
    let ebb = filter(&sq(b, b), h, w, &k);
    let eab = filter(&sq(a, b), h, w, &k);
    let n = ma.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let (mut g_mb, mut g_ebb, mut g_eab) = if grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (ma[i], mb[i]);
        let vx = eaa[i] - mx * mx;
        let vy = ebb[i] - my * my;
        let cxy = eab[i] - mx * my;
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * cxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = vx + vy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if grad {
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            // a1, a2, b1, b2 as functions of (mb, ebb, eab)
            g_mb[i] = inv_n * (d_a1 * 2.0 * mx - d_a2 * 2.0 * mx + d_b1 * 2.0 * my - d_b2 * 2.0 * my);
            g_ebb[i] = inv_n * d_b2;
            g_eab[i] = inv_n * d_a2 * 2.0;
        }
    }
    let value = total * inv_n;
    if !grad {
        return Ok((value, None));
    }
    let gm = filter_adjoint(&g_mb, h, w, &k);
    let ge = filter_adjoint(&g_ebb, h, w, &k);
    let gx = filter_adjoint(&g_eab, h, w, &k);
    let g = (0..h * w)
        .map(|p| gm[p] + 2.0 * b[p] * ge[p] + a[p] * gx[p])
        .collect();
    Ok((value, Some(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn self_similarity_is_one() {
        let a = random(16 * 14, 1);
        assert!((ssim(&a, &a, 16, 14).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_patches_closed_form() {
        let zeros = vec![0.0; 144];
        let ones = vec![1.0; 144];
        let c1 = (K1 * DYNAMIC_RANGE).powi(2);
        let v = ssim(&zeros, &ones, 12, 12).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(v < 0.01);
    }

    #[test]
    fn symmetric() {
        let (a, b) = (random(13 * 13, 2), random(13 * 13, 3));
        let ab = ssim(&a, &b, 13, 13).unwrap();
        let ba = ssim(&b, &a, 13, 13).unwrap();
        assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn too_small_is_an_error() {
        let a = vec![0.0; 100];
        assert!(ssim(&a, &a, 10, 10).is_err());
    }

    #[test]
    fn filter_adjoint_identity() {
        // <F x, y> == <x, F* y>
        let (h, w) = (14, 12);
        let k = kernel();
        let x = random(h * w, 4);
        let y = random((h - 10) * (w - 10), 5);
        let lhs: f64 = filter(&x, h, w, &k).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(filter_adjoint(&y, h, w, &k)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
