//! Brute-force reference implementations and helpers shared by the
//! integration tests. Written for clarity, not speed: direct exponentials
//! (inputs are kept small enough not to overflow), explicit index loops.

#![allow(dead_code)]

use ndarray::{Array3, Array4};
use pclsr::RandomSource;

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}

pub fn random_vec(rng: &mut RandomSource, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-amp, amp)).collect()
}

pub fn random_map(rng: &mut RandomSource, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((c, h, w), || rng.uniform(-1.0, 1.0))
}

pub fn random_batch(rng: &mut RandomSource, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_simple_fn((n, c, h, w), || rng.uniform(-1.0, 1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `-ln( e^{a·p/τ} / (e^{a·p/τ} + Σ_k e^{a·n_k/τ}) )`
pub fn info_nce(a: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let num = (dot(a, p) / tau).exp();
    let mut den = num;
    for n in negs {
        den += (dot(a, n) / tau).exp();
    }
    -(num / den).ln()
}

/// Mean of the InfoNCE terms of every positive.
pub fn sup_con(a: &[f64], pos: &[Vec<f64>], negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut s = 0.0;
    for p in pos {
        s += info_nce(a, p, negs, tau);
    }
    s / pos.len() as f64
}

/// Spatial mean of per-pixel channel cosines, with ε added to the norm
/// product.
pub fn pixel_cosine(x: &Array3<f64>, y: &Array3<f64>) -> f64 {
    let (c, h, w) = x.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for k in 0..c {
                xy += x[[k, i, j]] * y[[k, i, j]];
                xx += x[[k, i, j]] * x[[k, i, j]];
                yy += y[[k, i, j]] * y[[k, i, j]];
            }
            total += xy / (xx.sqrt() * yy.sqrt() + 1e-8);
        }
    }
    total / (h * w) as f64
}

pub fn pcl_layer(f: &Array3<f64>, pos: &[Array3<f64>], neg: &[Array3<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for p in pos {
        let num = (pixel_cosine(f, p) / tau).exp();
        let mut den = num;
        for n in neg {
            den += (pixel_cosine(f, n) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total / pos.len() as f64
}

/// `anchors[l][i]`, `pos[j][l][i]`, `neg[k][l][i]`: mean over samples and
/// layers.
pub fn pcl_total(
    anchors: &[Vec<Array3<f64>>],
    pos: &[Vec<Vec<Array3<f64>>>],
    neg: &[Vec<Vec<Array3<f64>>>],
    tau: f64,
) -> f64 {
    let layers = anchors.len();
    let n = anchors[0].len();
    let mut total = 0.0;
    for l in 0..layers {
        for i in 0..n {
            let p: Vec<_> = pos.iter().map(|pj| pj[l][i].clone()).collect();
            let q: Vec<_> = neg.iter().map(|nk| nk[l][i].clone()).collect();
            total += pcl_layer(&anchors[l][i], &p, &q, tau);
        }
    }
    total / (layers * n) as f64
}

/// Each real score against all fakes, then each negated fake against all
/// negated reals; both averaged.
pub fn contrad(real: &[f64], fake: &[f64]) -> f64 {
    let mut a = 0.0;
    for &r in real {
        let mut den = r.exp();
        for &f in fake {
            den += f.exp();
        }
        a += -(r.exp() / den).ln();
    }
    let mut b = 0.0;
    for &f in fake {
        let mut den = (-f).exp();
        for &r in real {
            den += (-r).exp();
        }
        b += -((-f).exp() / den).ln();
    }
    a / real.len() as f64 + b / fake.len() as f64
}

pub fn l1(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += (x - y).abs();
    }
    s / a.len() as f64
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, tiny)`.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-300)
}
