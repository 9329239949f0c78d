//! Single-level Haar analysis/synthesis, the high-frequency stacking operator
//! fed to the embedding network, and the Fourier log-magnitude alternative.

use ndarray::{concatenate, Array2, Array4, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, BatchTensor};

/// The four half-resolution subbands of a single-level orthonormal Haar
/// decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub ll: BatchTensor,
    pub lh: BatchTensor,
    pub hl: BatchTensor,
    pub hh: BatchTensor,
}

impl SubbandSet {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|b| b.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn ensure_even(x: &BatchTensor) -> Result<()> {
    let (_, _, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "Haar transform needs even spatial size, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Orthonormal Haar decomposition over non-overlapping 2×2 blocks
/// `[[a, b], [c, d]]`:
///
/// ```text
/// LL = (a + b + c + d) / 2    LH = (a + b - c - d) / 2
/// HL = (a - b + c - d) / 2    HH = (a - b - c + d) / 2
/// ```
pub fn haar_forward(x: &BatchTensor) -> Result<SubbandSet> {
    ensure_even(x)?;
    check_finite("Haar input", x.iter().copied())?;
    let (n, c, h, w) = x.dim();
    let shape = (n, c, h / 2, w / 2);
    let mut ll = Array4::zeros(shape);
    let mut lh = Array4::zeros(shape);
    let mut hl = Array4::zeros(shape);
    let mut hh = Array4::zeros(shape);
    for ((i, ch, y, xx), out) in ll.indexed_iter_mut() {
        let a = x[[i, ch, 2 * y, 2 * xx]];
        let b = x[[i, ch, 2 * y, 2 * xx + 1]];
        let cc = x[[i, ch, 2 * y + 1, 2 * xx]];
        let d = x[[i, ch, 2 * y + 1, 2 * xx + 1]];
        *out = (a + b + cc + d) * 0.5;
        lh[[i, ch, y, xx]] = (a + b - cc - d) * 0.5;
        hl[[i, ch, y, xx]] = (a - b + cc - d) * 0.5;
        hh[[i, ch, y, xx]] = (a - b - cc + d) * 0.5;
    }
    Ok(SubbandSet { ll, lh, hl, hh })
}

pub fn haar_inverse(s: &SubbandSet) -> Result<BatchTensor> {
    let shape = s.ll.dim();
    if s.lh.dim() != shape || s.hl.dim() != shape || s.hh.dim() != shape {
        return Err(Error::Dimension(format!(
            "subband shapes disagree: {:?} {:?} {:?} {:?}",
            s.ll.dim(),
            s.lh.dim(),
            s.hl.dim(),
            s.hh.dim()
        )));
    }
    let (n, c, h, w) = shape;
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for ((i, ch, y, x), &ll) in s.ll.indexed_iter() {
        let lh = s.lh[[i, ch, y, x]];
        let hl = s.hl[[i, ch, y, x]];
        let hh = s.hh[[i, ch, y, x]];
        out[[i, ch, 2 * y, 2 * x]] = (ll + lh + hl + hh) * 0.5;
        out[[i, ch, 2 * y, 2 * x + 1]] = (ll + lh - hl - hh) * 0.5;
        out[[i, ch, 2 * y + 1, 2 * x]] = (ll - lh + hl - hh) * 0.5;
        out[[i, ch, 2 * y + 1, 2 * x + 1]] = (ll - lh - hl + hh) * 0.5;
    }
    Ok(out)
}

/// LH, HL and HH stacked along the channel axis, in that order:
/// `N × C × H × W` becomes `N × 3C × H/2 × W/2`.
pub fn hw_stack(x: &BatchTensor) -> Result<BatchTensor> {
    let s = haar_forward(x)?;
    Ok(concatenate(Axis(1), &[s.lh.view(), s.hl.view(), s.hh.view()])
        .expect("subbands share a shape"))
}

/// Adjoint of [`hw_stack`]: maps a gradient on the stacked subbands back to
/// the image. Because the transform is orthonormal this is the inverse with
/// a zero LL band.
pub fn hw_stack_backward(grad: &BatchTensor) -> Result<BatchTensor> {
    let (n, c3, h, w) = grad.dim();
    if c3 % 3 != 0 {
        return Err(Error::Dimension(format!(
            "stacked gradient has {c3} channels, not a multiple of 3"
        )));
    }
    let c = c3 / 3;
    let part = |k: usize| {
        grad.slice_axis(Axis(1), ndarray::Slice::from(k * c..(k + 1) * c))
            .to_owned()
    };
    haar_inverse(&SubbandSet {
        ll: Array4::zeros((n, c, h, w)),
        lh: part(0),
        hl: part(1),
        hh: part(2),
    })
}

fn fft2(plane: ArrayView2<f64>, planner: &mut FftPlanner<f64>, inverse: bool) -> Array2<Complex64> {
    let mut data = plane.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut data, planner, inverse);
    data
}

fn fft2_inplace(data: &mut Array2<Complex64>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (h, w) = data.dim();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); w.max(h)];
    for mut row in data.rows_mut() {
        buf[..w].iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        row_fft.process(&mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(v, b)| *v = *b);
    }
    for mut col in data.columns_mut() {
        buf[..h].iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        col_fft.process(&mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(v, b)| *v = *b);
    }
}

#[inline]
fn shifted(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

const MIN_FFT_SIZE: usize = 8;

/// Per-channel centered log-magnitude spectrum `log(1 + |DFT(x)|)`, same
/// spatial size as the input. Phase is discarded.
pub fn fft_highfreq(x: &BatchTensor) -> Result<BatchTensor> {
    let (n, c, h, w) = x.dim();
    if h < MIN_FFT_SIZE || w < MIN_FFT_SIZE {
        return Err(Error::Dimension(format!(
            "FFT transform needs at least {MIN_FFT_SIZE}x{MIN_FFT_SIZE}, got {h}x{w}"
        )));
    }
    check_finite("FFT input", x.iter().copied())?;
    let mut planner = FftPlanner::new();
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let spec = fft2(x.slice(ndarray::s![i, ch, .., ..]), &mut planner, false);
            for ((ky, kx), v) in spec.indexed_iter() {
                out[[i, ch, shifted(ky, h), shifted(kx, w)]] = v.norm().ln_1p();
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`fft_highfreq`] at `x`. Frequencies with zero
/// magnitude contribute no gradient.
pub fn fft_highfreq_backward(x: &BatchTensor, grad: &BatchTensor) -> Result<BatchTensor> {
    if x.dim() != grad.dim() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match input {:?}",
            grad.dim(),
            x.dim()
        )));
    }
    let (n, c, h, w) = x.dim();
    let mut planner = FftPlanner::new();
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let mut spec = fft2(x.slice(ndarray::s![i, ch, .., ..]), &mut planner, false);
            for ((ky, kx), v) in spec.indexed_iter_mut() {
                let mag = v.norm();
                let g = grad[[i, ch, shifted(ky, h), shifted(kx, w)]];
                *v = if mag > 0.0 {
                    *v * (g / ((1.0 + mag) * mag))
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            fft2_inplace(&mut spec, &mut planner, true);
            for ((y, xx), v) in spec.indexed_iter() {
                out[[i, ch, y, xx]] = v.re;
            }
        }
    }
    Ok(out)
}

/// Frequency representation fed to the embedding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Haar,
    Fft,
    None,
}

impl Transform {
    pub fn out_channels(self, in_channels: usize) -> usize {
        match self {
            Transform::Haar => 3 * in_channels,
            Transform::Fft | Transform::None => in_channels,
        }
    }

    pub fn apply(self, x: &BatchTensor) -> Result<BatchTensor> {
        match self {
            Transform::Haar => hw_stack(x),
            Transform::Fft => fft_highfreq(x),
            Transform::None => Ok(x.clone()),
        }
    }

    /// Pulls a gradient on the transformed representation back to `x`.
    pub fn backward(self, x: &BatchTensor, grad: &BatchTensor) -> Result<BatchTensor> {
        match self {
            Transform::Haar => hw_stack_backward(grad),
            Transform::Fft => fft_highfreq_backward(x, grad),
            Transform::None => Ok(grad.clone()),
        }
    }
}

/// Squared Frobenius norm of the stacked high-frequency subbands.
pub fn high_frequency_energy(x: &BatchTensor) -> Result<f64> {
    Ok(hw_stack(x)?.iter().map(|v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;
    use ndarray::Array;
    use proptest::prelude::*;

    fn random_batch(shape: (usize, usize, usize, usize), seed: u64) -> BatchTensor {
        let mut rng = RandomSource::seed_from(seed);
        Array::from_shape_simple_fn(shape, || rng.uniform(-1.0, 1.0))
    }

    fn block(vals: [f64; 4]) -> BatchTensor {
        Array4::from_shape_vec((1, 1, 2, 2), vals.to_vec()).unwrap()
    }

    #[test]
    fn constant_block_has_only_ll() {
        let s = haar_forward(&block([1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(s.ll[[0, 0, 0, 0]], 2.0);
        assert_eq!(s.lh[[0, 0, 0, 0]], 0.0);
        assert_eq!(s.hl[[0, 0, 0, 0]], 0.0);
        assert_eq!(s.hh[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn horizontal_alternation_lands_in_hl() {
        let s = haar_forward(&block([1.0, -1.0, 1.0, -1.0])).unwrap();
        assert_eq!(
            [s.ll[[0, 0, 0, 0]], s.lh[[0, 0, 0, 0]], s.hl[[0, 0, 0, 0]], s.hh[[0, 0, 0, 0]]],
            [0.0, 0.0, 2.0, 0.0]
        );
    }

    #[test]
    fn forward_matches_block_loop() {
        let x = random_batch((1, 1, 8, 8), 11);
        let s = haar_forward(&x).unwrap();
        for by in 0..4 {
            for bx in 0..4 {
                let a = x[[0, 0, 2 * by, 2 * bx]];
                let b = x[[0, 0, 2 * by, 2 * bx + 1]];
                let c = x[[0, 0, 2 * by + 1, 2 * bx]];
                let d = x[[0, 0, 2 * by + 1, 2 * bx + 1]];
                let idx = [0, 0, by, bx];
                assert!((s.ll[idx] - (a + b + c + d) / 2.0).abs() < 1e-15);
                assert!((s.lh[idx] - (a + b - c - d) / 2.0).abs() < 1e-15);
                assert!((s.hl[idx] - (a - b + c - d) / 2.0).abs() < 1e-15);
                assert!((s.hh[idx] - (a - b - c + d) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn odd_size_rejected() {
        let x = BatchTensor::zeros((1, 1, 3, 4));
        assert!(matches!(haar_forward(&x), Err(Error::Dimension(_))));
        assert!(hw_stack(&x).is_err());
    }

    #[test]
    fn inverse_of_unit_ll() {
        let s = SubbandSet {
            ll: Array4::from_elem((1, 1, 1, 1), 2.0),
            lh: Array4::zeros((1, 1, 1, 1)),
            hl: Array4::zeros((1, 1, 1, 1)),
            hh: Array4::zeros((1, 1, 1, 1)),
        };
        assert_eq!(haar_inverse(&s).unwrap(), Array4::from_elem((1, 1, 2, 2), 1.0));
    }

    #[test]
    fn inverse_of_zero_subbands_is_zero() {
        let z = Array4::zeros((2, 3, 4, 4));
        let s = SubbandSet {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        };
        assert!(haar_inverse(&s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_rejects_inconsistent_subbands() {
        let s = SubbandSet {
            ll: Array4::zeros((1, 1, 2, 2)),
            lh: Array4::zeros((1, 1, 2, 2)),
            hl: Array4::zeros((1, 1, 2, 3)),
            hh: Array4::zeros((1, 1, 2, 2)),
        };
        assert!(matches!(haar_inverse(&s), Err(Error::Dimension(_))));
    }

    #[test]
    fn hw_stack_shape_and_constant() {
        let x = random_batch((2, 3, 48, 48), 3);
        assert_eq!(hw_stack(&x).unwrap().dim(), (2, 9, 24, 24));
        let c = Array4::from_elem((1, 3, 8, 8), 0.37);
        assert!(hw_stack(&c).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkerboard_energy_sits_in_hh() {
        let x = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, y, x)| ((x + y) % 2) as f64);
        let s = haar_forward(&x).unwrap();
        let stacked = hw_stack(&x).unwrap();
        let hh_energy: f64 = s.hh.iter().map(|v| v * v).sum();
        let total: f64 = stacked.iter().map(|v| v * v).sum();
        assert!(hh_energy > 0.0);
        assert_eq!(hh_energy, total);
        // stacked layout: channel 2 is HH for a single input channel
        assert_eq!(stacked.index_axis(Axis(1), 2), s.hh.index_axis(Axis(1), 0));
    }

    #[test]
    fn hw_stack_backward_is_adjoint() {
        let x = random_batch((1, 2, 6, 8), 5);
        let g = random_batch((1, 6, 3, 4), 6);
        let lhs: f64 = (&hw_stack(&x).unwrap() * &g).sum();
        let rhs: f64 = (&x * &hw_stack_backward(&g).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn fft_constant_is_dc_only() {
        let c = 0.3;
        let x = Array4::from_elem((1, 1, 8, 8), c);
        let y = fft_highfreq(&x).unwrap();
        for ((_, _, ky, kx), &v) in y.indexed_iter() {
            if (ky, kx) == (4, 4) {
                assert!((v - (64.0f64 * c).ln_1p()).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fft_sinusoid_matches_direct_dft() {
        let n = 8;
        let x = Array4::from_shape_fn((1, 1, n, n), |(_, _, y, xx)| {
            (2.0 * std::f64::consts::PI * (2.0 * xx as f64 + y as f64) / n as f64).cos()
        });
        let y = fft_highfreq(&x).unwrap();
        for ky in 0..n {
            for kx in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for yy in 0..n {
                    for xx in 0..n {
                        let phase = -2.0 * std::f64::consts::PI
                            * ((ky * yy) as f64 + (kx * xx) as f64)
                            / n as f64;
                        acc += Complex64::from_polar(x[[0, 0, yy, xx]], phase);
                    }
                }
                let expect = acc.norm().ln_1p();
                let got = y[[0, 0, (ky + n / 2) % n, (kx + n / 2) % n]];
                assert!((got - expect).abs() < 1e-9, "bin ({ky},{kx})");
            }
        }
        // the peaks sit at (±1, ±2) around the center
        let peak = y[[0, 0, 5, 6]];
        assert!(peak > 1.0);
        assert!((y[[0, 0, 3, 2]] - peak).abs() < 1e-12);
    }

    #[test]
    fn fft_rejects_small_inputs() {
        assert!(fft_highfreq(&Array4::zeros((1, 1, 4, 8))).is_err());
    }

    #[test]
    fn fft_backward_matches_finite_differences() {
        let x = random_batch((1, 1, 8, 8), 21);
        let g = random_batch((1, 1, 8, 8), 22);
        let analytic = fft_highfreq_backward(&x, &g).unwrap();
        let f = |x: &BatchTensor| (&fft_highfreq(x).unwrap() * &g).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 0, 3, 5], [0, 0, 7, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_parseval(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
            let x = random_batch((n, c, 2 * h, 2 * w), seed);
            let s = haar_forward(&x).unwrap();
            let back = haar_inverse(&s).unwrap();
            let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(err <= 1e-6);
            let e: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((s.energy() - e).abs() <= 1e-5 * e);
        }

        #[test]
        fn linearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random_batch((1, 2, 6, 4), seed);
            let y = random_batch((1, 2, 6, 4), seed.wrapping_add(1));
            let lhs = haar_forward(&(&x * a + &y * b)).unwrap();
            let sx = haar_forward(&x).unwrap();
            let sy = haar_forward(&y).unwrap();
            for (l, (p, q)) in [(&lhs.ll, (&sx.ll, &sy.ll)), (&lhs.hh, (&sx.hh, &sy.hh)), (&lhs.lh, (&sx.lh, &sy.lh)), (&lhs.hl, (&sx.hl, &sy.hl))] {
                let diff = (l - &(p * a + q * b)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(diff <= 1e-6);
            }
        }

        #[test]
        fn fft_hermitian_symmetry(seed in any::<u64>(), h in 8usize..13, w in 8usize..13) {
            let x = random_batch((1, 1, h, w), seed);
            let y = fft_highfreq(&x).unwrap();
            // bin k sits at (k + n/2) mod n; its conjugate partner -k at (n - k + n/2) mod n
            for ky in 0..h {
                for kx in 0..w {
                    let a = y[[0, 0, (ky + h / 2) % h, (kx + w / 2) % w]];
                    let b = y[[0, 0, ((h - ky) % h + h / 2) % h, ((w - kx) % w + w / 2) % w]];
                    prop_assert!((a - b).abs() <= 1e-5);
                }
            }
        }
    }
}
