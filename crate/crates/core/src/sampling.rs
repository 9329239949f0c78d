//! Positive (sharpened) and hard negative (slightly blurred) sample
//! generation from the ground truth, plus paired geometric augmentation.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{clamp_unit, Image};

pub const KERNEL_SIZES: [usize; 5] = [3, 5, 7, 9, 11];
pub const SIGMA_RANGE: (f64, f64) = (0.3, 1.5);
pub const SHARPEN_STRENGTH_RANGE: (f64, f64) = (0.2, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    GaussianBlur,
    Unsharp,
}

/// Blur or unsharp-mask kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub size: usize,
    pub sigma: f64,
    /// Unsharp amount; zero for blur kernels.
    pub strength: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !KERNEL_SIZES.contains(&self.size) {
            return Err(Error::Parameter(format!("kernel size {} not in {KERNEL_SIZES:?}", self.size)));
        }
        if !(SIGMA_RANGE.0..=SIGMA_RANGE.1).contains(&self.sigma) {
            return Err(Error::Parameter(format!("kernel sigma {} outside {SIGMA_RANGE:?}", self.sigma)));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::Parameter(format!("unsharp strength {} must be >= 0", self.strength)));
        }
        Ok(())
    }

    /// The normalized `size × size` Gaussian,
    /// `K[i,j] ∝ exp(-((i-c)² + (j-c)²) / (2σ²))`.
    pub fn gaussian(&self) -> Array2<f64> {
        let c = (self.size / 2) as f64;
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let k = Array2::from_shape_fn((self.size, self.size), |(i, j)| {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            (-(di * di + dj * dj) / two_s2).exp()
        });
        let total = k.sum();
        k / total
    }

    /// Applies the kernel to an image: a plain blur for `GaussianBlur`,
    /// `clamp(x + λ(x - G∗x))` for `Unsharp`.
    pub fn apply(&self, img: &Image) -> Image {
        let blurred = convolve_reflect(img, &self.gaussian());
        let mut out = match self.kind {
            KernelKind::GaussianBlur => blurred,
            KernelKind::Unsharp => unsharp_unclamped(img, &blurred, self.strength),
        };
        clamp_unit(&mut out);
        out
    }
}

fn unsharp_unclamped(img: &Image, blurred: &Image, strength: f64) -> Image {
    img + &((img - blurred) * strength)
}

/// Index into `[0, n)` under numpy-style "reflect" padding (edge not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Same-size 2D correlation of every channel with `kernel`, reflect padding.
pub fn convolve_reflect(img: &Image, kernel: &Array2<f64>) -> Image {
    let (h, w, c) = img.dim();
    let (kh, kw) = kernel.dim();
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let ys: Vec<Vec<usize>> = (0..h as isize)
        .map(|y| (0..kh as isize).map(|i| reflect(y + i - rh, h)).collect())
        .collect();
    let xs: Vec<Vec<usize>> = (0..w as isize)
        .map(|x| (0..kw as isize).map(|j| reflect(x + j - rw, w)).collect())
        .collect();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, &sy) in ys[y].iter().enumerate() {
                    for (j, &sx) in xs[x].iter().enumerate() {
                        acc += kernel[[i, j]] * img[[sy, sx, ch]];
                    }
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Size uniform over {3,5,7,9,11}, width uniform over [0.3, 1.5].
pub fn sample_blur_kernel(rng: &mut RandomSource) -> KernelSpec {
    let size = KERNEL_SIZES[rng.index(KERNEL_SIZES.len())];
    let sigma = rng.uniform(SIGMA_RANGE.0, SIGMA_RANGE.1);
    KernelSpec {
        kind: KernelKind::GaussianBlur,
        size,
        sigma,
        strength: 0.0,
    }
}

fn check_unit_range(img: &Image) -> Result<()> {
    if img.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Range("ground truth values must lie in [0, 1]".into()))
    }
}

/// Hard negatives with the kernel that produced each one.
pub fn make_negatives_traced(hr: &Image, k: usize, rng: &mut RandomSource) -> Result<Vec<(KernelSpec, Image)>> {
    if k == 0 {
        return Err(Error::Config("at least one negative sample is required".into()));
    }
    check_unit_range(hr)?;
    Ok((0..k)
        .map(|_| {
            let spec = sample_blur_kernel(rng);
            (spec, spec.apply(hr))
        })
        .collect())
}

/// `k` slightly blurred copies of `hr`, each with its own random Gaussian.
pub fn make_negatives(hr: &Image, k: usize, rng: &mut RandomSource) -> Result<Vec<Image>> {
    Ok(make_negatives_traced(hr, k, rng)?.into_iter().map(|(_, img)| img).collect())
}

/// Sharpened positives with their kernels; the ground truth itself is not
/// included here.
pub fn make_sharpened_traced(hr: &Image, k: usize, rng: &mut RandomSource) -> Result<Vec<(KernelSpec, Image)>> {
    check_unit_range(hr)?;
    Ok((0..k)
        .map(|_| {
            let blur = sample_blur_kernel(rng);
            let spec = KernelSpec {
                kind: KernelKind::Unsharp,
                strength: rng.uniform(SHARPEN_STRENGTH_RANGE.0, SHARPEN_STRENGTH_RANGE.1),
                ..blur
            };
            (spec, spec.apply(hr))
        })
        .collect())
}

/// `[hr, sharpen_1(hr), …, sharpen_k(hr)]`. With `k = 0` only the ground
/// truth is returned.
pub fn make_positives(hr: &Image, k: usize, rng: &mut RandomSource) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(hr.clone());
    out.extend(make_sharpened_traced(hr, k, rng)?.into_iter().map(|(_, img)| img));
    Ok(out)
}

/// Ground truth with its positive and negative sets.
#[derive(Debug, Clone)]
pub struct ContrastiveSampleSet {
    pub anchor_hr: Image,
    pub positives: Vec<Image>,
    pub negatives: Vec<Image>,
}

impl ContrastiveSampleSet {
    pub fn generate(hr: &Image, k_pos: usize, k_neg: usize, rng: &mut RandomSource) -> Result<Self> {
        let positives = make_positives(hr, k_pos, rng)?;
        let negatives = make_negatives(hr, k_neg, rng)?;
        Ok(ContrastiveSampleSet {
            anchor_hr: hr.clone(),
            positives,
            negatives,
        })
    }
}

/// Horizontal flip followed by `rot90` quarter turns counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricTransform {
    pub flip: bool,
    pub rot90: u8,
}

impl GeometricTransform {
    pub fn sample(rng: &mut RandomSource) -> Self {
        let flip = rng.coin(0.5);
        let rot90 = rng.index(4) as u8;
        GeometricTransform { flip, rot90 }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut v = img.view();
        if self.flip {
            v.invert_axis(Axis(1));
        }
        for _ in 0..self.rot90 % 4 {
            // counter-clockwise: out[i, j] = in[j, W-1-i]
            v.invert_axis(Axis(1));
            v.swap_axes(0, 1);
        }
        v.as_standard_layout().to_owned()
    }
}

/// Applies one random flip/rotation to both images of a training pair.
pub fn geometric_augment(lr: &Image, hr: &Image, rng: &mut RandomSource) -> Result<(Image, Image)> {
    let (lh, lw, lc) = lr.dim();
    let (hh, hw, hc) = hr.dim();
    if lh == 0 || lw == 0 || hh % lh != 0 || hw % lw != 0 || hh / lh != hw / lw || lc != hc {
        return Err(Error::Dimension(format!(
            "HR {:?} is not an integer upscale of LR {:?}",
            hr.dim(),
            lr.dim()
        )));
    }
    let t = GeometricTransform::sample(rng);
    Ok((t.apply(lr), t.apply(hr)))
}
