//! PSNR / SSIM on the luma channel, following the super-resolution
//! benchmark convention (BT.601 studio-swing Y, border shave).

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datapipe::PairedDataset;
use crate::error::{Error, Result};
use crate::tensor::{quantize_8bit, Image};

/// Ceiling reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
const RANGE_SLACK: f64 = 1e-6;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Y plane in `[16, 235]` from RGB in `[0, 1]`.
pub fn rgb_to_y(img: &Image) -> Result<Array2<f64>> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Dimension(format!("expected RGB, got {c} channels")));
    }
    if let Some(v) = img.iter().find(|v| !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(*v)) {
        return Err(Error::Range(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        16.0 + 65.481 * img[[y, x, 0]] + 128.553 * img[[y, x, 1]] + 24.966 * img[[y, x, 2]]
    }))
}

fn shaved_pair(sr: &Image, hr: &Image, shave: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if sr.dim() != hr.dim() {
        return Err(Error::Dimension(format!("shapes differ: {:?} vs {:?}", sr.dim(), hr.dim())));
    }
    let (h, w, _) = sr.dim();
    if 2 * shave >= h || 2 * shave >= w {
        return Err(Error::Parameter(format!("shave {shave} leaves nothing of a {h}x{w} image")));
    }
    let crop = |p: Array2<f64>| p.slice(s![shave..h - shave, shave..w - shave]).to_owned();
    Ok((crop(rgb_to_y(sr)?), crop(rgb_to_y(hr)?)))
}

/// PSNR in dB on the shaved Y planes; `f64::INFINITY` for identical inputs.
pub fn psnr_y(sr: &Image, hr: &Image, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(sr, hr, shave)?;
    let mse = (&a - &b).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" correlation with the normalized Gaussian window.
fn filter_valid(x: ArrayView2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = Array2::zeros((oh, w));
    for y in 0..oh {
        for (t, &gt) in g.iter().enumerate() {
            tmp.row_mut(y).scaled_add(gt, &x.row(y + t));
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        let src = tmp.row(y);
        let mut dst = out.row_mut(y);
        for xo in 0..ow {
            dst[xo] = g.iter().enumerate().map(|(t, gt)| gt * src[xo + t]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid response map of the shaved Y planes.
pub fn ssim_y(sr: &Image, hr: &Image, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(sr, hr, shave)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "{h}x{w} after shaving is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    Ok(ssim_planes(a.view(), b.view()))
}

fn ssim_planes(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let g = gaussian_taps();
    let mu1 = filter_valid(a, &g);
    let mu2 = filter_valid(b, &g);
    let e11 = filter_valid((&a * &a).view(), &g);
    let e22 = filter_valid((&b * &b).view(), &g);
    let e12 = filter_valid((&a * &b).view(), &g);
    let mut total = 0.0;
    for i in 0..mu1.len() {
        let (m1, m2) = (mu1.as_slice().unwrap()[i], mu2.as_slice().unwrap()[i]);
        let s11 = e11.as_slice().unwrap()[i] - m1 * m1;
        let s22 = e22.as_slice().unwrap()[i] - m2 * m2;
        let s12 = e12.as_slice().unwrap()[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + c1) * (2.0 * s12 + c2)) / ((m1 * m1 + m2 * m2 + c1) * (s11 + s22 + c2));
    }
    total / mu1.len() as f64
}

/// Whether outputs are rounded to 8 bits before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Quantize {
    #[default]
    Off,
    On,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub scale: usize,
    pub shave: usize,
    pub images: Vec<ImageScore>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, scale: usize, shave: usize) -> Self {
        EvalReport {
            dataset: dataset.into(),
            scale,
            shave,
            images: Vec::new(),
        }
    }

    /// Scores one output (clamped to `[0, 1]`, optionally rounded to 8 bits).
    pub fn score(&mut self, name: impl Into<String>, sr: &Image, hr: &Image, q: Quantize) -> Result<&ImageScore> {
        let mut out = sr.mapv(|v| v.clamp(0.0, 1.0));
        if q == Quantize::On {
            out = quantize_8bit(&out);
        }
        let psnr = psnr_y(&out, hr, self.shave)?;
        let ssim = ssim_y(&out, hr, self.shave)?;
        self.images.push(ImageScore {
            name: name.into(),
            psnr,
            ssim,
        });
        Ok(self.images.last().expect("just pushed"))
    }

    /// Mean PSNR with infinite entries counted at the cap.
    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|s| s.psnr.min(PSNR_CAP)))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|s| s.ssim))
    }

    pub fn summary_line(&self) -> String {
        format!("PSNR={:.4} SSIM={:.4}", self.mean_psnr(), self.mean_ssim())
    }

    /// `filename,psnr,ssim` rows sorted by name, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<&ImageScore> = self.images.iter().collect();
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        let mut out = String::from("filename,psnr,ssim\n");
        for r in rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.name, r.psnr.min(PSNR_CAP), r.ssim);
        }
        let _ = writeln!(out, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        out
    }
}

/// Upscales every LR image of `ds` with `upscale` and scores it against
/// its HR counterpart.
pub fn evaluate_dataset(
    ds: &PairedDataset,
    shave: usize,
    q: Quantize,
    mut upscale: impl FnMut(&Image) -> Result<Image>,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(ds.name.clone(), ds.scale, shave);
    for i in 0..ds.len() {
        let (lr, hr) = ds.load_pair(i)?;
        let sr = upscale(&lr)?;
        if sr.dim() != hr.dim() {
            return Err(Error::Dimension(format!(
                "{}: output {:?} does not match HR {:?}",
                ds.stem(i),
                sr.dim(),
                hr.dim()
            )));
        }
        report.score(ds.stem(i), &sr, &hr, q)?;
    }
    Ok(report)
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
