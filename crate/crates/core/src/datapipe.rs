//! Image ingestion, bicubic degradation, paired patch extraction and
//! benchmark dataset handling.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{crop_to_multiple, quantize_8bit, Image};

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes an RGB image in `[0, 1]` as 8-bit PNG (values clamped and rounded).
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 && c != 1 {
        return Err(Error::Dimension(format!("cannot write {c}-channel image")));
    }
    let px = |y: usize, x: usize, ch: usize| (img[[y, x, ch.min(c - 1)]].clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([px(y as usize, x as usize, 0), px(y as usize, x as usize, 1), px(y as usize, x as usize, 2)])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Per-output-pixel source indices and weights along one axis. When
/// shrinking, the kernel is stretched by `1/scale` (antialiasing); indices
/// past the border are mirrored.
fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (width, stretch) = if scale < 1.0 { (4.0 / scale, scale) } else { (4.0, 1.0) };
    let taps = width.ceil() as isize + 2;
    let period = 2 * in_len as isize;
    (1..=out_len)
        .map(|i| {
            // 1-based coordinates, as in the reference convention
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut raw: Vec<(isize, f64)> = (0..taps)
                .map(|t| {
                    let j = left + t;
                    (j, stretch * cubic(stretch * (u - j as f64)))
                })
                .collect();
            let total: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.iter_mut().for_each(|(_, w)| *w /= total);
            raw.into_iter()
                .filter(|(_, w)| *w != 0.0)
                .map(|(j, w)| {
                    let m = (j - 1).rem_euclid(period);
                    let idx = if m < in_len as isize { m } else { period - 1 - m };
                    (idx as usize, w)
                })
                .collect()
        })
        .collect()
}

fn resize_rows(img: &Image, out_h: usize) -> Image {
    let (h, w, c) = img.dim();
    let contrib = contributions(h, out_h);
    let mut out = Array3::zeros((out_h, w, c));
    for (y, taps) in contrib.iter().enumerate() {
        let mut row = out.slice_mut(s![y, .., ..]);
        for &(sy, wt) in taps {
            row.scaled_add(wt, &img.slice(s![sy, .., ..]));
        }
    }
    out
}

fn resize_cols(img: &Image, out_w: usize) -> Image {
    let (h, w, c) = img.dim();
    let contrib = contributions(w, out_w);
    let mut out = Array3::zeros((h, out_w, c));
    for (x, taps) in contrib.iter().enumerate() {
        let mut col = out.slice_mut(s![.., x, ..]);
        for &(sx, wt) in taps {
            col.scaled_add(wt, &img.slice(s![.., sx, ..]));
        }
    }
    out
}

/// Separable bicubic resampling (`a = -0.5`), antialiased when shrinking.
/// Height is resampled first. Output is not clamped.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!("target size {out_h}x{out_w} must be positive")));
    }
    let (h, w, _) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::Dimension("cannot resize an empty image".into()));
    }
    Ok(resize_cols(&resize_rows(img, out_h), out_w))
}

/// The benchmark degradation: HR cropped to a multiple of `scale`, bicubic
/// downscale, clamp and round to 8 bits (as when the LR is stored as PNG).
pub fn synthesize_lr(hr: &Image, scale: usize) -> Result<(Image, Image)> {
    let hr = crop_to_multiple(hr.view(), scale);
    let (h, w, _) = hr.dim();
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("image smaller than scale {scale}")));
    }
    let lr = quantize_8bit(&bicubic_resize(&hr, h / scale, w / scale)?);
    Ok((lr, hr))
}

/// Bicubic upscale clamped to `[0, 1]`: the interpolation baseline.
pub fn bicubic_upscale(lr: &Image, scale: usize) -> Result<Image> {
    let (h, w, _) = lr.dim();
    let mut up = bicubic_resize(lr, h * scale, w * scale)?;
    up.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(up)
}

/// An aligned LR/HR training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr_patch: Image,
    pub hr_patch: Image,
    pub source_index: usize,
    /// LR-space top-left corner.
    pub top: usize,
    pub left: usize,
}

/// Random LR-aligned `p × p` patch with its `sp × sp` HR counterpart.
pub fn extract_patch_pair(
    lr: &Image,
    hr: &Image,
    scale: usize,
    p: usize,
    source_index: usize,
    rng: &mut RandomSource,
) -> Result<PatchPair> {
    let (lh, lw, _) = lr.dim();
    let (hh, hw, _) = hr.dim();
    if hh != lh * scale || hw != lw * scale {
        return Err(Error::Dimension(format!(
            "HR {hh}x{hw} is not {scale}x LR {lh}x{lw}"
        )));
    }
    if lh < p || lw < p {
        return Err(Error::Dimension(format!(
            "image {source_index} ({lh}x{lw} LR) is smaller than a {p}x{p} patch"
        )));
    }
    let top = rng.index(lh - p + 1);
    let left = rng.index(lw - p + 1);
    Ok(PatchPair {
        lr_patch: lr.slice(s![top..top + p, left..left + p, ..]).to_owned(),
        hr_patch: hr
            .slice(s![scale * top..scale * (top + p), scale * left..scale * (left + p), ..])
            .to_owned(),
        source_index,
        top,
        left,
    })
}

/// Benchmark test sets with their published image counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Benchmark {
    Set5,
    Set14,
    B100,
    Urban100,
    Manga109,
    Custom(PathBuf),
}

const SET5: [&str; 5] = ["baby", "bird", "butterfly", "head", "woman"];
const SET14: [&str; 14] = [
    "baboon", "barbara", "bridge", "coastguard", "comic", "face", "flowers", "foreman", "lenna", "man", "monarch",
    "pepper", "ppt3", "zebra",
];

impl Benchmark {
    pub fn parse(name: &str) -> Benchmark {
        match name.to_ascii_lowercase().as_str() {
            "set5" => Benchmark::Set5,
            "set14" => Benchmark::Set14,
            "b100" | "bsd100" => Benchmark::B100,
            "urban100" => Benchmark::Urban100,
            "manga109" => Benchmark::Manga109,
            _ => Benchmark::Custom(PathBuf::from(name)),
        }
    }

    pub fn dir_name(&self) -> String {
        match self {
            Benchmark::Set5 => "Set5".into(),
            Benchmark::Set14 => "Set14".into(),
            Benchmark::B100 => "B100".into(),
            Benchmark::Urban100 => "Urban100".into(),
            Benchmark::Manga109 => "Manga109".into(),
            Benchmark::Custom(p) => p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()),
        }
    }

    pub fn expected_count(&self) -> Option<usize> {
        match self {
            Benchmark::Set5 => Some(5),
            Benchmark::Set14 => Some(14),
            Benchmark::B100 => Some(100),
            Benchmark::Urban100 => Some(100),
            Benchmark::Manga109 => Some(109),
            Benchmark::Custom(_) => None,
        }
    }

    fn known_stems(&self) -> &'static [&'static str] {
        match self {
            Benchmark::Set5 => &SET5,
            Benchmark::Set14 => &SET14,
            _ => &[],
        }
    }

    /// `<root>/<Name>` for named sets; the path itself for custom ones.
    pub fn dir(&self, root: &Path) -> PathBuf {
        match self {
            Benchmark::Custom(p) if p.is_absolute() || p.exists() => p.clone(),
            Benchmark::Custom(p) => root.join(p),
            other => root.join(other.dir_name()),
        }
    }
}

/// HR images (and optionally provided LR images) of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub name: String,
    pub hr_paths: Vec<PathBuf>,
    pub lr_paths: Option<Vec<PathBuf>>,
    pub scale: usize,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Opens `<dir>/HR/*.png` (or `<dir>/*.png` when there is no `HR`
/// subdirectory) and, if present, `<dir>/LR_x<scale>/` with matching stems.
pub fn load_benchmark(root: &Path, bench: &Benchmark, scale: usize) -> Result<PairedDataset> {
    let dir = bench.dir(root);
    let hr_dir = if dir.join("HR").is_dir() { dir.join("HR") } else { dir.clone() };
    if !hr_dir.is_dir() {
        return Err(Error::Integrity(format!("dataset directory {} not found", hr_dir.display())));
    }
    let hr_paths = list_pngs(&hr_dir)?;
    if hr_paths.is_empty() {
        return Err(Error::Integrity(format!("no PNG images in {}", hr_dir.display())));
    }
    if let Some(n) = bench.expected_count() {
        if hr_paths.len() != n {
            let present: Vec<String> = hr_paths.iter().map(|p| stem(p).to_ascii_lowercase()).collect();
            let missing: Vec<&str> = bench
                .known_stems()
                .iter()
                .copied()
                .filter(|s| !present.iter().any(|p| p == s || p.starts_with(&format!("{s}_"))))
                .collect();
            return Err(Error::Integrity(format!(
                "{} has {} images, expected {n}{}",
                bench.dir_name(),
                hr_paths.len(),
                if missing.is_empty() { String::new() } else { format!("; missing: {}", missing.join(", ")) }
            )));
        }
    }
    let lr_dir = dir.join(format!("LR_x{scale}"));
    let lr_paths = if lr_dir.is_dir() {
        let lrs = list_pngs(&lr_dir)?;
        let missing: Vec<String> = hr_paths
            .iter()
            .map(|p| stem(p))
            .filter(|s| !lrs.iter().any(|l| &stem(l) == s))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Integrity(format!(
                "{} lacks LR images for: {}",
                lr_dir.display(),
                missing.join(", ")
            )));
        }
        Some(hr_paths.iter().map(|p| lr_dir.join(p.file_name().expect("file path"))).collect())
    } else {
        None
    };
    Ok(PairedDataset {
        name: bench.dir_name(),
        hr_paths,
        lr_paths,
        scale,
    })
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.hr_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr_paths.is_empty()
    }

    pub fn stem(&self, i: usize) -> String {
        stem(&self.hr_paths[i])
    }

    /// `(lr, hr)` for image `i`; HR is cropped to a multiple of the scale and
    /// LR is synthesized when not provided.
    pub fn load_pair(&self, i: usize) -> Result<(Image, Image)> {
        let hr = load_png(&self.hr_paths[i])?;
        match &self.lr_paths {
            None => synthesize_lr(&hr, self.scale),
            Some(lrs) => {
                let lr = load_png(&lrs[i])?;
                let hr = crop_to_multiple(hr.view(), self.scale);
                let (lh, lw, _) = lr.dim();
                if hr.dim().0 != lh * self.scale || hr.dim().1 != lw * self.scale {
                    return Err(Error::Integrity(format!(
                        "{}: LR {lh}x{lw} does not match HR {:?} at scale {}",
                        self.stem(i),
                        hr.dim(),
                        self.scale
                    )));
                }
                Ok((lr, hr))
            }
        }
    }
}

/// In-memory training pairs.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub names: Vec<String>,
    pub lr: Vec<Image>,
    pub hr: Vec<Image>,
    pub scale: usize,
}

impl TrainingSet {
    /// Synthesizes the LR side of each HR image.
    pub fn from_hr_images(names: Vec<String>, hrs: &[Image], scale: usize) -> Result<Self> {
        let mut lr = Vec::with_capacity(hrs.len());
        let mut hr = Vec::with_capacity(hrs.len());
        for img in hrs {
            let (l, h) = synthesize_lr(img, scale)?;
            lr.push(l);
            hr.push(h);
        }
        Ok(TrainingSet { names, lr, hr, scale })
    }

    pub fn from_dataset(ds: &PairedDataset) -> Result<Self> {
        let mut set = TrainingSet {
            names: Vec::new(),
            lr: Vec::new(),
            hr: Vec::new(),
            scale: ds.scale,
        };
        for i in 0..ds.len() {
            let (l, h) = ds.load_pair(i)?;
            set.names.push(ds.stem(i));
            set.lr.push(l);
            set.hr.push(h);
        }
        Ok(set)
    }

    /// Every HR PNG in `dir`, LR synthesized.
    pub fn from_dir(dir: &Path, scale: usize) -> Result<Self> {
        let paths = list_pngs(dir)?;
        if paths.is_empty() {
            return Err(Error::Integrity(format!("no PNG images in {}", dir.display())));
        }
        let imgs = paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
        Self::from_hr_images(paths.iter().map(|p| stem(p)).collect(), &imgs, scale)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    /// Draws a patch from a random image, resampling the image (with a
    /// warning) when it is too small.
    pub fn random_patch(&self, p: usize, rng: &mut RandomSource) -> Result<PatchPair> {
        let fits = self.lr.iter().filter(|l| l.dim().0 >= p && l.dim().1 >= p).count();
        if fits == 0 {
            return Err(Error::Config(format!("no training image is large enough for a {p}x{p} LR patch")));
        }
        loop {
            let i = rng.index(self.len());
            match extract_patch_pair(&self.lr[i], &self.hr[i], self.scale, p, i, rng) {
                Ok(pp) => return Ok(pp),
                Err(Error::Dimension(msg)) => log::warn!("skipping {}: {msg}", self.names[i]),
                Err(e) => return Err(e),
            }
        }
    }

    /// Stable digest of the pixel content (FNV-1a over the f64 bits).
    pub fn checksums(&self) -> Vec<(String, String)> {
        self.names
            .iter()
            .zip(&self.hr)
            .map(|(n, img)| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for v in img.iter() {
                    for b in v.to_bits().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
                (n.clone(), format!("{h:016x}"))
            })
            .collect()
    }
}

/// Writes `LR_x<scale>/` next to the `HR/` folder of a dataset.
pub fn materialize_lr(dir: &Path, scale: usize, force: bool) -> Result<Vec<PathBuf>> {
    let hr_dir = if dir.join("HR").is_dir() { dir.join("HR") } else { dir.to_path_buf() };
    let out_dir = dir.join(format!("LR_x{scale}"));
    if out_dir.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", out_dir.display())));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut written = Vec::new();
    for p in list_pngs(&hr_dir)? {
        let (lr, _) = synthesize_lr(&load_png(&p)?, scale)?;
        let target = out_dir.join(p.file_name().expect("file path"));
        save_png(&target, &lr)?;
        written.push(target);
    }
    Ok(written)
}

/// `1 - w` weight vector used by tests of the resampler.
#[cfg(test)]
fn weight_rows(in_len: usize, out_len: usize) -> ndarray::Array2<f64> {
    let c = contributions(in_len, out_len);
    let mut m = ndarray::Array2::zeros((out_len, in_len));
    for (i, taps) in c.iter().enumerate() {
        for &(j, w) in taps {
            m[[i, j]] += w;
        }
    }
    m
}
