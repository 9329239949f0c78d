//! Array conventions shared across the crate.
//!
//! Images are `height × width × channel` (RGB, values in `[0, 1]`); batches
//! are `batch × channel × height × width`.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;
pub type BatchTensor = Array4<f64>;

/// Stacks equally sized HWC images into an NCHW batch.
pub fn batch_from_images(images: &[Image]) -> Result<BatchTensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("empty image list".into()))?;
    let (h, w, c) = first.dim();
    let mut out = BatchTensor::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(Error::Dimension(format!(
                "image {i} has shape {:?}, expected {:?}",
                img.dim(),
                (h, w, c)
            )));
        }
        out.index_axis_mut(Axis(0), i)
            .assign(&img.view().permuted_axes([2, 0, 1]));
    }
    Ok(out)
}

/// Sample `i` of a batch as an HWC image.
pub fn image_from_batch(batch: &BatchTensor, i: usize) -> Image {
    batch
        .index_axis(Axis(0), i)
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .to_owned()
}

pub fn clamp_unit(img: &mut Image) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// Rounds to the 8-bit grid, as if the image had been written to PNG.
pub fn quantize_8bit(img: &Image) -> Image {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

pub fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
    }
}

/// Crops an HWC image so both spatial dims are multiples of `m`.
pub fn crop_to_multiple(img: ArrayView3<f64>, m: usize) -> Image {
    let (h, w, _) = img.dim();
    img.slice(s![..h - h % m, ..w - w % m, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_image_round_trip() {
        let img = Image::from_shape_fn((3, 4, 3), |(y, x, c)| (y * 100 + x * 10 + c) as f64);
        let b = batch_from_images(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(b.dim(), (2, 3, 3, 4));
        assert_eq!(b[[1, 2, 1, 3]], 132.0);
        assert_eq!(image_from_batch(&b, 1), img);
    }

    #[test]
    fn mismatched_images_rejected() {
        let a = Image::zeros((2, 2, 3));
        let b = Image::zeros((2, 4, 3));
        assert!(batch_from_images(&[a, b]).is_err());
    }
}
