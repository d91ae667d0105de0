use super::{Annotation, BoundingBox, Image, ImageRecord};
use crate::error::{Error, Result};

/// Accepted range of scale factors for [`rescale`].
pub const RESCALE_RANGE: (f64, f64) = (0.5, 2.0);

/// Mirrors the image about its vertical axis; boxes follow, labels are untouched.
pub fn flip_horizontal(record: &ImageRecord) -> ImageRecord {
    let w = record.width() as f64;
    ImageRecord {
        id: record.id.clone(),
        image: record.image.flip_horizontal(),
        annotations: record
            .annotations
            .iter()
            .map(|a| Annotation {
                bbox: a.bbox.flip_horizontal(w),
                ..*a
            })
            .collect(),
    }
}

/// Bilinear rescale to `(round(H*f), round(W*f))`; boxes are scaled then clipped.
///
/// Annotations whose box collapses after clipping are dropped.
pub fn rescale(record: &ImageRecord, factor: f64) -> Result<ImageRecord> {
    let (lo, hi) = RESCALE_RANGE;
    if !(factor.is_finite() && (lo..=hi).contains(&factor)) {
        return Err(Error::InvalidArgument(format!(
            "scale factor {factor} outside [{lo}, {hi}]"
        )));
    }
    let new_h = ((record.height() as f64 * factor).round() as usize).max(1);
    let new_w = ((record.width() as f64 * factor).round() as usize).max(1);
    let image = if new_h == record.height() && new_w == record.width() {
        record.image.clone()
    } else {
        record.image.resize(new_h, new_w)
    };
    let annotations = record
        .annotations
        .iter()
        .filter_map(|a| {
            let bbox = a.bbox.scale(factor).clip(new_w as f64, new_h as f64);
            bbox.is_valid().then_some(Annotation { bbox, ..*a })
        })
        .collect();
    Ok(ImageRecord {
        id: record.id.clone(),
        image,
        annotations,
    })
}

/// Extracts the region under `bbox`, expanded by `pad_fraction` of its
/// width/height on every side and clipped to the image, resampled to
/// `output_size = (h, w)`.
pub fn crop(
    image: &Image,
    bbox: &BoundingBox,
    pad_fraction: f64,
    output_size: (usize, usize),
) -> Result<Image> {
    if !(pad_fraction >= 0.0 && pad_fraction.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "pad_fraction must be >= 0, got {pad_fraction}"
        )));
    }
    let (out_h, out_w) = output_size;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("crop output size must be positive".into()));
    }
    let (w, h) = (image.width() as f64, image.height() as f64);
    let pad_x = bbox.width() * pad_fraction;
    let pad_y = bbox.height() * pad_fraction;
    let region = BoundingBox {
        x_min: bbox.x_min - pad_x,
        y_min: bbox.y_min - pad_y,
        x_max: bbox.x_max + pad_x,
        y_max: bbox.y_max + pad_y,
    }
    .clip(w, h);
    if !(region.x_min < region.x_max && region.y_min < region.y_max) {
        return Err(Error::InvalidArgument(format!(
            "crop box {:?} lies outside the {}x{} image",
            bbox.to_array(),
            image.width(),
            image.height()
        )));
    }
    Ok(image.resample_region(
        (region.x_min, region.y_min, region.x_max, region.y_max),
        out_h,
        out_w,
    ))
}
