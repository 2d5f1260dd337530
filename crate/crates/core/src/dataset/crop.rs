use image::{DynamicImage, GenericImageView};

use super::{BBox, DatasetError, ImageRecord, Result};

/// The bbox covering the whole image.
pub fn full_image_bbox(image: &DynamicImage) -> BBox {
    let (w, h) = image.dimensions();
    BBox::new(0, 0, w, h)
}

/// Crops `image` to the record's bounding box.
///
/// Boxes that extend past the image are an error; nothing is clamped.
pub fn crop_to_bbox(record: &ImageRecord, image: &DynamicImage) -> Result<DynamicImage> {
    crop_box(record.bbox, image)
}

pub(crate) fn crop_box(bbox: BBox, image: &DynamicImage) -> Result<DynamicImage> {
    if !bbox.is_valid() {
        return Err(DatasetError::InvalidBBox(bbox));
    }
    let (width, height) = image.dimensions();
    if !bbox.fits_within(width, height) {
        return Err(DatasetError::BBoxOutOfBounds {
            bbox,
            width,
            height,
        });
    }
    Ok(image.crop_imm(bbox.x_min, bbox.y_min, bbox.width(), bbox.height()))
}
