use image::{Rgb, Rgb32FImage, RgbImage};

use super::Normalization;

/// A normalized 3-channel image in channel-major (C, H, W) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "tensor data does not match (3, {height}, {width})");
        Self { height, width, data }
    }

    pub(crate) fn normalized(img: &Rgb32FImage, norm: &Normalization) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = (px[c] - norm.mean[c]) / norm.std[c];
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (3, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.height * self.width;
        let mut out = [0f64; 3];
        for (c, m) in out.iter_mut().enumerate() {
            let sum: f64 = self.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum();
            *m = sum / plane.max(1) as f64;
        }
        out
    }

    /// Undoes the normalization, returning pixel values in [0, 1] space.
    pub fn denormalize(&self, norm: &Normalization) -> Vec<f32> {
        let plane = self.height * self.width;
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                v * norm.std[c] + norm.mean[c]
            })
            .collect()
    }

    /// Renders back to 8-bit RGB for inspection.
    pub fn to_rgb8(&self, norm: &Normalization) -> RgbImage {
        let raw = self.denormalize(norm);
        let plane = self.height * self.width;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |c: usize| (raw[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        })
    }
}
