use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage};
use rand::Rng;

use super::Transform;

pub(super) fn apply_transform<R: Rng>(transform: &Transform, img: Rgb32FImage, rng: &mut R) -> Rgb32FImage {
    match *transform {
        Transform::HorizontalFlip => imageops::flip_horizontal(&img),
        Transform::VerticalFlip => imageops::flip_vertical(&img),
        Transform::Rotation { max_degrees } => {
            let deg = uniform(rng, -max_degrees, max_degrees);
            rotate(&img, deg.to_radians())
        }
        Transform::Greyscale => greyscale(img),
        Transform::GaussianBlur { sigma } => {
            let s = uniform(rng, sigma.0, sigma.1);
            gaussian_blur(&img, s)
        }
        Transform::RandomCrop { scale } => {
            let s = uniform(rng, scale.0, scale.1);
            random_crop(&img, s, rng)
        }
        Transform::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => {
            let b = uniform(rng, 1.0 - brightness, 1.0 + brightness);
            let c = uniform(rng, 1.0 - contrast, 1.0 + contrast);
            let s = uniform(rng, 1.0 - saturation, 1.0 + saturation);
            color_jitter(img, b.max(0.0), c.max(0.0), s.max(0.0))
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        return lo;
    }
    lo + (hi - lo) * rng.random::<f32>()
}

pub(super) fn resize(img: &Rgb32FImage, width: u32, height: u32) -> Rgb32FImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    imageops::resize(img, width, height, FilterType::Triangle)
}

fn luminance(px: &Rgb<f32>) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Replicated-luminance greyscale; the result keeps three channels.
fn greyscale(mut img: Rgb32FImage) -> Rgb32FImage {
    for px in img.pixels_mut() {
        let l = luminance(px);
        *px = Rgb([l, l, l]);
    }
    img
}

/// Rotation about the image centre with bilinear sampling; uncovered corners
/// are filled with black.
fn rotate(img: &Rgb32FImage, radians: f32) -> Rgb32FImage {
    let (w, h) = (img.width(), img.height());
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let (sin, cos) = radians.sin_cos();
    Rgb32FImage::from_fn(w, h, |x, y| {
        let dx = x as f32 - cx;
        let dy = y as f32 - cy;
        // inverse map: rotate the output coordinate back into the source
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        bilinear(img, sx, sy)
    })
}

fn bilinear(img: &Rgb32FImage, x: f32, y: f32) -> Rgb<f32> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let mut out = [0f32; 3];
    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
            let weight = wx * wy;
            if weight == 0.0 || xx < 0 || yy < 0 || xx >= w || yy >= h {
                continue;
            }
            let px = img.get_pixel(xx as u32, yy as u32);
            for c in 0..3 {
                out[c] += weight * px[c];
            }
        }
    }
    Rgb(out)
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn reflect(i: i64, n: i64) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as u32
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(img: &Rgb32FImage, sigma: f32) -> Rgb32FImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let horizontal = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let mut acc = [0f32; 3];
        for (j, kv) in k.iter().enumerate() {
            let px = img.get_pixel(reflect(x as i64 + j as i64 - r, w), y);
            for c in 0..3 {
                acc[c] += kv * px[c];
            }
        }
        Rgb(acc)
    });
    Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let mut acc = [0f32; 3];
        for (j, kv) in k.iter().enumerate() {
            let px = horizontal.get_pixel(x, reflect(y as i64 + j as i64 - r, h));
            for c in 0..3 {
                acc[c] += kv * px[c];
            }
        }
        Rgb(acc)
    })
}

/// Keeps a region covering `scale` of the area with the same aspect ratio, at
/// a uniformly drawn offset.
fn random_crop<R: Rng>(img: &Rgb32FImage, scale: f32, rng: &mut R) -> Rgb32FImage {
    let side = scale.clamp(0.0, 1.0).sqrt();
    let cw = ((img.width() as f32 * side).round() as u32).clamp(1, img.width());
    let ch = ((img.height() as f32 * side).round() as u32).clamp(1, img.height());
    let x0 = rng.random_range(0..=img.width() - cw);
    let y0 = rng.random_range(0..=img.height() - ch);
    imageops::crop_imm(img, x0, y0, cw, ch).to_image()
}

/// Brightness, then contrast, then saturation; values are clamped to [0, 1]
/// after each step.
fn color_jitter(mut img: Rgb32FImage, brightness: f32, contrast: f32, saturation: f32) -> Rgb32FImage {
    for px in img.pixels_mut() {
        for c in 0..3 {
            px[c] = (px[c] * brightness).clamp(0.0, 1.0);
        }
    }
    let n = (img.width() * img.height()).max(1) as f64;
    let mean_lum = (img.pixels().map(|p| luminance(p) as f64).sum::<f64>() / n) as f32;
    for px in img.pixels_mut() {
        for c in 0..3 {
            px[c] = ((px[c] - mean_lum) * contrast + mean_lum).clamp(0.0, 1.0);
        }
    }
    for px in img.pixels_mut() {
        let l = luminance(px);
        for c in 0..3 {
            px[c] = ((px[c] - l) * saturation + l).clamp(0.0, 1.0);
        }
    }
    img
}
