//! Generated shape images for smoke tests and demos.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_manifest, DatasetManifest, Result, Split};
use crate::dataset::DatasetError;

/// Class names of the generated set; they follow the `<make> <model> <year>`
/// convention of real listings.
pub const SHAPE_CLASSES: [&str; 3] = ["Acme Roadster 2012", "Bolt Coupe Sport 2015", "Crest Wagon 2019"];

const COLORS: [[u8; 3]; 3] = [[200, 40, 40], [40, 170, 60], [50, 70, 210]];

/// Per-class record counts for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // upward triangle
        _ => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
    }
}

/// One image of class `class` (0..3): a coloured shape on a noisy grey
/// background. Shape, colour and layout all depend on the class, so mean
/// colour alone separates the classes.
pub fn shape_image(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let s = size as f64;
    let r = s * rng.random_range(0.25..0.38);
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    let color = COLORS[class % 3];
    let jitter: [i32; 3] = std::array::from_fn(|_| rng.random_range(-20..=20));
    let bg = rng.random_range(100..150) as i32;
    RgbImage::from_fn(size, size, |x, y| {
        let noise = rng.random_range(-12..=12);
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let px: [u8; 3] = if inside(class % 3, dx, dy, r) {
            std::array::from_fn(|c| (color[c] as i32 + jitter[c] + noise).clamp(0, 255) as u8)
        } else {
            [(bg + noise).clamp(0, 255) as u8; 3]
        };
        Rgb(px)
    })
}

/// Writes a 3-class shape dataset under `root` (`images/`, `annotations.csv`
/// with full-image boxes, `classes.txt`) and returns its manifest with
/// splits assigned in file order.
pub fn write_shapes_dataset(root: &Path, counts: ShapeCounts, size: u32, seed: u64) -> Result<DatasetManifest> {
    let images = root.join("images");
    std::fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = std::fs::File::create(root.join("annotations.csv"))?;
    let mut splits = Vec::new();
    let plan = [(Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)];
    for (split, n) in plan {
        for i in 0..n {
            for class in 0..SHAPE_CLASSES.len() {
                let rel = format!("images/{split}_{class}_{i:03}.png");
                shape_image(class, size, &mut rng)
                    .save(root.join(&rel))
                    .map_err(|e| DatasetError::Io(std::io::Error::other(e)))?;
                writeln!(csv, "{rel},{class},0,0,{size},{size}")?;
                splits.push(split);
            }
        }
    }
    drop(csv);
    std::fs::write(root.join("classes.txt"), SHAPE_CLASSES.join("\n") + "\n")?;
    let (mut manifest, _) = load_manifest(root, &root.join("annotations.csv"))?;
    manifest.source_tag = "synthetic-shapes".into();
    for (rec, split) in manifest.records.iter_mut().zip(splits) {
        rec.split = Some(split);
    }
    Ok(manifest)
}
