#![allow(dead_code)]

use std::path::Path;

use image::{Rgb, RgbImage};
use vesselgan::data::{vessel_phantom, DatasetId};

/// A STARE-shaped tree of `n` phantom images under `root`: dark corners
/// around a bright disc, published size, `.ah.ppm` labels.
pub fn synthetic_stare(root: &Path, n: usize) {
    let (w, h) = DatasetId::Stare.image_dims();
    let images = root.join("stare-images");
    let labels = root.join("labels-ah");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::create_dir_all(&labels).unwrap();
    let (cx, cy, radius) = (w as f64 / 2.0, h as f64 / 2.0, h as f64 * 0.48);
    for k in 0..n {
        let ph = vessel_phantom(w, k as u64 + 1).unwrap();
        let inside = |x: u32, y: u32| (x as f64 - cx).hypot(y as f64 - cy) <= radius;
        let fundus = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            if !inside(x, y) {
                return Rgb([2, 1, 0]);
            }
            let (r, c) = (y as usize, x as usize);
            Rgb([ph.fundus[[r, c, 0]], ph.fundus[[r, c, 1]], ph.fundus[[r, c, 2]]])
        });
        let gt = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let v = if inside(x, y) && ph.vessel_gt[[y as usize, x as usize]] == 1 { 255 } else { 0 };
            Rgb([v, v, v])
        });
        let id = format!("im{:04}", k + 1);
        fundus.save(images.join(format!("{id}.ppm"))).unwrap();
        gt.save(labels.join(format!("{id}.ah.ppm"))).unwrap();
    }
}
