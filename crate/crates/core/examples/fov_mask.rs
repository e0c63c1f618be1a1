//! Generate a field-of-view mask for a synthetic fundus (bright disc on a
//! dark frame) and compare it with the known disc.
//!
//! cargo run --example fov_mask -- [out.png]

use ndarray::Array3;
use vesselgan::data::{generate_fov_mask, FovParams};
use vesselgan::infer::write_confidence_png;

fn main() -> vesselgan::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fov_mask.png".into());
    let (h, w) = (300usize, 340usize);
    let radius = 0.45 * h as f64;
    let inside = |r: usize, c: usize| {
        let (dy, dx) = (r as f64 - h as f64 / 2.0, c as f64 - w as f64 / 2.0);
        dx * dx + dy * dy <= radius * radius
    };
    let fundus = Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
        if !inside(r, c) {
            return [3, 2, 1][ch];
        }
        // dark vessel stripes inside the disc must not punch holes in the mask
        if (c / 6) % 5 == 0 {
            [60, 20, 10][ch]
        } else {
            [180, 90, 40][ch]
        }
    });
    let mask = generate_fov_mask(&fundus, &FovParams::default())?;
    let mut wrong = 0;
    for ((r, c), &m) in mask.indexed_iter() {
        if (m == 1) != inside(r, c) {
            wrong += 1;
        }
    }
    println!("{} of {} pixels disagree with the true disc", wrong, h * w);
    write_confidence_png(std::path::Path::new(&out), &mask.mapv(f32::from))?;
    println!("mask written to {out}");
    Ok(())
}
