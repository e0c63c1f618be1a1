//! Field-of-view mask generation for datasets shipped without masks.
//!
//! Threshold the luminance, close small gaps with a disc, fill holes, keep
//! the largest 8-connected component.

use std::collections::VecDeque;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FovParams {
    /// Luminance threshold as a fraction of full scale.
    pub threshold: f64,
    /// Radius of the disc used for morphological closing.
    pub closing_radius: usize,
}

impl Default for FovParams {
    fn default() -> Self {
        Self {
            threshold: 0.08,
            closing_radius: 5,
        }
    }
}

pub fn luminance(fundus: &Array3<u8>) -> Array2<f64> {
    let (h, w, _) = fundus.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        0.299 * f64::from(fundus[[r, c, 0]])
            + 0.587 * f64::from(fundus[[r, c, 1]])
            + 0.114 * f64::from(fundus[[r, c, 2]])
    })
}

fn disc_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr * dr + dc * dc <= r2 {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Binary dilation (`grow = true`) or erosion with a disc. Pixels outside the
/// frame count as background for dilation and foreground for erosion, so a
/// full-frame mask survives a closing unchanged.
fn morph(mask: &Array2<u8>, radius: usize, grow: bool) -> Array2<u8> {
    let (h, w) = mask.dim();
    let offsets = disc_offsets(radius);
    Array2::from_shape_fn((h, w), |(r, c)| {
        let hit = |&(dr, dc): &(isize, isize)| {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                !grow
            } else {
                mask[[rr as usize, cc as usize]] == 1
            }
        };
        if grow {
            u8::from(offsets.iter().any(hit))
        } else {
            u8::from(offsets.iter().all(hit))
        }
    })
}

pub fn close(mask: &Array2<u8>, radius: usize) -> Array2<u8> {
    morph(&morph(mask, radius, true), radius, false)
}

/// Fill background regions not connected to the frame border.
pub fn fill_holes(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut outside = Array2::<bool>::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && mask[[r, c]] == 0 {
                outside[[r, c]] = true;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                continue;
            }
            let (rr, cc) = (rr as usize, cc as usize);
            if !outside[[rr, cc]] && mask[[rr, cc]] == 0 {
                outside[[rr, cc]] = true;
                queue.push_back((rr, cc));
            }
        }
    }
    outside.mapv(|o| u8::from(!o))
}

/// Keep only the largest 8-connected foreground component.
pub fn largest_component(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut label = Array2::<u32>::zeros((h, w));
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if mask[[r0, c0]] == 0 || label[[r0, c0]] != 0 {
                continue;
            }
            next += 1;
            label[[r0, c0]] = next;
            queue.push_back((r0, c0));
            let mut size = 0usize;
            while let Some((r, c)) = queue.pop_front() {
                size += 1;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if mask[[rr, cc]] == 1 && label[[rr, cc]] == 0 {
                            label[[rr, cc]] = next;
                            queue.push_back((rr, cc));
                        }
                    }
                }
            }
            if size > best.1 {
                best = (next, size);
            }
        }
    }
    label.mapv(|l| u8::from(l != 0 && l == best.0))
}

/// Binary FoV mask for an RGB fundus image.
pub fn generate_fov_mask(fundus: &Array3<u8>, params: &FovParams) -> Result<Array2<u8>> {
    let cut = params.threshold * 255.0;
    let raw = luminance(fundus).mapv(|v| u8::from(v > cut));
    if raw.iter().all(|&v| v == 0) {
        return Err(Error::Data("no field of view found: image is entirely dark".into()));
    }
    let closed = close(&raw, params.closing_radius);
    Ok(largest_component(&fill_holes(&closed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_phantom(h: usize, w: usize, radius: f64, value: u8) -> Array3<u8> {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        Array3::from_shape_fn((h, w, 3), |(r, c, _)| {
            let d = ((r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2)).sqrt();
            if d <= radius {
                value
            } else {
                0
            }
        })
    }

    #[test]
    fn bright_disc_is_recovered_within_two_pixels() {
        let (h, w, radius) = (260, 280, 100.0);
        let mask = generate_fov_mask(&disc_phantom(h, w, radius, 180), &FovParams::default()).unwrap();
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        for r in 0..h {
            for c in 0..w {
                let d = ((r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2)).sqrt();
                if d < radius - 2.0 {
                    assert_eq!(mask[[r, c]], 1, "inside pixel ({r},{c}) lost");
                } else if d > radius + 2.0 {
                    assert_eq!(mask[[r, c]], 0, "outside pixel ({r},{c}) kept");
                }
            }
        }
    }

    #[test]
    fn dark_vessels_and_speckle_are_absorbed() {
        let (h, w) = (120, 120);
        let mut img = disc_phantom(h, w, 50.0, 150);
        // A dark vessel-like line inside the disc and a bright speck outside it.
        for c in 40..80 {
            for ch in 0..3 {
                img[[60, c, ch]] = 5;
            }
        }
        for ch in 0..3 {
            img[[3, 3, ch]] = 255;
        }
        let mask = generate_fov_mask(&img, &FovParams::default()).unwrap();
        assert_eq!(mask[[60, 60]], 1);
        assert_eq!(mask[[3, 3]], 0);
    }

    #[test]
    fn white_frame_is_full_mask() {
        let img = Array3::from_elem((40, 50, 3), 255u8);
        let mask = generate_fov_mask(&img, &FovParams::default()).unwrap();
        assert!(mask.iter().all(|&v| v == 1));
    }

    #[test]
    fn black_frame_errors() {
        let img = Array3::zeros((40, 50, 3));
        assert!(generate_fov_mask(&img, &FovParams::default()).is_err());
    }

    #[test]
    fn hole_filling() {
        let mut m = Array2::zeros((7, 7));
        for r in 1..6 {
            for c in 1..6 {
                m[[r, c]] = 1;
            }
        }
        m[[3, 3]] = 0;
        assert_eq!(fill_holes(&m)[[3, 3]], 1);
        assert_eq!(fill_holes(&m)[[0, 0]], 0);
    }
}
