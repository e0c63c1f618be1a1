//! Synthetic fundus-like patches with known vessel maps.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DatasetId, ImageRecord};
use crate::error::Result;

/// A square phantom: a few sinusoidal vessels of width 1 to 3 px drawn dark on
/// a reddish, radially shaded background with mild noise. The whole frame is
/// field of view.
pub fn vessel_phantom(size: usize, seed: u64) -> Result<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt = Array2::<u8>::zeros((size, size));
    let n = 5;
    let s = size as f64;
    for k in 0..n {
        let horizontal = k % 2 == 0;
        let base = rng.random_range(0.15..0.85) * s;
        let amp = rng.random_range(0.03..0.12) * s;
        let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / s;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let half_width = [0.5, 1.0, 1.5][k % 3];
        for i in 0..size {
            let centre = base + amp * (freq * i as f64 + phase).sin();
            for j in 0..size {
                if (j as f64 + 0.5 - centre).abs() <= half_width {
                    let (r, c) = if horizontal { (j, i) } else { (i, j) };
                    gt[[r, c]] = 1;
                }
            }
        }
    }
    let fundus = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
        let dy = r as f64 / s - 0.5;
        let dx = c as f64 / s - 0.5;
        let shade = 1.0 - 0.6 * (dx * dx + dy * dy);
        let (bg, fg) = [(190.0, 110.0), (95.0, 40.0), (45.0, 25.0)][ch];
        let v = if gt[[r, c]] == 1 { fg } else { bg };
        let noise = ((r * 73 + c * 151 + ch * 29) % 17) as f64 - 8.0;
        (v * shade + noise).clamp(0.0, 255.0) as u8
    });
    let fov = Array2::from_elem((size, size), 1u8);
    ImageRecord::new(fundus, gt, fov, DatasetId::Drive, format!("phantom-{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_sparse() {
        let a = vessel_phantom(128, 1).unwrap();
        assert_eq!(a, vessel_phantom(128, 1).unwrap());
        let frac = a.vessel_gt.iter().filter(|&&v| v == 1).count() as f64 / (128.0 * 128.0);
        assert!(frac > 0.03 && frac < 0.25, "vessel fraction {frac}");
        // Vessels are darker than background in the green channel on average.
        let mean = |want: u8| {
            let v: Vec<f64> = a
                .vessel_gt
                .indexed_iter()
                .filter(|(_, &g)| g == want)
                .map(|((r, c), _)| f64::from(a.fundus[[r, c, 1]]))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) + 30.0 < mean(0));
    }
}
