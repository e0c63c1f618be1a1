//! Hand-rasterized figures: ROC curves and segmentation overlays.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use super::{binarize, RocCurve};
use crate::data::ImageRecord;
use crate::error::{Error, Result};

const ROC_SIDE: u32 = 512;
const MARGIN: u32 = 40;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const CHANCE: Rgb<u8> = Rgb([160, 160, 160]);
const CURVE: Rgb<u8> = Rgb([200, 30, 30]);
const MISSED: Rgb<u8> = Rgb([40, 110, 255]);

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>, dashed: bool) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err, mut n) = (x0, y0, dx + dy, 0u32);
    loop {
        let on = !dashed || (n / 6) % 2 == 0;
        if on && x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
        n += 1;
    }
}

/// ROC curve on unit axes with a 0.1 grid and the chance diagonal.
pub fn render_roc(curve: &RocCurve) -> RgbImage {
    let mut img = RgbImage::from_pixel(ROC_SIDE, ROC_SIDE, WHITE);
    let span = (ROC_SIDE - 2 * MARGIN) as f64;
    let at = |fpr: f64, tpr: f64| {
        (
            MARGIN as i64 + (fpr.clamp(0.0, 1.0) * span).round() as i64,
            (ROC_SIDE - MARGIN) as i64 - (tpr.clamp(0.0, 1.0) * span).round() as i64,
        )
    };
    for i in 1..10 {
        let v = f64::from(i) / 10.0;
        line(&mut img, at(v, 0.0), at(v, 1.0), GRID, false);
        line(&mut img, at(0.0, v), at(1.0, v), GRID, false);
    }
    line(&mut img, at(0.0, 0.0), at(1.0, 1.0), CHANCE, true);
    let frame = [at(0.0, 0.0), at(1.0, 0.0), at(1.0, 1.0), at(0.0, 1.0), at(0.0, 0.0)];
    for w in frame.windows(2) {
        line(&mut img, w[0], w[1], BLACK, false);
    }
    let mut prev = None;
    for p in &curve.points {
        let q = at(p.fpr, p.tpr);
        if let Some(pq) = prev {
            if pq != q {
                line(&mut img, pq, q, CURVE, false);
                line(&mut img, (pq.0, pq.1 - 1), (q.0, q.1 - 1), CURVE, false);
            }
        }
        prev = Some(q);
    }
    img
}

/// Three panels side by side: fundus, ground truth, thresholded prediction.
/// In the prediction panel hits are white, false alarms red and misses blue;
/// pixels outside the field of view are dimmed.
pub fn render_overlay(record: &ImageRecord, conf: &Array2<f32>, threshold: f64) -> Result<RgbImage> {
    let (h, w) = (record.height(), record.width());
    if conf.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "{}: confidence map {:?} for a {h}x{w} image",
            record.image_id,
            conf.dim()
        )));
    }
    let pred = binarize(conf, threshold)?;
    let mut img = RgbImage::new(3 * w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let f = &record.fundus;
            let (x, y) = (c as u32, r as u32);
            img.put_pixel(x, y, Rgb([f[[r, c, 0]], f[[r, c, 1]], f[[r, c, 2]]]));
            let g = record.vessel_gt[[r, c]] != 0;
            img.put_pixel(x + w as u32, y, if g { WHITE } else { BLACK });
            let p = pred[[r, c]] != 0;
            let mut px = match (p, g) {
                (true, true) => WHITE,
                (true, false) => CURVE,
                (false, true) => MISSED,
                (false, false) => BLACK,
            };
            if record.fov_mask[[r, c]] == 0 {
                px = Rgb(px.0.map(|v| v / 3));
            }
            img.put_pixel(x + 2 * w as u32, y, px);
        }
    }
    Ok(img)
}

pub fn write_overlay(path: &Path, record: &ImageRecord, conf: &Array2<f32>, threshold: f64) -> Result<()> {
    render_overlay(record, conf, threshold)?
        .save(path)
        .map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_curve_hugs_top_left() {
        let c = RocCurve::from_samples(vec![(0.9, true), (0.1, false)]).unwrap();
        let img = render_roc(&c);
        // the curve reaches tpr = 1 at fpr = 0 (top-left corner)
        assert_eq!(*img.get_pixel(MARGIN + 1, MARGIN), CURVE);
    }

    #[test]
    fn overlay_panels() {
        let rec = crate::data::vessel_phantom(32, 3).unwrap();
        let conf = rec.vessel_gt.mapv(f32::from);
        let img = render_overlay(&rec, &conf, 0.5).unwrap();
        assert_eq!(img.dimensions(), (96, 32));
        // a perfect prediction has no false alarms or misses
        for y in 0..32 {
            for x in 64..96 {
                assert!(*img.get_pixel(x, y) != MISSED && *img.get_pixel(x, y) != CURVE);
            }
        }
        assert!(render_overlay(&rec, &Array2::zeros((4, 4)), 0.5).is_err());
    }
}
