//! Overlapping patch extraction and averaging-based stitching.

use candle_core::{Device, Tensor};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::dataset::ImageRecord;
use crate::error::{Error, Result};

pub const PATCH_SIZE: usize = 128;
pub const TRAIN_STRIDE: usize = 32;
pub const TEST_STRIDE: usize = 3;

/// `v / 127.5 - 1`, mapping 0..=255 onto [-1, 1].
pub fn normalize(v: u8) -> f32 {
    f32::from(v) / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounding to the nearest level.
pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary mask value (0/1) in the same [-1, 1] range as images.
pub fn mask_level(v: u8) -> f32 {
    if v > 0 {
        1.0
    } else {
        -1.0
    }
}

/// Row-major origins of every patch that fits inside an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Config("patch size and stride must be >= 1".into()));
        }
        if height < patch_size || width < patch_size {
            return Err(Error::Data(format!(
                "image {height}x{width} is smaller than the {patch_size}x{patch_size} patch"
            )));
        }
        let rows = Self::steps(height, patch_size, stride);
        let cols = Self::steps(width, patch_size, stride);
        let origins = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i * stride, j * stride)))
            .collect();
        Ok(Self {
            patch_size,
            stride,
            height,
            width,
            origins,
        })
    }

    /// Patches along one axis: `floor((dim - patch) / stride) + 1`.
    pub fn steps(dim: usize, patch_size: usize, stride: usize) -> usize {
        (dim - patch_size) / stride + 1
    }

    /// (rows, cols) of the grid.
    pub fn shape(&self) -> (usize, usize) {
        (
            Self::steps(self.height, self.patch_size, self.stride),
            Self::steps(self.width, self.patch_size, self.stride),
        )
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Rows and columns reached by at least one patch, from the top-left.
    pub fn covered_extent(&self) -> (usize, usize) {
        let (rows, cols) = self.shape();
        (
            (rows - 1) * self.stride + self.patch_size,
            (cols - 1) * self.stride + self.patch_size,
        )
    }
}

/// Number of patches per image of the given size.
pub fn patches_per_image(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<usize> {
    Ok(PatchGrid::new(height, width, patch_size, stride)?.len())
}

/// One patch cut congruently from all three arrays of a record.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub fundus: Array3<u8>,
    pub vessel_gt: Array2<u8>,
    pub fov_mask: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub image_id: String,
    pub patches: Vec<Patch>,
}

pub fn cut_patch(record: &ImageRecord, origin: (usize, usize), size: usize) -> Patch {
    let (r, c) = origin;
    Patch {
        origin,
        fundus: record.fundus.slice(s![r..r + size, c..c + size, ..]).to_owned(),
        vessel_gt: record.vessel_gt.slice(s![r..r + size, c..c + size]).to_owned(),
        fov_mask: record.fov_mask.slice(s![r..r + size, c..c + size]).to_owned(),
    }
}

pub fn extract_patches(record: &ImageRecord, patch_size: usize, stride: usize) -> Result<(PatchSet, PatchGrid)> {
    let grid = PatchGrid::new(record.height(), record.width(), patch_size, stride)?;
    let patches = grid
        .origins
        .iter()
        .map(|&o| cut_patch(record, o, patch_size))
        .collect();
    Ok((
        PatchSet {
            image_id: record.image_id.clone(),
            patches,
        },
        grid,
    ))
}

/// Full-resolution map assembled from patch predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedMap {
    pub map: Array2<f32>,
    /// Rows `covered_rows..height` and columns `covered_cols..width` were not
    /// reached by any patch and hold copies of the last covered row/column.
    pub covered_rows: usize,
    pub covered_cols: usize,
}

impl StitchedMap {
    pub fn is_covered(&self, row: usize, col: usize) -> bool {
        row < self.covered_rows && col < self.covered_cols
    }

    pub fn has_uncovered_margin(&self) -> bool {
        let (h, w) = self.map.dim();
        self.covered_rows < h || self.covered_cols < w
    }
}

/// Average overlapping patch predictions back into one map.
pub fn stitch_predictions(preds: &[Array2<f32>], grid: &PatchGrid) -> Result<StitchedMap> {
    if preds.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} predictions for a grid of {} patches",
            preds.len(),
            grid.len()
        )));
    }
    let p = grid.patch_size;
    let mut sum = Array2::<f64>::zeros((grid.height, grid.width));
    let mut count = Array2::<u32>::zeros((grid.height, grid.width));
    for (pred, &(r, c)) in preds.iter().zip(&grid.origins) {
        if pred.dim() != (p, p) {
            return Err(Error::Shape(format!(
                "patch prediction {:?} is not {p}x{p}",
                pred.dim()
            )));
        }
        let mut s = sum.slice_mut(s![r..r + p, c..c + p]);
        s.zip_mut_with(pred, |acc, &v| *acc += f64::from(v));
        count.slice_mut(s![r..r + p, c..c + p]).mapv_inplace(|n| n + 1);
    }
    let (rows, cols) = grid.covered_extent();
    let mut map = Array2::<f32>::zeros((grid.height, grid.width));
    for r in 0..grid.height {
        for c in 0..grid.width {
            let (sr, sc) = (r.min(rows - 1), c.min(cols - 1));
            if count[[sr, sc]] == 0 {
                return Err(Error::Config(format!(
                    "stride {} leaves pixel ({sr}, {sc}) between {p}x{p} patches",
                    grid.stride
                )));
            }
            map[[r, c]] = (sum[[sr, sc]] / f64::from(count[[sr, sc]])) as f32;
        }
    }
    Ok(StitchedMap {
        map,
        covered_rows: rows,
        covered_cols: cols,
    })
}

/// Batch of RGB arrays (H, W, 3) as a normalized (B, 3, H, W) f32 tensor.
pub fn images_to_tensor(images: &[&Array3<u8>], device: &Device) -> Result<Tensor> {
    let (h, w, _) = images
        .first()
        .ok_or_else(|| Error::Data("empty image batch".into()))?
        .dim();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape("images in a batch must share dims".into()));
        }
        for ch in 0..3 {
            data.extend(img.slice(s![.., .., ch]).iter().map(|&v| normalize(v)));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// Batch of binary masks (H, W) as a (B, 1, H, W) tensor with values in {-1, 1}.
pub fn masks_to_tensor(masks: &[&Array2<u8>], device: &Device) -> Result<Tensor> {
    let (h, w) = masks
        .first()
        .ok_or_else(|| Error::Data("empty mask batch".into()))?
        .dim();
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dim() != (h, w) {
            return Err(Error::Shape("masks in a batch must share dims".into()));
        }
        data.extend(m.iter().map(|&v| mask_level(v)));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?)
}

/// Split a (B, 1, H, W) tensor into B arrays.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected one channel, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(h * w)
        .take(b)
        .map(|chunk| Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetId;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        assert!(normalize(127).abs() < 0.004);
        assert!(normalize(128).abs() < 0.004);
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
    }

    #[test]
    fn grid_origins_are_row_major_and_fit() {
        let g = PatchGrid::new(300, 260, 128, 32).unwrap();
        assert_eq!(g.shape(), (6, 5));
        assert_eq!(g.origins[0], (0, 0));
        assert_eq!(g.origins[1], (0, 32));
        assert_eq!(g.origins[5], (32, 0));
        assert!(g.origins.iter().all(|&(r, c)| r + 128 <= 300 && c + 128 <= 260));
        assert!(PatchGrid::new(100, 300, 128, 32).is_err());
    }

    #[test]
    fn exact_patch_size_gives_single_patch() {
        for stride in [1, 3, 32, 500] {
            let g = PatchGrid::new(128, 128, 128, stride).unwrap();
            assert_eq!(g.origins, vec![(0, 0)]);
        }
    }

    #[test]
    fn extraction_is_congruent() {
        let fundus = Array3::from_shape_fn((140, 150, 3), |(r, c, ch)| ((r * 7 + c * 3 + ch) % 251) as u8);
        let gt = Array2::from_shape_fn((140, 150), |(r, c)| ((r + c) % 2) as u8);
        let fov = Array2::from_shape_fn((140, 150), |(r, _)| u8::from(r > 5));
        let rec = ImageRecord::new(fundus, gt, fov, DatasetId::Drive, "x").unwrap();
        let (set, grid) = extract_patches(&rec, 128, 11).unwrap();
        assert_eq!(set.patches.len(), grid.len());
        let p = &set.patches[3];
        let (r, c) = p.origin;
        assert_eq!(p.fundus[[5, 9, 2]], rec.fundus[[r + 5, c + 9, 2]]);
        assert_eq!(p.vessel_gt[[100, 1]], rec.vessel_gt[[r + 100, c + 1]]);
        assert_eq!(p.fov_mask[[0, 0]], rec.fov_mask[[r, c]]);
    }

    #[test]
    fn stitching_means_and_mirror_fill() {
        let grid = PatchGrid::new(130, 129, 128, 2).unwrap();
        assert_eq!(grid.shape(), (2, 1));
        let preds = vec![Array2::from_elem((128, 128), 0.2f32), Array2::from_elem((128, 128), 0.8f32)];
        let out = stitch_predictions(&preds, &grid).unwrap();
        assert!((out.map[[50, 50]] - 0.5).abs() < 1e-6);
        assert!((out.map[[0, 0]] - 0.2).abs() < 1e-6);
        assert!((out.map[[129, 0]] - 0.8).abs() < 1e-6);
        // Column 128 is beyond the last patch: copied from column 127.
        assert_eq!(out.covered_cols, 128);
        assert!(out.has_uncovered_margin());
        assert!(!out.is_covered(0, 128));
        assert_eq!(out.map[[50, 128]], out.map[[50, 127]]);
    }

    #[test]
    fn stitching_rejects_count_mismatch() {
        let grid = PatchGrid::new(130, 130, 128, 1).unwrap();
        assert!(stitch_predictions(&[Array2::zeros((128, 128))], &grid).is_err());
    }

    #[test]
    fn stitching_rejects_gaps_between_patches() {
        let grid = PatchGrid::new(10, 10, 4, 6).unwrap();
        let preds = vec![Array2::zeros((4, 4)); grid.len()];
        assert!(matches!(stitch_predictions(&preds, &grid), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_conversions() {
        let img = Array3::from_shape_fn((2, 3, 3), |(r, c, ch)| (r * 100 + c * 10 + ch) as u8);
        let t = images_to_tensor(&[&img], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        // channel 1, row 1, col 2 -> value 121
        assert_eq!(v[6 + 3 + 2], normalize(121));
        let m = Array2::from_shape_vec((1, 2), vec![0u8, 1]).unwrap();
        let t = masks_to_tensor(&[&m], &Device::Cpu).unwrap();
        assert_eq!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![-1.0, 1.0]);
        let back = tensor_to_maps(&t).unwrap();
        assert_eq!(back[0][[0, 1]], 1.0);
    }
}
