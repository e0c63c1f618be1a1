//! Sliding-window inference over full fundus images.
//!
//! Patches are cut on a regular grid, run through the generator cascade with
//! stored batch-norm statistics, and the fine-scale outputs are averaged back
//! into one map per image.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Luma};
use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;

use crate::checkpoint::{read_network_checked, restore_store, NetworkKind};
use crate::data::{images_to_tensor, stitch_predictions, tensor_to_maps, ImageRecord, PatchGrid, TEST_STRIDE};
use crate::error::{Error, Result};
use crate::eval::confidence_from_output;
use crate::generators::GeneratorPair;
use crate::nn::Pass;
use crate::training::NetworkSpecs;

pub const RAW_MAP_TENSOR: &str = "confidence";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferOptions {
    pub stride: usize,
    /// Patches per forward pass.
    pub batch_size: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            stride: TEST_STRIDE,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub image_id: String,
    /// Vessel confidence in `[0, 1]`, same size as the input image.
    pub confidence: Array2<f32>,
    pub patches: usize,
    pub seconds: f64,
}

/// Build both generators from the `g_coarse`/`g_fine` files of a checkpoint
/// directory, refusing files written for other specs.
pub fn load_generators(dir: &Path, specs: &NetworkSpecs, device: &Device) -> Result<GeneratorPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pair = GeneratorPair::new(specs.g_coarse, specs.g_fine, DType::F32, device, &mut rng)?;
    let coarse_path = dir.join(NetworkKind::CoarseGenerator.file_name());
    let file = read_network_checked(&coarse_path, NetworkKind::CoarseGenerator, &specs.g_coarse, device)?;
    restore_store(&coarse_path, pair.coarse.params(), &file)?;
    let fine_path = dir.join(NetworkKind::FineGenerator.file_name());
    let file = read_network_checked(&fine_path, NetworkKind::FineGenerator, &specs.g_fine, device)?;
    restore_store(&fine_path, pair.fine.params(), &file)?;
    Ok(pair)
}

/// Predict one image by averaging overlapping patch outputs.
pub fn predict_image(
    generators: &GeneratorPair,
    record: &ImageRecord,
    opts: &InferOptions,
    device: &Device,
) -> Result<Prediction> {
    if opts.stride == 0 || opts.batch_size == 0 {
        return Err(Error::Config("inference stride and batch size must be >= 1".into()));
    }
    let start = Instant::now();
    let p = generators.fine.spec().input_size;
    if opts.stride > p {
        return Err(Error::Config(format!(
            "inference stride {} exceeds the patch size {p} and would leave gaps",
            opts.stride
        )));
    }
    let grid = PatchGrid::new(record.height(), record.width(), p, opts.stride)?;
    let mut outputs = Vec::with_capacity(grid.len());
    for chunk in grid.origins.chunks(opts.batch_size) {
        let cut: Vec<Array3<u8>> = chunk
            .iter()
            .map(|&(r, c)| record.fundus.slice(s![r..r + p, c..c + p, ..]).to_owned())
            .collect();
        let refs: Vec<&Array3<u8>> = cut.iter().collect();
        let x = images_to_tensor(&refs, device)?;
        let out = generators.forward_cascade(&x, Pass::EVAL)?;
        outputs.extend(tensor_to_maps(&out.fine.seg_map)?);
    }
    let stitched = stitch_predictions(&outputs, &grid)?;
    Ok(Prediction {
        image_id: record.image_id.clone(),
        confidence: confidence_from_output(&stitched.map),
        patches: grid.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Confidence scaled to the full 16-bit range.
pub fn write_confidence_png(path: &Path, conf: &Array2<f32>) -> Result<()> {
    let (h, w) = conf.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(conf[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Float map as a single-tensor safetensors file.
pub fn write_raw_map(path: &Path, image_id: &str, conf: &Array2<f32>) -> Result<()> {
    let t = Tensor::from_slice(
        conf.as_slice().ok_or_else(|| Error::Shape("confidence map is not contiguous".into()))?,
        conf.dim(),
        &Device::Cpu,
    )?;
    let meta = HashMap::from([("image_id".to_string(), image_id.to_string())]);
    safetensors::serialize_to_file([(RAW_MAP_TENSOR, t)], Some(meta), path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Read a map written by [`write_raw_map`], returning its image id too.
pub fn read_raw_map(path: &Path) -> Result<(String, Array2<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let id = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("image_id").cloned())
        .ok_or_else(|| bad("missing image_id".into()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let t = tensors
        .get(RAW_MAP_TENSOR)
        .ok_or_else(|| bad(format!("missing `{RAW_MAP_TENSOR}` tensor")))?;
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let map = Array2::from_shape_vec((h, w), v).map_err(|e| bad(e.to_string()))?;
    Ok((id, map))
}
