//! Dataset ingestion, FoV masks, patching, stitching, folds and patch caches.

pub mod cache;
pub mod dataset;
pub mod folds;
pub mod fov;
pub mod patches;
pub mod phantom;

pub use cache::{content_hash, PatchCache};
pub use dataset::{load_dataset, load_split, DatasetId, ImageRecord, Split, BINARIZE_THRESHOLD};
pub use folds::{make_folds, FoldSplit, DEFAULT_FOLDS};
pub use fov::{generate_fov_mask, FovParams};
pub use patches::{
    denormalize, extract_patches, images_to_tensor, masks_to_tensor, normalize, patches_per_image, stitch_predictions,
    tensor_to_maps, Patch, PatchGrid, PatchSet, StitchedMap, PATCH_SIZE, TEST_STRIDE, TRAIN_STRIDE,
};
pub use phantom::vessel_phantom;
