//! Patch arithmetic for the three datasets, then a cut-and-stitch round trip
//! on a phantom whose size leaves an uncovered margin.
//!
//! cargo run --example patch_pipeline

use vesselgan::data::{
    extract_patches, patches_per_image, stitch_predictions, vessel_phantom, DatasetId, PATCH_SIZE, TRAIN_STRIDE,
};

fn main() -> vesselgan::Result<()> {
    for ds in DatasetId::ALL {
        let (h, w) = ds.image_dims();
        let per = patches_per_image(h, w, PATCH_SIZE, TRAIN_STRIDE)?;
        println!(
            "{:9} {h}x{w}: {per} patches per image, {} training images, {} in total",
            ds.name(),
            ds.train_images(),
            per * ds.train_images()
        );
    }

    let record = vessel_phantom(300, 4)?;
    let (set, grid) = extract_patches(&record, PATCH_SIZE, TRAIN_STRIDE)?;
    let preds: Vec<_> = set.patches.iter().map(|p| p.vessel_gt.mapv(f32::from)).collect();
    let stitched = stitch_predictions(&preds, &grid)?;
    let (ch, cw) = grid.covered_extent();
    let exact = (0..ch).all(|r| (0..cw).all(|c| stitched.map[[r, c]] == f32::from(record.vessel_gt[[r, c]])));
    println!(
        "phantom 300x300: {} patches, covered {ch}x{cw}, uncovered margin {}, identity stitch exact: {exact}",
        grid.len(),
        stitched.has_uncovered_margin()
    );
    Ok(())
}
