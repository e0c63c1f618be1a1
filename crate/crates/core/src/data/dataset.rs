use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GenericImageView};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::fov::{generate_fov_mask, FovParams};
use crate::error::{Error, Result};

/// Annotation and mask pixels above this value count as foreground.
pub const BINARIZE_THRESHOLD: u8 = 127;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "DRIVE", alias = "drive")]
    Drive,
    #[serde(rename = "CHASE_DB1", alias = "chase_db1", alias = "CHASE-DB1")]
    ChaseDb1,
    #[serde(rename = "STARE", alias = "stare")]
    Stare,
}

impl DatasetId {
    pub const ALL: [DatasetId; 3] = [DatasetId::Drive, DatasetId::ChaseDb1, DatasetId::Stare];

    /// Published (width, height) of every image in the dataset.
    pub fn image_dims(self) -> (usize, usize) {
        match self {
            DatasetId::Drive => (565, 584),
            DatasetId::ChaseDb1 => (999, 960),
            DatasetId::Stare => (700, 605),
        }
    }

    pub fn train_images(self) -> usize {
        match self {
            DatasetId::Drive | DatasetId::ChaseDb1 => 20,
            DatasetId::Stare => 16,
        }
    }

    pub fn test_images(self) -> usize {
        match self {
            DatasetId::Drive => 20,
            DatasetId::ChaseDb1 => 8,
            DatasetId::Stare => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Drive => "DRIVE",
            DatasetId::ChaseDb1 => "CHASE_DB1",
            DatasetId::Stare => "STARE",
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "DRIVE" => Ok(DatasetId::Drive),
            "CHASE_DB1" | "CHASEDB1" | "CHASE" => Ok(DatasetId::ChaseDb1),
            "STARE" => Ok(DatasetId::Stare),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// A fundus photograph with its vessel annotation and field-of-view mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// (height, width, 3) RGB.
    pub fundus: Array3<u8>,
    /// (height, width), values in {0, 1}.
    pub vessel_gt: Array2<u8>,
    /// (height, width), values in {0, 1}.
    pub fov_mask: Array2<u8>,
    pub dataset_id: DatasetId,
    pub image_id: String,
}

impl ImageRecord {
    pub fn new(
        fundus: Array3<u8>,
        vessel_gt: Array2<u8>,
        fov_mask: Array2<u8>,
        dataset_id: DatasetId,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let (h, w, c) = fundus.dim();
        if c != 3 {
            return Err(Error::Data(format!("{image_id}: fundus must have 3 channels, got {c}")));
        }
        if vessel_gt.dim() != (h, w) || fov_mask.dim() != (h, w) {
            return Err(Error::Data(format!(
                "{image_id}: fundus {h}x{w}, vessel map {:?} and FoV mask {:?} disagree",
                vessel_gt.dim(),
                fov_mask.dim()
            )));
        }
        if vessel_gt.iter().chain(fov_mask.iter()).any(|&v| v > 1) {
            return Err(Error::Data(format!("{image_id}: masks must be binary (0/1)")));
        }
        Ok(Self {
            fundus,
            vessel_gt,
            fov_mask,
            dataset_id,
            image_id,
        })
    }

    pub fn height(&self) -> usize {
        self.fundus.dim().0
    }

    pub fn width(&self) -> usize {
        self.fundus.dim().1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub(crate) fn read_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

pub fn to_rgb_array(img: &DynamicImage) -> Array3<u8> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw()).expect("rgb buffer size")
}

/// Grayscale conversion followed by `> BINARIZE_THRESHOLD`.
pub fn to_binary_array(img: &DynamicImage) -> Array2<u8> {
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| u8::from(v > BINARIZE_THRESHOLD))
        .collect();
    Array2::from_shape_vec((h as usize, w as usize), data).expect("gray buffer size")
}

fn list_files(dir: &Path, extensions: &[&str]) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    out.sort();
    out
}

fn first_existing(candidates: impl IntoIterator<Item = PathBuf>) -> Option<PathBuf> {
    candidates.into_iter().find(|p| p.is_file())
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Where one image's files live on disk.
struct Layout {
    image: PathBuf,
    image_id: String,
    annotation: Option<PathBuf>,
    fov: Option<PathBuf>,
}

fn drive_layout(root: &Path) -> Vec<Layout> {
    list_files(&root.join("images"), &["tif", "tiff", "png"])
        .into_iter()
        .map(|image| {
            let image_id = stem(&image);
            let number = image_id.split('_').next().unwrap_or_default();
            let id = image_id.as_str();
            let annotation = first_existing(
                ["1st_manual", "manual"]
                    .iter()
                    .flat_map(|d| {
                        ["gif", "png", "tif"]
                            .iter()
                            .map(move |ext| root.join(d).join(format!("{number}_manual1.{ext}")))
                    })
                    .collect::<Vec<_>>(),
            );
            let fov = first_existing(
                ["mask", "masks"]
                    .iter()
                    .flat_map(|d| {
                        ["gif", "png", "tif"]
                            .iter()
                            .map(move |ext| root.join(d).join(format!("{id}_mask.{ext}")))
                    })
                    .collect::<Vec<_>>(),
            );
            Layout {
                image,
                image_id,
                annotation,
                fov,
            }
        })
        .collect()
}

fn chase_layout(root: &Path) -> Vec<Layout> {
    let dirs = [root.to_path_buf(), root.join("images")];
    dirs.iter()
        .flat_map(|d| list_files(d, &["jpg", "jpeg"]))
        .map(|image| {
            let image_id = stem(&image);
            let dir = image.parent().unwrap_or(root).to_path_buf();
            let id = image_id.as_str();
            let annotation = first_existing(
                ["1stHO", "2ndHO"]
                    .iter()
                    .flat_map(|tag| {
                        [dir.clone(), root.to_path_buf(), root.join("manual")]
                            .into_iter()
                            .map(move |d| d.join(format!("{id}_{tag}.png")))
                    })
                    .collect::<Vec<_>>(),
            );
            Layout {
                image,
                image_id,
                annotation,
                fov: None,
            }
        })
        .collect()
}

fn stare_layout(root: &Path) -> Vec<Layout> {
    let dirs = [root.join("stare-images"), root.join("images"), root.to_path_buf()];
    dirs.iter()
        .flat_map(|d| list_files(d, &["ppm"]))
        .filter(|p| !stem(p).contains('.'))
        .map(|image| {
            let image_id = stem(&image);
            let annotation = first_existing([
                root.join("labels-ah").join(format!("{image_id}.ah.ppm")),
                root.join("labels-vk").join(format!("{image_id}.vk.ppm")),
                root.join(format!("{image_id}.ah.ppm")),
                root.join(format!("{image_id}.vk.ppm")),
            ]);
            Layout {
                image,
                image_id,
                annotation,
                fov: None,
            }
        })
        .collect()
}

/// Load every record under `root` laid out as the dataset is published.
///
/// * DRIVE: `images/NN_*.tif`, `1st_manual/NN_manual1.gif`, `mask/<id>_mask.gif`
/// * CHASE_DB1: `Image_NNx.jpg` with `Image_NNx_1stHO.png` (fallback `_2ndHO`)
/// * STARE: `stare-images/imNNNN.ppm` with `labels-ah/imNNNN.ah.ppm` (fallback `labels-vk`)
///
/// Datasets without official masks get a generated FoV mask.
pub fn load_dataset(root: &Path, dataset_id: DatasetId) -> Result<Vec<ImageRecord>> {
    if !root.is_dir() {
        return Err(Error::MissingFiles(format!("dataset root {} does not exist", root.display())));
    }
    let layout = match dataset_id {
        DatasetId::Drive => drive_layout(root),
        DatasetId::ChaseDb1 => chase_layout(root),
        DatasetId::Stare => stare_layout(root),
    };
    if layout.is_empty() {
        return Err(Error::MissingFiles(format!(
            "no {dataset_id} images found under {}",
            root.display()
        )));
    }
    let (ew, eh) = dataset_id.image_dims();
    let mut records = BTreeMap::new();
    for item in layout {
        let img = read_image(&item.image)?;
        let (w, h) = img.dimensions();
        if (w as usize, h as usize) != (ew, eh) {
            return Err(Error::Data(format!(
                "{}: {w}x{h} does not match {dataset_id}'s {ew}x{eh}",
                item.image.display()
            )));
        }
        let fundus = to_rgb_array(&img);
        let annotation = item.annotation.ok_or_else(|| {
            Error::MissingFiles(format!("no manual annotation for {}", item.image.display()))
        })?;
        let vessel_gt = to_binary_array(&read_image(&annotation)?);
        let fov_mask = match (dataset_id, item.fov) {
            (_, Some(p)) => to_binary_array(&read_image(&p)?),
            (DatasetId::Drive, None) => {
                return Err(Error::MissingFiles(format!(
                    "no FoV mask for {}",
                    item.image.display()
                )))
            }
            (_, None) => generate_fov_mask(&fundus, &FovParams::default())?,
        };
        let rec = ImageRecord::new(fundus, vessel_gt, fov_mask, dataset_id, item.image_id.clone())?;
        records.insert(item.image_id, rec);
    }
    Ok(records.into_values().collect())
}

/// Load the train or test images of a dataset.
///
/// DRIVE uses its official `training/` and `test/` directories. CHASE_DB1 and
/// STARE have no official split: images are sorted by id and the last
/// `test_images()` of them form the test set.
pub fn load_split(root: &Path, dataset_id: DatasetId, split: Split) -> Result<Vec<ImageRecord>> {
    match dataset_id {
        DatasetId::Drive => {
            let sub = match split {
                Split::Train => "training",
                Split::Test => "test",
            };
            let dir = root.join(sub);
            if dir.is_dir() {
                load_dataset(&dir, dataset_id)
            } else {
                load_dataset(root, dataset_id)
            }
        }
        _ => {
            let mut all = load_dataset(root, dataset_id)?;
            let n_test = dataset_id.test_images();
            if all.len() <= n_test {
                return Err(Error::Data(format!(
                    "{dataset_id} needs more than {n_test} images to hold out a test set, found {}",
                    all.len()
                )));
            }
            let test = all.split_off(all.len() - n_test);
            Ok(match split {
                Split::Train => all,
                Split::Test => test,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_invariants() {
        let f = Array3::<u8>::zeros((4, 5, 3));
        let ok = ImageRecord::new(f.clone(), Array2::zeros((4, 5)), Array2::ones((4, 5)), DatasetId::Drive, "a");
        assert!(ok.is_ok());
        assert!(ImageRecord::new(f.clone(), Array2::zeros((5, 4)), Array2::ones((4, 5)), DatasetId::Drive, "a").is_err());
        let mut bad = Array2::zeros((4, 5));
        bad[[0, 0]] = 255;
        assert!(ImageRecord::new(f, bad, Array2::ones((4, 5)), DatasetId::Drive, "a").is_err());
    }

    #[test]
    fn dataset_id_parsing() {
        assert_eq!("chase-db1".parse::<DatasetId>().unwrap(), DatasetId::ChaseDb1);
        assert_eq!("DRIVE".parse::<DatasetId>().unwrap(), DatasetId::Drive);
        assert!("foo".parse::<DatasetId>().is_err());
        let j = serde_json::to_string(&DatasetId::ChaseDb1).unwrap();
        assert_eq!(j, "\"CHASE_DB1\"");
    }

    #[test]
    fn missing_root_and_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(&dir.path().join("nope"), DatasetId::Drive),
            Err(Error::MissingFiles(_))
        ));
        assert!(matches!(load_dataset(dir.path(), DatasetId::Stare), Err(Error::MissingFiles(_))));
    }
}
