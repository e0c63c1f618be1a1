//! Single-file patch container: magic, version, JSON index header, raw bytes.
//!
//! Layout: `MAGIC` (8 bytes) | version u32 LE | header length u64 LE |
//! header JSON | payload. Each patch occupies `p*p*3 + p*p + p*p` payload
//! bytes in the order fundus (HWC), vessel_gt, fov_mask.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetId, ImageRecord};
use super::patches::{extract_patches, Patch, PatchSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VGPATCH\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    image_id: String,
    origins: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    dataset: DatasetId,
    patch_size: usize,
    stride: usize,
    images: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCache {
    pub dataset: DatasetId,
    pub patch_size: usize,
    pub stride: usize,
    pub sets: Vec<PatchSet>,
}

impl PatchCache {
    pub fn build(dataset: DatasetId, records: &[ImageRecord], patch_size: usize, stride: usize) -> Result<Self> {
        let mut sets = Vec::with_capacity(records.len());
        for r in records {
            if r.dataset_id != dataset {
                return Err(Error::Data(format!(
                    "record {} belongs to {}, not {dataset}",
                    r.image_id, r.dataset_id
                )));
            }
            sets.push(extract_patches(r, patch_size, stride)?.0);
        }
        Ok(Self {
            dataset,
            patch_size,
            stride,
            sets,
        })
    }

    pub fn total_patches(&self) -> usize {
        self.sets.iter().map(|s| s.patches.len()).sum()
    }

    pub fn image_ids(&self) -> Vec<&str> {
        self.sets.iter().map(|s| s.image_id.as_str()).collect()
    }

    /// Patches of the listed images, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Patch>> {
        let mut out = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            match self.sets.iter().find(|s| &s.image_id == id) {
                Some(s) => out.extend(&s.patches),
                None => missing.push(id.as_str()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("image ids not in cache: {}", missing.join(", "))));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = self.patch_size;
        let header = Header {
            dataset: self.dataset,
            patch_size: p,
            stride: self.stride,
            images: self
                .sets
                .iter()
                .map(|s| IndexEntry {
                    image_id: s.image_id.clone(),
                    origins: s.patches.iter().map(|q| q.origin).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.total_patches() * 5 * p * p);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for patch in self.sets.iter().flat_map(|s| &s.patches) {
            if patch.fundus.dim() != (p, p, 3) || patch.vessel_gt.dim() != (p, p) || patch.fov_mask.dim() != (p, p) {
                return Err(Error::Shape(format!("cached patch is not {p}x{p}")));
            }
            out.extend(patch.fundus.iter());
            out.extend(patch.vessel_gt.iter());
            out.extend(patch.fov_mask.iter());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("corrupt patch cache: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let p = header.patch_size;
        let per = 5 * p * p;
        let payload = &body[hlen..];
        let n: usize = header.images.iter().map(|e| e.origins.len()).sum();
        if payload.len() != n * per {
            return Err(bad(&format!("payload holds {} bytes, index needs {}", payload.len(), n * per)));
        }
        let mut chunks = payload.chunks_exact(per);
        let sets = header
            .images
            .into_iter()
            .map(|e| PatchSet {
                patches: e
                    .origins
                    .iter()
                    .map(|&origin| {
                        let c = chunks.next().expect("length checked");
                        let (f, rest) = c.split_at(3 * p * p);
                        let (g, m) = rest.split_at(p * p);
                        Patch {
                            origin,
                            fundus: Array3::from_shape_vec((p, p, 3), f.to_vec()).expect("size"),
                            vessel_gt: Array2::from_shape_vec((p, p), g.to_vec()).expect("size"),
                            fov_mask: Array2::from_shape_vec((p, p), m.to_vec()).expect("size"),
                        }
                    })
                    .collect(),
                image_id: e.image_id,
            })
            .collect();
        Ok(Self {
            dataset: header.dataset,
            patch_size: p,
            stride: header.stride,
            sets,
        })
    }

    /// Write through a temporary file so a crash never leaves a torn cache.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// 64-bit FNV-1a digest, used to report whether a re-run changed a file.
pub fn content_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, h: usize, w: usize) -> ImageRecord {
        let fundus = Array3::from_shape_fn((h, w, 3), |(r, c, ch)| ((r * 31 + c * 17 + ch * 5) % 256) as u8);
        let gt = Array2::from_shape_fn((h, w), |(r, c)| u8::from((r + 2 * c) % 7 == 0));
        let fov = Array2::from_shape_fn((h, w), |(r, c)| u8::from(r + c > 4));
        ImageRecord::new(fundus, gt, fov, DatasetId::Stare, id).unwrap()
    }

    #[test]
    fn bit_exact_reload() {
        let recs = [record("a", 40, 50), record("b", 36, 36)];
        let cache = PatchCache::build(DatasetId::Stare, &recs, 32, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        cache.save(&path).unwrap();
        let back = PatchCache::load(&path).unwrap();
        assert_eq!(back, cache);
        let first = fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(content_hash(&fs::read(&path).unwrap()), content_hash(&first));
    }

    #[test]
    fn corruption_detected() {
        let cache = PatchCache::build(DatasetId::Stare, &[record("a", 34, 34)], 32, 1).unwrap();
        let mut bytes = cache.to_bytes().unwrap();
        bytes.pop();
        assert!(PatchCache::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(PatchCache::from_bytes(&bytes).is_err());
    }

    #[test]
    fn select_reports_missing_ids() {
        let cache = PatchCache::build(DatasetId::Stare, &[record("a", 34, 34)], 32, 1).unwrap();
        assert_eq!(cache.select(&["a".into()]).unwrap().len(), 9);
        assert!(cache.select(&["zz".into()]).is_err());
    }
}
