//! Versioned per-network checkpoint files.
//!
//! Each network is one safetensors file. Tensor names are the parameter
//! paths of its [`ParamStore`]; optimizer moments ride along under an
//! `adam.` prefix. The header metadata records the format tag, version,
//! network kind and the JSON spec the network was built from, so a loader can
//! refuse a file built for a different architecture before touching tensors.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "vesselgan-network";
pub const VERSION: u32 = 1;
pub const OPTIMIZER_PREFIX: &str = "adam.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    CoarseGenerator,
    FineGenerator,
    CoarseDiscriminator,
    FineDiscriminator,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 4] = [
        NetworkKind::CoarseGenerator,
        NetworkKind::FineGenerator,
        NetworkKind::CoarseDiscriminator,
        NetworkKind::FineDiscriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::CoarseGenerator => "g_coarse",
            NetworkKind::FineGenerator => "g_fine",
            NetworkKind::CoarseDiscriminator => "d_coarse",
            NetworkKind::FineDiscriminator => "d_fine",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.safetensors", self.name())
    }

    fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Header metadata of a network file.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkHeader {
    pub kind: NetworkKind,
    pub version: u32,
    /// The spec serialized as JSON.
    pub spec: serde_json::Value,
    /// Free-form extra entries (for example the optimizer step count).
    pub extra: BTreeMap<String, String>,
}

/// Contents of a network file split into model tensors and optimizer state.
#[derive(Clone, Debug)]
pub struct NetworkFile {
    pub header: NetworkHeader,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

pub fn save_network(
    path: &Path,
    kind: NetworkKind,
    spec: &impl Serialize,
    store: &ParamStore,
    optimizer: &[(String, Tensor)],
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    meta.insert("format".into(), FORMAT.into());
    meta.insert("version".into(), VERSION.to_string());
    meta.insert("kind".into(), kind.name().into());
    meta.insert("spec".into(), serde_json::to_string(spec)?);
    let mut entries = store.named_tensors();
    for (k, t) in optimizer {
        entries.push((format!("{OPTIMIZER_PREFIX}{k}"), t.clone()));
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(entries, Some(meta), &tmp)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(bytes: &[u8], path: &Path) -> Result<NetworkHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::checkpoint(path, format!("corrupt file: {e}")))?;
    let mut meta: BTreeMap<String, String> = meta
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let mut take = |key: &str| {
        meta.remove(key)
            .ok_or_else(|| Error::checkpoint(path, format!("missing metadata entry `{key}`")))
    };
    let format = take("format")?;
    if format != FORMAT {
        return Err(Error::checkpoint(path, format!("unknown format `{format}`")));
    }
    let version: u32 = take("version")?
        .parse()
        .map_err(|_| Error::checkpoint(path, "unparsable version"))?;
    if version != VERSION {
        return Err(Error::checkpoint(
            path,
            format!("version {version} is not supported (expected {VERSION})"),
        ));
    }
    let kind_s = take("kind")?;
    let kind = NetworkKind::from_name(&kind_s).ok_or_else(|| Error::checkpoint(path, format!("unknown network kind `{kind_s}`")))?;
    let spec = serde_json::from_str(&take("spec")?)?;
    Ok(NetworkHeader {
        kind,
        version,
        spec,
        extra: meta,
    })
}

pub fn read_network(path: &Path, device: &Device) -> Result<NetworkFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(&bytes, path)?;
    let all = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| Error::checkpoint(path, format!("corrupt tensor data: {e}")))?;
    let mut tensors = BTreeMap::new();
    let mut optimizer = BTreeMap::new();
    for (k, t) in all {
        match k.strip_prefix(OPTIMIZER_PREFIX) {
            Some(rest) => optimizer.insert(rest.to_string(), t),
            None => tensors.insert(k, t),
        };
    }
    Ok(NetworkFile {
        header,
        tensors,
        optimizer,
    })
}

/// Read a network file and check it was written for `kind` with exactly
/// `spec`.
pub fn read_network_checked(
    path: &Path,
    kind: NetworkKind,
    spec: &impl Serialize,
    device: &Device,
) -> Result<NetworkFile> {
    let file = read_network(path, device)?;
    if file.header.kind != kind {
        return Err(Error::checkpoint(
            path,
            format!("holds a {} network, expected {}", file.header.kind.name(), kind.name()),
        ));
    }
    let expected = serde_json::to_value(spec)?;
    if file.header.spec != expected {
        return Err(Error::checkpoint(
            path,
            format!("incompatible spec: file has {}, expected {expected}", file.header.spec),
        ));
    }
    Ok(file)
}

/// Copy file tensors into `store`, mapping shape disagreements to a
/// checkpoint error.
pub fn restore_store(path: &Path, store: &ParamStore, file: &NetworkFile) -> Result<()> {
    store.load_named(&file.tensors).map_err(|e| match e {
        Error::Shape(m) => Error::checkpoint(path, format!("spec/shape disagreement: {m}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[derive(Serialize)]
    struct Spec {
        width: usize,
    }

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut s, &mut rng);
        init.normal("w", &[2, 3], 1.0).unwrap();
        init.buffer("mean", &[3], 0.5).unwrap();
        s
    }

    #[test]
    fn round_trip_and_spec_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.safetensors");
        let a = store(1);
        let moments = vec![("m.w".to_string(), Tensor::ones((2, 3), DType::F32, &Device::Cpu).unwrap())];
        save_network(&path, NetworkKind::FineGenerator, &Spec { width: 4 }, &a, &moments, &BTreeMap::new()).unwrap();

        let b = store(2);
        let file = read_network_checked(&path, NetworkKind::FineGenerator, &Spec { width: 4 }, &Device::Cpu).unwrap();
        restore_store(&path, &b, &file).unwrap();
        let wa: Vec<f32> = a.params()["w"].flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b.params()["w"].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
        assert_eq!(file.optimizer.len(), 1);

        let spec_err = read_network_checked(&path, NetworkKind::FineGenerator, &Spec { width: 5 }, &Device::Cpu);
        assert!(matches!(spec_err, Err(Error::Checkpoint { .. })));
        let kind_err = read_network_checked(&path, NetworkKind::FineDiscriminator, &Spec { width: 4 }, &Device::Cpu);
        assert!(kind_err.is_err());
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(read_network(&path, &Device::Cpu), Err(Error::Checkpoint { .. })));
    }
}
