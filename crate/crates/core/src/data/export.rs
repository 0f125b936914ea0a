use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ScanCorpus, ScanPair, ShapeDataset, ShapeSplit};
use crate::diff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Start, in values, inside the data file.
    pub offset: usize,
}

/// JSON side of a dataset; the values live in `data_file` as little-endian
/// `f64`s, one array after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub kind: String,
    pub data_file: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn save_dataset(
    dir: &Path,
    stem: &str,
    kind: &str,
    meta: serde_json::Value,
    arrays: &[(&str, &Tensor)],
) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(dir)?;
    let data_file = format!("{stem}.bin");
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: (*name).into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: 1,
        kind: kind.into(),
        data_file: data_file.clone(),
        meta,
        arrays: entries,
    };
    fs::write(dir.join(&data_file), bytes)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path, stem: &str) -> Result<(Manifest, Vec<(String, Tensor)>), DatasetError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(&manifest.data_file))?;
    if bytes.len() % 8 != 0 {
        return Err(DatasetError::Malformed("data file length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| DatasetError::Malformed(format!("array {} runs past the data", e.name)))?;
        let t = Tensor::new(e.shape.clone(), slice.to_vec()).map_err(|err| DatasetError::Malformed(err.to_string()))?;
        arrays.push((e.name.clone(), t));
    }
    Ok((manifest, arrays))
}

fn find<'a>(arrays: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor, DatasetError> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| DatasetError::Malformed(format!("missing array {name}")))
}

fn as_indices(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

impl ShapeDataset {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Manifest, DatasetError> {
        let n = self.len();
        let labels = Tensor::vector(self.labels.iter().map(|&l| l as f64).collect());
        let rotations = Tensor::vector(self.rotations.iter().map(|&r| r as f64).collect());
        save_dataset(
            dir,
            stem,
            "shapes",
            serde_json::json!({ "split": self.split, "n": n }),
            &[("images", &self.images), ("labels", &labels), ("rotations", &rotations)],
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, DatasetError> {
        let (m, arrays) = load_dataset(dir, stem)?;
        if m.kind != "shapes" {
            return Err(DatasetError::Malformed(format!("expected a shapes dataset, got {}", m.kind)));
        }
        let split: ShapeSplit = serde_json::from_value(m.meta["split"].clone())?;
        Ok(Self {
            split,
            images: find(&arrays, "images")?.clone(),
            labels: as_indices(find(&arrays, "labels")?),
            rotations: as_indices(find(&arrays, "rotations")?),
        })
    }
}

/// Token sequences padded with −1 into `[N, max_len]`.
fn pack(seqs: &[&[usize]]) -> Tensor {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut data = vec![-1.0; seqs.len() * width];
    for (r, s) in seqs.iter().enumerate() {
        for (c, &t) in s.iter().enumerate() {
            data[r * width + c] = t as f64;
        }
    }
    Tensor::new(vec![seqs.len(), width], data).expect("packed shape")
}

fn unpack(t: &Tensor) -> Vec<Vec<usize>> {
    let width = t.shape().get(1).copied().unwrap_or(0);
    if width == 0 {
        return vec![Vec::new(); t.shape()[0]];
    }
    t.data()
        .chunks(width)
        .map(|row| row.iter().take_while(|&&v| v >= 0.0).map(|&v| v as usize).collect())
        .collect()
}

impl ScanCorpus {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Manifest, DatasetError> {
        let parts = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        let packed: Vec<(String, Tensor)> = parts
            .iter()
            .flat_map(|(name, pairs)| {
                let ins: Vec<&[usize]> = pairs.iter().map(|p| p.input.as_slice()).collect();
                let outs: Vec<&[usize]> = pairs.iter().map(|p| p.output.as_slice()).collect();
                [(format!("{name}.inputs"), pack(&ins)), (format!("{name}.outputs"), pack(&outs))]
            })
            .collect();
        let refs: Vec<(&str, &Tensor)> = packed.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_dataset(dir, stem, "scan", serde_json::json!({ "split": self.split }), &refs)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, DatasetError> {
        let (m, arrays) = load_dataset(dir, stem)?;
        if m.kind != "scan" {
            return Err(DatasetError::Malformed(format!("expected a scan corpus, got {}", m.kind)));
        }
        let pairs = |name: &str| -> Result<Vec<ScanPair>, DatasetError> {
            let ins = unpack(find(&arrays, &format!("{name}.inputs"))?);
            let outs = unpack(find(&arrays, &format!("{name}.outputs"))?);
            Ok(ins.into_iter().zip(outs).map(|(input, output)| ScanPair { input, output }).collect())
        };
        Ok(Self {
            split: serde_json::from_value(m.meta["split"].clone())?,
            train: pairs("train")?,
            val: pairs("val")?,
            test: pairs("test")?,
        })
    }
}
