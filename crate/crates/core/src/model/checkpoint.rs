//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `LEVTCKPT`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then every tensor as raw
//! little-endian `f32` values at the offsets the manifest records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use levt_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArTeacher, LevT, ModelConfig};
use crate::error::{io_err, Error, Result};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"LEVTCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Name of the embedding tensor that doubles as the token head.
const TIED_EMBEDDING: &str = "embed.token";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Levt,
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    pub metrics: Vec<MetricPoint>,
    /// Output projections stored as another tensor, e.g. `token_head -> embed.token`.
    pub tied: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

/// Training metadata carried alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub metrics: Vec<MetricPoint>,
}

fn encode(
    kind: ModelKind,
    config: &ModelConfig,
    vocab: &Vocab,
    params: &ParamStore<f32>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (_, name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        config: config.clone(),
        vocab: vocab.surfaces().to_vec(),
        step: meta.step,
        metrics: meta.metrics.clone(),
        tied: BTreeMap::from([("token_head".to_owned(), TIED_EMBEDDING.to_owned())]),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in params.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn incompatible(detail: impl Into<String>) -> Error {
    Error::Incompatible(detail.into())
}

fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(incompatible("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| incompatible("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| incompatible(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(incompatible(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let raw = &bytes[16 + len..];
    if !raw.len().is_multiple_of(4) {
        return Err(incompatible("data section is not a whole number of f32 values"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((manifest, data))
}

/// Copies stored tensors into a freshly built store, checking that names,
/// order and shapes agree with what the configuration produces.
fn fill_store(manifest: &Manifest, data: &[f32], store: &mut ParamStore<f32>) -> Result<()> {
    if manifest.tied.get("token_head").map(String::as_str) != Some(TIED_EMBEDDING) {
        return Err(incompatible("token head is not tied to the embedding"));
    }
    if manifest.tensors.iter().any(|t| t.name == "token_head") {
        return Err(incompatible("token head stored separately from the embedding"));
    }
    if manifest.tensors.len() != store.len() {
        return Err(incompatible(format!(
            "{} stored tensors, configuration expects {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (entry, id) in manifest.tensors.iter().zip(ids) {
        if store.name(id) != entry.name || store.get(id).shape() != entry.shape.as_slice() {
            return Err(incompatible(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                store.name(id),
                store.get(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let values = data
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| incompatible(format!("tensor {} runs past the data section", entry.name)))?;
        *store.get_mut(id) = Tensor::new(entry.shape.clone(), values.to_vec())?.with_requires_grad(true);
    }
    Ok(())
}

fn read(path: &Path) -> Result<(Manifest, Vec<f32>)> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read(path)?.0)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn check_kind(manifest: &Manifest, kind: ModelKind) -> Result<Vocab> {
    if manifest.kind != kind {
        return Err(incompatible(format!(
            "checkpoint holds a {:?} model, expected {kind:?}",
            manifest.kind
        )));
    }
    manifest
        .config
        .validate()
        .map_err(|e| incompatible(e.to_string()))?;
    Vocab::from_surfaces(manifest.vocab.clone()).map_err(|e| incompatible(e.to_string()))
}

impl LevT {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        write(
            path,
            &encode(ModelKind::Levt, self.config(), &self.vocab, &self.params, meta)?,
        )
    }

    pub fn load(path: &Path) -> Result<(Self, Manifest)> {
        let (manifest, data) = read(path)?;
        let vocab = check_kind(&manifest, ModelKind::Levt)?;
        let mut model = Self::new(&manifest.config, vocab, 0).map_err(|e| incompatible(e.to_string()))?;
        fill_store(&manifest, &data, &mut model.params)?;
        Ok((model, manifest))
    }
}

impl ArTeacher {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        write(
            path,
            &encode(
                ModelKind::Autoregressive,
                &self.net.config,
                &self.vocab,
                &self.params,
                meta,
            )?,
        )
    }

    pub fn load(path: &Path) -> Result<(Self, Manifest)> {
        let (manifest, data) = read(path)?;
        let vocab = check_kind(&manifest, ModelKind::Autoregressive)?;
        let mut model = Self::new(&manifest.config, vocab, 0).map_err(|e| incompatible(e.to_string()))?;
        fill_store(&manifest, &data, &mut model.params)?;
        Ok((model, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_hidden: 16,
            n_heads: 2,
            n_layers: 1,
            n_max: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_parameters_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let vocab = Vocab::build(["x y z"], 1).unwrap();
        let model = LevT::new(&tiny_config(), vocab, 7).unwrap();
        let meta = CheckpointMeta {
            step: 12,
            metrics: vec![MetricPoint {
                step: 12,
                values: BTreeMap::from([("exact_match".into(), 0.5)]),
            }],
        };
        model.save(&path, &meta).unwrap();
        let (loaded, manifest) = LevT::load(&path).unwrap();
        assert_eq!(manifest.step, 12);
        assert_eq!(manifest.metrics, meta.metrics);
        assert_eq!(loaded.vocab, model.vocab);
        for ((_, n1, a), (_, n2, b)) in model.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn kind_and_shape_mismatches_are_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let vocab = Vocab::build(["x y z"], 1).unwrap();
        ArTeacher::new(&tiny_config(), vocab.clone(), 1)
            .unwrap()
            .save(&path, &CheckpointMeta::default())
            .unwrap();
        assert!(matches!(LevT::load(&path), Err(Error::Incompatible(_))));

        let model = LevT::new(&tiny_config(), vocab, 1).unwrap();
        let bytes = encode(
            ModelKind::Levt,
            model.config(),
            &model.vocab,
            &model.params,
            &CheckpointMeta::default(),
        )
        .unwrap();
        let (mut manifest, data) = decode(&bytes).unwrap();
        manifest.tensors[0].shape[0] += 1;
        let mut store = model.params.clone();
        assert!(matches!(
            fill_store(&manifest, &data, &mut store),
            Err(Error::Incompatible(_))
        ));
        manifest.tensors[0].shape[0] -= 1;
        manifest.tied.clear();
        assert!(matches!(
            fill_store(&manifest, &data, &mut store),
            Err(Error::Incompatible(_))
        ));

        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(LevT::load(&path), Err(Error::Incompatible(_))));
    }
}
