//! Blob + manifest persistence for parameter bundles and task snapshots.
//!
//! A bundle at stem `path` is two files:
//!
//! * `path.json`: the manifest, with format tag, element layout, free-form
//!   metadata, and one entry per array (`name`, `dims`, element `offset`,
//!   element `len`);
//! * `path.bin`: every array's entries as little-endian `f64`, concatenated
//!   in manifest order. Within an array, entries follow the tensor storage
//!   order (first index fastest), declared as `"layout": "column-major"`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionLayer, LayerParams};
use crate::tensor::DenseTensor;

pub const FORMAT: &str = "polyfuse-bundle";
pub const FORMAT_VERSION: u32 = 1;
pub const LAYOUT: &str = "column-major";
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub layout: String,
    pub dtype: String,
    pub kind: String,
    pub meta: Value,
    pub fields: Vec<FieldEntry>,
}

/// Named arrays plus metadata, the in-memory form of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: Value,
    pub fields: Vec<(String, DenseTensor)>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Bundle {
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut fields = Vec::with_capacity(self.fields.len());
        let mut offset = 0;
        for (name, t) in &self.fields {
            fields.push(FieldEntry {
                name: name.clone(),
                dims: t.dims().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            layout: LAYOUT.into(),
            dtype: DTYPE.into(),
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            fields,
        };
        (manifest, blob)
    }

    pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Bundle> {
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        if manifest.layout != LAYOUT || manifest.dtype != DTYPE {
            return Err(Error::Bundle(format!(
                "unsupported layout/dtype {}/{}",
                manifest.layout, manifest.dtype
            )));
        }
        if !blob.len().is_multiple_of(8) {
            return Err(Error::Bundle("blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut fields = Vec::with_capacity(manifest.fields.len());
        for entry in &manifest.fields {
            let end = entry
                .offset
                .checked_add(entry.len)
                .filter(|&e| e <= values.len())
                .ok_or_else(|| Error::Bundle(format!("field {} overruns the blob", entry.name)))?;
            let t = DenseTensor::from_dims(&entry.dims, values[entry.offset..end].to_vec())?;
            fields.push((entry.name.clone(), t));
        }
        Ok(Bundle {
            kind: manifest.kind.clone(),
            meta: manifest.meta.clone(),
            fields,
        })
    }

    /// Writes `stem.json` and `stem.bin`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let (manifest, blob) = self.encode();
        fs::write(with_suffix(stem, ".json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(with_suffix(stem, ".bin"), blob)?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Bundle> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(with_suffix(stem, ".json"))?)?;
        let blob = fs::read(with_suffix(stem, ".bin"))?;
        Self::decode(&manifest, &blob)
    }

    pub fn take(&mut self, name: &str) -> Result<DenseTensor> {
        let idx = self
            .fields
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Bundle(format!("missing field {name}")))?;
        Ok(self.fields.remove(idx).1)
    }
}

/// Arrays of `layer` under `prefix`, with its config and storage form in
/// `meta`.
pub fn layer_fields(layer: &FusionLayer, prefix: &str) -> Vec<(String, DenseTensor)> {
    layer
        .arrays()
        .into_iter()
        .map(|(name, t)| (format!("{prefix}{name}"), t.clone()))
        .collect()
}

pub fn layer_meta(layer: &FusionLayer) -> Value {
    let form = match layer.params() {
        LayerParams::Joint(_) => "joint",
        _ => "split",
    };
    serde_json::json!({ "config": layer.config(), "form": form })
}

pub fn layer_to_bundle(layer: &FusionLayer) -> Bundle {
    Bundle {
        kind: "layer".into(),
        meta: layer_meta(layer),
        fields: layer_fields(layer, ""),
    }
}

/// Rebuilds a layer from `meta` and the fields named `prefix + array`.
pub fn layer_from_parts(meta: &Value, fields: &mut Vec<(String, DenseTensor)>, prefix: &str) -> Result<FusionLayer> {
    let config: FusionConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| Error::Bundle("manifest meta lacks config".into()))?,
    )?;
    let mut arrays = Vec::new();
    let mut rest = Vec::new();
    for (name, t) in fields.drain(..) {
        match name.strip_prefix(prefix) {
            Some(short) if !short.contains('/') => arrays.push((short.to_string(), t)),
            _ => rest.push((name, t)),
        }
    }
    *fields = rest;
    FusionLayer::from_named_arrays(config, arrays)
}

pub fn layer_from_bundle(bundle: &Bundle) -> Result<FusionLayer> {
    if bundle.kind != "layer" {
        return Err(Error::Bundle(format!("expected a layer bundle, got {}", bundle.kind)));
    }
    let mut fields = bundle.fields.clone();
    layer_from_parts(&bundle.meta, &mut fields, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for variant in Variant::ALL {
            let config = FusionConfig::with_uniform_rank(variant, 4, 3, 2, 1, 2).unwrap();
            let layer = FusionLayer::random(config, 0.5, &mut rng).unwrap();
            let stem = dir.path().join(variant.name());
            layer_to_bundle(&layer).write(&stem).unwrap();
            let back = layer_from_bundle(&Bundle::read(&stem).unwrap()).unwrap();
            assert_eq!(back, layer, "{variant}");
        }
    }

    #[test]
    fn joint_form_roundtrip() {
        let w = DenseTensor::from_dims(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let config = FusionConfig::new(Variant::Dense, 2, 2, 1, 0, crate::Rank::None).unwrap();
        let layer = FusionLayer::new(config, LayerParams::Joint(w)).unwrap();
        let (manifest, blob) = layer_to_bundle(&layer).encode();
        assert_eq!(manifest.meta["form"], "joint");
        let back = layer_from_bundle(&Bundle::decode(&manifest, &blob).unwrap()).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn manifest_layout() {
        let m = DenseTensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let bundle = Bundle {
            kind: "test".into(),
            meta: Value::Null,
            fields: vec![("x".into(), DenseTensor::vector(&[9.0]).unwrap()), ("m".into(), m)],
        };
        let (manifest, blob) = bundle.encode();
        assert_eq!(manifest.fields[1].offset, 1);
        assert_eq!(manifest.fields[1].dims, vec![2, 2]);
        let floats: Vec<f64> = blob.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(floats, vec![9.0, 1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn decode_rejects_corruption() {
        let bundle = Bundle {
            kind: "test".into(),
            meta: Value::Null,
            fields: vec![("x".into(), DenseTensor::vector(&[1.0, 2.0]).unwrap())],
        };
        let (mut manifest, blob) = bundle.encode();
        assert!(Bundle::decode(&manifest, &blob[..12]).is_err());
        assert!(Bundle::decode(&manifest, &blob[..8]).is_err());
        manifest.layout = "row-major".into();
        assert!(Bundle::decode(&manifest, &blob).is_err());

        let config = FusionConfig::with_uniform_rank(Variant::Cp, 2, 2, 2, 0, 1).unwrap();
        let mut layer_bundle = layer_to_bundle(&FusionLayer::zeros(config).unwrap());
        layer_bundle.fields.pop();
        assert!(layer_from_bundle(&layer_bundle).is_err());
    }
}
