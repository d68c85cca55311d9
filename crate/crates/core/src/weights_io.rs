//! On-disk weight container: a UTF-8 JSON manifest next to one raw blob of
//! little-endian `f32` tensors stored row-major.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "config": { "image_h": 224, ... },
//!   "labels": ["airplane", ...],
//!   "header_checksum": "5d0c7e1f22a9b4c8",
//!   "entries": [
//!     { "name": "block.0.attn.bk", "shape": [768], "byte_offset": 0,
//!       "byte_length": 3072, "checksum": "9c1e2f0a4b7d8e31" }
//!   ]
//! }
//! ```
//!
//! Entries are written sorted by name and packed back to back. A checksum is
//! the first 8 bytes of a SHA-256 digest, as 16 hex digits: per entry over its
//! bytes, and for the header over a canonical string of the format version,
//! config and labels (see [`WeightManifest::compute_header_checksum`]), so
//! edits that keep every tensor shape valid are still caught.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{parameter_specs, ViTConfig, ViTWeights};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub config: ViTConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub header_checksum: Checksum,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
    pub checksum: Checksum,
}

/// 64-bit content checksum, serialized as 16 lowercase hex digits so it
/// survives JSON parsers that read numbers as doubles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Checksum(pub u64);

impl Checksum {
    pub fn of(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Checksum(u64::from_be_bytes(head))
    }
}

impl Serialize for Checksum {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Checksum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() != 16 {
            return Err(serde::de::Error::custom(format!(
                "checksum must be 16 hex digits, got {s:?}"
            )));
        }
        u64::from_str_radix(&s, 16)
            .map(Checksum)
            .map_err(serde::de::Error::custom)
    }
}

impl WeightManifest {
    /// Checksum of the fields outside `entries`, over the canonical string
    /// `format_version|image_h|image_w|channels|patch|embed_dim|n_blocks|n_heads|mlp_hidden|n_classes|eps|labels`
    /// where `eps` is the 8 hex digits of the `f32` bit pattern and `labels` is
    /// `null` or the compact JSON array.
    pub fn compute_header_checksum(&self) -> Checksum {
        let c = &self.config;
        let labels = serde_json::to_string(&self.labels).expect("labels serialize");
        let canonical = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{:08x}|{}",
            self.format_version,
            c.image_h,
            c.image_w,
            c.channels,
            c.patch,
            c.embed_dim,
            c.n_blocks,
            c.n_heads,
            c.mlp_hidden,
            c.n_classes,
            c.layer_norm_eps.to_bits(),
            labels
        );
        Checksum::of(canonical.as_bytes())
    }

    /// Class names from the manifest, or CIFAR-10 names for a 10-way head,
    /// or `class_<i>` otherwise.
    pub fn class_labels(&self) -> Vec<String> {
        match &self.labels {
            Some(l) => l.clone(),
            None => default_labels(self.config.n_classes),
        }
    }
}

pub fn default_labels(n_classes: usize) -> Vec<String> {
    if n_classes == crate::CIFAR10_LABELS.len() {
        crate::CIFAR10_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_classes).map(|i| format!("class_{i}")).collect()
    }
}

/// Blob path conventionally paired with a manifest: same stem, `.bin`.
pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn read_manifest(path: &Path) -> Result<WeightManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `w` as a manifest plus blob. Output is byte-for-byte deterministic.
pub fn save_weights(w: &ViTWeights, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    save_weights_with_labels(w, None, manifest_path, blob_path)
}

pub fn save_weights_with_labels(
    w: &ViTWeights,
    labels: Option<&[String]>,
    manifest_path: &Path,
    blob_path: &Path,
) -> Result<()> {
    w.validate()?;
    if let Some(l) = labels {
        if l.len() != w.config.n_classes {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} classes",
                l.len(),
                w.config.n_classes
            )));
        }
    }
    let mut named = w.named_tensors();
    named.sort_by(|a, b| a.0.cmp(&b.0));

    let mut blob = Vec::with_capacity(named.iter().map(|(_, t)| t.numel() * 4).sum());
    let mut entries = Vec::with_capacity(named.len());
    for (name, t) in named {
        let start = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            byte_offset: start as u64,
            byte_length: (blob.len() - start) as u64,
            checksum: Checksum::of(&blob[start..]),
        });
    }
    let mut manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        config: w.config,
        labels: labels.map(<[String]>::to_vec),
        header_checksum: Checksum(0),
        entries,
    };
    manifest.header_checksum = manifest.compute_header_checksum();
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');

    fs::write(blob_path, &blob).map_err(|e| Error::io(blob_path, e))?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

/// Reads and fully validates a manifest + blob pair.
pub fn load_weights(manifest_path: &Path, blob_path: &Path) -> Result<ViTWeights> {
    let manifest = read_manifest(manifest_path)?;
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    weights_from_parts(&manifest, &blob)
}

/// Validates `manifest` against its config and `blob`, then decodes the tensors.
pub fn weights_from_parts(manifest: &WeightManifest, blob: &[u8]) -> Result<ViTWeights> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.compute_header_checksum() != manifest.header_checksum {
        return Err(Error::Manifest(
            "header checksum mismatch: format_version, config or labels were altered".into(),
        ));
    }
    let config = manifest.config;
    config.validate()?;
    if let Some(l) = &manifest.labels {
        if l.len() != config.n_classes {
            return Err(Error::Manifest(format!(
                "{} labels for {} classes",
                l.len(),
                config.n_classes
            )));
        }
    }

    let mut by_name = BTreeMap::new();
    for e in &manifest.entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Manifest(format!("duplicate entry `{}`", e.name)));
        }
    }

    let specs = parameter_specs(&config);
    for (name, shape) in &specs {
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::MissingParameter(name.clone()))?;
        if &e.shape != shape {
            return Err(Error::ParameterShape {
                name: name.clone(),
                expected: shape.clone(),
                got: e.shape.clone(),
            });
        }
    }
    if by_name.len() != specs.len() {
        let known: HashSet<&str> = specs.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = by_name.keys().find(|k| !known.contains(*k)) {
            return Err(Error::UnexpectedParameter(extra.to_string()));
        }
    }

    check_byte_ranges(&manifest.entries, blob.len() as u64)?;

    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        let bytes = &blob[e.byte_offset as usize..(e.byte_offset + e.byte_length) as usize];
        if Checksum::of(bytes) != e.checksum {
            return Err(Error::Checksum(e.name.clone()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    ViTWeights::from_named(config, tensors)
}

fn check_byte_ranges(entries: &[ManifestEntry], blob_len: u64) -> Result<()> {
    for e in entries {
        let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
        if e.byte_length != numel * 4 {
            return Err(Error::Manifest(format!(
                "entry `{}`: byte_length {} does not match shape {:?} ({} bytes)",
                e.name,
                e.byte_length,
                e.shape,
                numel * 4
            )));
        }
        let end = e.byte_offset.checked_add(e.byte_length);
        if end.is_none_or(|end| end > blob_len) {
            return Err(Error::Manifest(format!(
                "entry `{}`: bytes {}+{} exceed blob of {} bytes",
                e.name, e.byte_offset, e.byte_length, blob_len
            )));
        }
    }
    let mut ranges: Vec<&ManifestEntry> = entries.iter().collect();
    ranges.sort_by_key(|e| e.byte_offset);
    for pair in ranges.windows(2) {
        if pair[0].byte_offset + pair[0].byte_length > pair[1].byte_offset {
            return Err(Error::Manifest(format!(
                "entries `{}` and `{}` overlap",
                pair[0].name, pair[1].name
            )));
        }
    }
    Ok(())
}
