//! Checkpoint files holding every parameter set plus the training config.
//!
//! Layout: an 8-byte magic tag, a little-endian u64 manifest length, a JSON
//! manifest (config and per-matrix shapes in name order), then one blob of
//! little-endian f64 values.  Floats travel as raw bits, so a save/load
//! cycle reproduces parameters exactly.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

const MAGIC: &[u8; 8] = b"DRCKPT01";

/// Parameter namespaces a complete checkpoint carries.
pub const SECTIONS: [&str; 4] = ["gat", "denoiser", "masked_encoder", "decoder"];

#[derive(Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    matrices: Vec<MatrixEntry>,
}

/// A training configuration bundled with all learned parameters.
pub struct ParameterArchive {
    pub config: TrainConfig,
    pub params: ParamSet,
}

impl ParameterArchive {
    pub fn new(config: TrainConfig, params: ParamSet) -> Self {
        ParameterArchive { config, params }
    }

    /// Error unless every named section prefix has at least one parameter.
    pub fn require_sections(&self, names: &[&str]) -> Result<()> {
        for &section in names {
            if self.params.names_under(section).next().is_none() {
                return Err(Error::CorruptArchive(format!(
                    "archive has no `{section}` section"
                )));
            }
        }
        Ok(())
    }

    /// Deterministic byte image of one section: names, shapes and raw
    /// little-endian values in name order.  Two sections with identical
    /// bytes hold identical parameters.
    pub fn section_bytes(&self, section: &str) -> Vec<u8> {
        let mut names: Vec<&str> = self.params.names_under(section).collect();
        names.sort_unstable();
        let mut out = Vec::new();
        for name in names {
            let value = self.params.get(name);
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for &v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Serialize to bytes; see the module doc for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut names: Vec<&str> = (0..self.params.len())
            .map(|i| self.params.name(i))
            .collect();
        names.sort_unstable();
        let manifest = Manifest {
            config: self.config.clone(),
            matrices: names
                .iter()
                .map(|&name| {
                    let v = self.params.get(name);
                    MatrixEntry {
                        name: name.to_string(),
                        rows: v.nrows(),
                        cols: v.ncols(),
                    }
                })
                .collect(),
        };
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(manifest_json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for name in names {
            for &v in self.params.get(name).iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::CorruptArchive(msg.to_string());
        if bytes.len() < MAGIC.len() + 8 {
            return Err(fail("file too short for header"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("bad magic tag"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let manifest_start = MAGIC.len() + 8;
        let blob_start = manifest_start
            .checked_add(manifest_len)
            .ok_or_else(|| fail("manifest length overflows"))?;
        if bytes.len() < blob_start {
            return Err(fail("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..blob_start])
            .map_err(|e| Error::CorruptArchive(format!("manifest: {e}")))?;
        manifest
            .config
            .validate()
            .map_err(|e| Error::CorruptArchive(format!("config: {e}")))?;

        let mut params = ParamSet::new();
        let mut cursor = blob_start;
        for entry in &manifest.matrices {
            let count = entry
                .rows
                .checked_mul(entry.cols)
                .ok_or_else(|| fail("matrix shape overflows"))?;
            let end = cursor
                .checked_add(count * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| fail("truncated value blob"))?;
            let mut values = Vec::with_capacity(count);
            for chunk in bytes[cursor..end].chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(chunk);
                values.push(f64::from_le_bytes(b));
            }
            let matrix = Array2::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| Error::CorruptArchive(format!("matrix {}: {e}", entry.name)))?;
            if params.contains(&entry.name) {
                return Err(Error::CorruptArchive(format!(
                    "duplicate matrix {}",
                    entry.name
                )));
            }
            params.insert(&entry.name, matrix);
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(fail("trailing bytes after value blob"));
        }
        Ok(ParameterArchive {
            config: manifest.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
