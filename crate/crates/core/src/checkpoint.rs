//! Versioned binary checkpoints: an 8-byte magic, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then every tensor as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objectives::TrainHyper;
use crate::train::Objective;
use crate::velocitynet::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"GLYPHFRG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    /// `init`, `stage1`, `stage2`, or `baseline-<objective>`.
    pub stage: String,
    #[serde(default)]
    pub objective: Option<Objective>,
    #[serde(default)]
    pub hyper: Option<TrainHyper>,
    /// SHA-256 of the stage-1 checkpoint file this one was trained from.
    #[serde(default)]
    pub parent_sha256: Option<String>,
    pub steps: usize,
    pub tensors: Vec<TensorInfo>,
}

/// Stage tag for a stage-2 run: R-GDPO checkpoints are `stage2`, everything else a baseline.
pub fn stage_tag(objective: Objective) -> String {
    match objective {
        Objective::Rgdpo => "stage2".into(),
        other => format!("baseline-{}", other.tag()),
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64, stage: impl Into<String>, steps: usize) -> Self {
        let tensors = params
            .layout()
            .named()
            .iter()
            .map(|(name, s)| TensorInfo {
                name: name.clone(),
                shape: [s.rows, s.cols],
            })
            .collect();
        let header = CheckpointHeader {
            config: params.config().clone(),
            seed,
            stage: stage.into(),
            objective: None,
            hyper: None,
            parent_sha256: None,
            steps,
            tensors,
        };
        Checkpoint { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.params.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body])?;
        header.config.validate()?;
        let expected = ModelParams::init(&header.config, 0)?;
        let layout: Vec<TensorInfo> = expected
            .layout()
            .named()
            .iter()
            .map(|(name, s)| TensorInfo {
                name: name.clone(),
                shape: [s.rows, s.cols],
            })
            .collect();
        if layout != header.tensors {
            return Err(Error::CheckpointMismatch(
                "tensor table does not match the model config".into(),
            ));
        }
        let data_bytes = &bytes[body..];
        if data_bytes.len() != 8 * expected.len() {
            return Err(bad(format!(
                "expected {} tensor bytes, found {}",
                8 * expected.len(),
                data_bytes.len()
            )));
        }
        let data: Vec<f64> = data_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let params = ModelParams::from_data(&header.config, data)?;
        if !params.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Writes to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
