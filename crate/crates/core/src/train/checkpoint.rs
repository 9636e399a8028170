//! Binary checkpoint of trained parameters plus a JSON sidecar.
//!
//! Layout, little-endian: `b"GSAT"`, `u32` version, `u32` d, `u32` D,
//! `u32` j*, then `d + D` f64 for `v`, then `(d + D)^2` f64 for `W` in
//! row-major order. No trailing bytes.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::ModelParams;

pub const MAGIC: [u8; 4] = *b"GSAT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub j_star: usize,
    pub params: ModelParams,
}

/// Contents of the JSON file written next to the binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub d: usize,
    #[serde(rename = "D")]
    pub groups: usize,
    pub j_star: usize,
    /// Target direction of the pretraining task, when known.
    pub v_star: Option<Vec<f64>>,
    /// Echo of the configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ModelParams, j_star: usize) -> Result<Self> {
        if j_star == 0 || j_star > params.groups() {
            return Err(Error::InvalidArgument(format!(
                "j_star = {j_star} outside 1..={}",
                params.groups()
            )));
        }
        Ok(Self { j_star, params })
    }

    pub fn d(&self) -> usize {
        self.params.feature_dim()
    }

    pub fn groups(&self) -> usize {
        self.params.groups()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.params.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (m + m * m));
        out.extend_from_slice(&MAGIC);
        for field in [FORMAT_VERSION as usize, self.d(), self.groups(), self.j_star] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        for x in self.params.v().iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let w = self.params.w();
        for r in 0..m {
            for c in 0..m {
                out.extend_from_slice(&w[(r, c)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if found != MAGIC {
            return Err(CheckpointError::BadMagic { found });
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let (d, groups, j_star) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if groups == 0 {
            return Err(CheckpointError::InvalidHeader("D = 0".into()));
        }
        if j_star == 0 || j_star > groups {
            return Err(CheckpointError::InvalidHeader(format!("j_star = {j_star} outside 1..={groups}")));
        }
        let m = d + groups;
        let expected = m
            .checked_mul(m)
            .and_then(|mm| mm.checked_add(m))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| CheckpointError::InvalidHeader(format!("dimensions ({d}, {groups}) overflow")))?;
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated { expected, actual: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(CheckpointError::TrailingBytes { extra: bytes.len() - expected });
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let v = DVector::from_iterator(m, floats.by_ref().take(m));
        let w = DMatrix::from_row_iterator(m, m, floats);
        let params = ModelParams::from_parts(d, v, w)
            .map_err(|e| CheckpointError::InvalidHeader(e.to_string()))?;
        Ok(Self { j_star, params })
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN
    /// payloads.
    pub fn bit_identical(&self, other: &Checkpoint) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

/// `checkpoint.gsat` -> `checkpoint.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(CheckpointError::from)?;
    Ok(())
}

/// Write the binary file and its sidecar.
pub fn save_checkpoint_with_sidecar(
    checkpoint: &Checkpoint,
    path: &Path,
    v_star: Option<&DVector<f64>>,
    config: serde_json::Value,
) -> Result<()> {
    save_checkpoint(checkpoint, path)?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        d: checkpoint.d(),
        groups: checkpoint.groups(),
        j_star: checkpoint.j_star,
        v_star: v_star.map(|v| v.iter().copied().collect()),
        config,
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(CheckpointError::from)?;
    fs::write(sidecar_path(path), text + "\n").map_err(CheckpointError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => CheckpointError::NotFound(path.to_path_buf()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Sidecar for the checkpoint at `path`; `None` when absent.
pub fn load_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let side = sidecar_path(path);
    match fs::read_to_string(&side) {
        Ok(text) => Ok(Some(serde_json::from_str(&text).map_err(CheckpointError::from)?)),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CheckpointError::Io(e).into()),
    }
}
