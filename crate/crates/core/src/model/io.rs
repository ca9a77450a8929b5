//! Binary model files and a JSON mirror for debugging.
//!
//! Layout: magic `FHMM`, format version (u32), then `M`, `K`, `V` (u32), then
//! the initial, transition and observation logits as little-endian f64 in
//! row-major order. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::FhmmParams;
use crate::error::{FhmmError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"FHMM";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4;

impl FhmmParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.initial_logits.len() + self.transition_logits.len() + self.observation_logits.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * n);
        out.extend_from_slice(MODEL_MAGIC);
        for x in [
            MODEL_FORMAT_VERSION,
            self.layers() as u32,
            self.states() as u32,
            self.vocab_size() as u32,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in self
            .initial_logits
            .iter()
            .chain(self.transition_logits.iter())
            .chain(self.observation_logits.iter())
        {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(FhmmError::CorruptModel("truncated header".into()));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(FhmmError::CorruptModel("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != MODEL_FORMAT_VERSION {
            return Err(FhmmError::VersionMismatch {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let (m, k, v) = (word(1) as usize, word(2) as usize, word(3) as usize);
        if m == 0 || k == 0 || v == 0 {
            return Err(FhmmError::InvalidDimensions(format!("M={m}, K={k}, V={v}")));
        }
        let n_init = m * k;
        let n_trans = m * k * k;
        let n_obs = v * m * k;
        let expected = HEADER_LEN as u128 + 8 * (n_init + n_trans + n_obs) as u128;
        let actual = bytes.len() as u128;
        if actual < expected {
            return Err(FhmmError::CorruptModel(format!(
                "truncated: {actual} bytes, header requires {expected}"
            )));
        }
        if actual > expected {
            return Err(FhmmError::ShapeMismatch(format!(
                "{} trailing bytes after tensors for M={m}, K={k}, V={v}",
                actual - expected
            )));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f64>>();
        let init = Array2::from_shape_vec((m, k), take(n_init)).unwrap();
        let trans = Array3::from_shape_vec((m, k, k), take(n_trans)).unwrap();
        let obs = Array3::from_shape_vec((v, m, k), take(n_obs)).unwrap();
        FhmmParams::from_parts(init, trans, obs).map_err(|e| FhmmError::CorruptModel(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_json(&self) -> ParamsJson {
        ParamsJson {
            format_version: MODEL_FORMAT_VERSION,
            layers: self.layers(),
            states: self.states(),
            vocab_size: self.vocab_size(),
            initial_logits: self.initial_logits.iter().copied().collect(),
            transition_logits: self.transition_logits.iter().copied().collect(),
            observation_logits: self.observation_logits.iter().copied().collect(),
        }
    }
}

/// Field-for-field JSON mirror of the binary model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub format_version: u32,
    pub layers: usize,
    pub states: usize,
    pub vocab_size: usize,
    pub initial_logits: Vec<f64>,
    pub transition_logits: Vec<f64>,
    pub observation_logits: Vec<f64>,
}

impl TryFrom<ParamsJson> for FhmmParams {
    type Error = FhmmError;

    fn try_from(j: ParamsJson) -> Result<Self> {
        if j.format_version != MODEL_FORMAT_VERSION {
            return Err(FhmmError::VersionMismatch {
                found: j.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let (m, k, v) = (j.layers, j.states, j.vocab_size);
        let shape_err = |e: ndarray::ShapeError| FhmmError::ShapeMismatch(e.to_string());
        FhmmParams::from_parts(
            Array2::from_shape_vec((m, k), j.initial_logits).map_err(shape_err)?,
            Array3::from_shape_vec((m, k, k), j.transition_logits).map_err(shape_err)?,
            Array3::from_shape_vec((v, m, k), j.observation_logits).map_err(shape_err)?,
        )
    }
}
