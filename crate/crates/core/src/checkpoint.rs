//! Named-parameter checkpoint files.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8
//! JSON header, then every parameter's values as raw little-endian `f64`
//! in header name order. Names are stored sorted, matching
//! [`ParamVector::flatten`].

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::nets::ParamVector;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub byte_order: String,
    pub dtype: String,
    /// Producing stage, e.g. `stage1_md_moco`.
    pub created_by: String,
    pub config_hash: String,
}

impl CheckpointHeader {
    pub fn for_params(params: &ParamVector, created_by: &str, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            names: params.names().map(str::to_string).collect(),
            shapes: params.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            byte_order: "little".into(),
            dtype: "f64".into(),
            created_by: created_by.into(),
            config_hash: config_hash.into(),
        }
    }

    fn payload_len(&self) -> usize {
        8 * self.shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>()
    }

    fn validate(&self) -> Result<(), CheckpointError> {
        let bad = |field: &str, reason: String| CheckpointError::BadHeader {
            field: field.into(),
            reason,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(bad("format_version", format!("unsupported version {}", self.format_version)));
        }
        if self.byte_order != "little" {
            return Err(bad("byte_order", format!("expected `little`, got `{}`", self.byte_order)));
        }
        if self.dtype != "f64" {
            return Err(bad("dtype", format!("expected `f64`, got `{}`", self.dtype)));
        }
        let mismatch = |field: &str, detail: String| CheckpointError::ShapeMismatch {
            field: field.into(),
            detail,
        };
        if self.names.len() != self.shapes.len() {
            return Err(mismatch(
                "shapes",
                format!("{} names but {} shapes", self.names.len(), self.shapes.len()),
            ));
        }
        if let Some(w) = self.names.windows(2).find(|w| w[0] >= w[1]) {
            return Err(mismatch(
                "names",
                format!("`{}` listed before `{}`; names must be strictly sorted", w[0], w[1]),
            ));
        }
        if let Some((name, _)) = self
            .names
            .iter()
            .zip(&self.shapes)
            .find(|(_, s)| s.is_empty() || s.contains(&0))
        {
            return Err(mismatch(name, "empty or zero-sized shape".into()));
        }
        Ok(())
    }
}

pub fn encode(params: &ParamVector, created_by: &str, config_hash: &str) -> Result<Vec<u8>> {
    let header = CheckpointHeader::for_params(params, created_by, config_hash);
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + header.payload_len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, ParamVector)> {
    let Some(len_bytes) = bytes.get(..8) else {
        return Err(CheckpointError::BadHeader {
            field: "length".into(),
            reason: format!("file of {} bytes has no length prefix", bytes.len()),
        }
        .into());
    };
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(8..8usize.saturating_add(header_len))
        .ok_or_else(|| CheckpointError::BadHeader {
            field: "length".into(),
            reason: format!("header length {header_len} exceeds file size {}", bytes.len()),
        })?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| CheckpointError::BadHeader {
            field: "header".into(),
            reason: e.to_string(),
        })?;
    header.validate()?;
    let payload = &bytes[8 + header_len..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            actual: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(CheckpointError::ShapeMismatch {
            field: "shapes".into(),
            detail: format!("{} trailing payload bytes", payload.len() - expected),
        }
        .into());
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamVector::new();
    for (name, shape) in header.names.iter().zip(&header.shapes) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
    }
    Ok((header, params))
}

/// Writes `params` to `path`, creating parent directories.
pub fn save_checkpoint(
    params: &ParamVector,
    path: &Path,
    created_by: &str,
    config_hash: &str,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = encode(params, created_by, config_hash)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks it against `template`. A differing
/// `config_hash` is only logged.
pub fn load_checkpoint_into(
    path: &Path,
    template: &ParamVector,
    config_hash: Option<&str>,
) -> Result<(CheckpointHeader, ParamVector)> {
    let (header, params) = load_checkpoint(path)?;
    check_against(&params, template)?;
    if let Some(h) = config_hash {
        if h != header.config_hash {
            log::warn!(
                "{}: checkpoint config_hash {} differs from current {}",
                path.display(),
                header.config_hash,
                h
            );
        }
    }
    Ok((header, params))
}

pub fn check_against(params: &ParamVector, template: &ParamVector) -> Result<(), CheckpointError> {
    let got: Vec<_> = params.names().collect();
    let want: Vec<_> = template.names().collect();
    if got != want {
        return Err(CheckpointError::ShapeMismatch {
            field: "names".into(),
            detail: format!("expected {want:?}, found {got:?}"),
        });
    }
    for ((name, a), (_, b)) in params.iter().zip(template.iter()) {
        if a.shape() != b.shape() {
            return Err(CheckpointError::ShapeMismatch {
                field: name.into(),
                detail: format!("expected {:?}, found {:?}", b.shape(), a.shape()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamVector {
        let mut p = ParamVector::new();
        p.insert("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        p.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        p
    }

    #[test]
    fn roundtrip_bit_exact() {
        let p = params();
        let (h, q) = decode(&encode(&p, "test", "abc").unwrap()).unwrap();
        assert_eq!(h.created_by, "test");
        let bits = |p: &ParamVector| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    #[test]
    fn short_file_is_bad_header() {
        let err = decode(&[1, 2, 3]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::BadHeader { .. })));
    }

    #[test]
    fn template_shape_check() {
        let p = params();
        let mut t = params();
        t.insert("b", Tensor::zeros(&[4]));
        assert!(matches!(
            check_against(&p, &t),
            Err(CheckpointError::ShapeMismatch { field, .. }) if field == "b"
        ));
    }
}
