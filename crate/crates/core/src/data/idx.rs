//! IDX arrays: `00 00 <type> <ndims>`, big-endian u32 dims, big-endian payload.
//!
//! Unsigned-byte payloads (type 0x08) are scaled to [0, 1] on load; double
//! payloads (type 0x0E) are read as is and are what this crate writes for
//! synthetic data.

use std::path::Path;

use super::{write_atomic, Dataset, FormatError, Split};
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;
const DOUBLE: u8 = 0x0E;
/// Upper bound on element count, to reject absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    /// Raw element values (bytes widened, not yet scaled).
    pub values: Vec<f64>,
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxArray, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 4,
            len: bytes.len(),
        });
    }
    let (type_code, ndims) = (bytes[2], bytes[3] as usize);
    if bytes[0] != 0 || bytes[1] != 0 || !matches!(type_code, UBYTE | DOUBLE) || ndims == 0 {
        return Err(FormatError::BadMagic {
            expected: "00 00 08|0e nd".into(),
            found: format!("{:02x} {:02x} {:02x} {:02x}", bytes[0], bytes[1], bytes[2], bytes[3]),
        });
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(FormatError::Truncated {
            offset: 4,
            needed: 4 * ndims,
            len: bytes.len(),
        });
    }
    let raw: Vec<u64> = (0..ndims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as u64)
        .collect();
    let width = if type_code == UBYTE { 1 } else { 8 };
    let count = raw
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_ELEMENTS)
        .ok_or_else(|| FormatError::DimOverflow(raw.clone()))?;
    let payload = count as usize * width;
    let body = &bytes[header..];
    if body.len() < payload {
        return Err(FormatError::Truncated {
            offset: header,
            needed: payload,
            len: bytes.len(),
        });
    }
    if body.len() > payload {
        return Err(FormatError::TrailingBytes(body.len() - payload));
    }
    let values = if type_code == UBYTE {
        body.iter().map(|&b| b as f64).collect()
    } else {
        body.chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Ok(IdxArray {
        type_code,
        dims: raw.iter().map(|&d| d as usize).collect(),
        values,
    })
}

fn header(type_code: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, type_code, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn encode_idx_u8(dims: &[usize], values: &[u8]) -> Vec<u8> {
    let mut out = header(UBYTE, dims);
    out.extend_from_slice(values);
    out
}

pub fn encode_idx_f64(dims: &[usize], values: &[f64]) -> Vec<u8> {
    let mut out = header(DOUBLE, dims);
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn features(arr: IdxArray) -> Result<(usize, Vec<f64>), FormatError> {
    if arr.dims.len() < 2 {
        return Err(FormatError::Invalid(format!(
            "feature array needs >= 2 dims, got {:?}",
            arr.dims
        )));
    }
    let width: usize = arr.dims[1..].iter().product();
    if width == 0 {
        return Err(FormatError::Invalid(format!("zero-width rows: {:?}", arr.dims)));
    }
    let mut values = arr.values;
    if arr.type_code == UBYTE {
        values.iter_mut().for_each(|v| *v /= 255.0);
    } else if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    Ok((width, values))
}

fn labels(arr: IdxArray) -> Result<Vec<u32>, FormatError> {
    if arr.type_code != UBYTE || arr.dims.len() != 1 {
        return Err(FormatError::BadMagic {
            expected: "00 00 08 01".into(),
            found: format!("type {:02x} with {} dims", arr.type_code, arr.dims.len()),
        });
    }
    Ok(arr.values.iter().map(|&v| v as u32).collect())
}

/// Loads a feature file and, optionally, its label file.
pub fn load_idx(images: &Path, label_file: Option<&Path>) -> Result<Dataset> {
    let (width, values) = features(decode_idx(&read(images)?)?)?;
    let labels = match label_file {
        Some(p) => {
            let l = labels(decode_idx(&read(p)?)?)?;
            let rows = values.len() / width;
            if l.len() != rows {
                return Err(FormatError::LabelCount { rows, labels: l.len() }.into());
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(width, values, labels)
}

const FILES: [(&str, &str); 2] = [
    ("train-images.idx", "train-labels.idx"),
    ("val-images.idx", "val-labels.idx"),
];

/// Writes `train` and `val` as double-precision IDX files under `dir`.
pub fn save_dataset_dir(dir: &Path, train: &Dataset, val: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((img, lab), ds) in FILES.iter().zip([train, val]) {
        let bytes = encode_idx_f64(&[ds.len(), ds.input_dim()], ds.values());
        let path = dir.join(img);
        write_atomic(&path, &bytes).map_err(|e| with_path(e, &path))?;
        if let Some(l) = ds.labels() {
            if let Some(&big) = l.iter().find(|&&v| v > 255) {
                return Err(Error::Labels(format!("label {big} does not fit in an unsigned byte")));
            }
            let raw: Vec<u8> = l.iter().map(|&v| v as u8).collect();
            let path = dir.join(lab);
            write_atomic(&path, &encode_idx_u8(&[raw.len()], &raw)).map_err(|e| with_path(e, &path))?;
        }
    }
    Ok(())
}

/// Reads the train and val splits written by [`save_dataset_dir`].
pub fn load_dataset_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut out = Vec::new();
    for ((img, lab), split) in FILES.iter().zip([Split::Train, Split::Val]) {
        let lab = dir.join(lab);
        let ds = load_idx(&dir.join(img), lab.exists().then_some(lab.as_path()))?;
        out.push(ds.with_split(split));
    }
    let val = out.pop().expect("two splits");
    Ok((out.pop().expect("two splits"), val))
}

fn with_path(e: FormatError, path: &Path) -> Error {
    match e {
        FormatError::Io(io) => Error::io(path, io),
        other => other.into(),
    }
}
