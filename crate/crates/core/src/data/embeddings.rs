//! Embedding matrices: `"BNGE"`, u32 version, u32 N, u32 D, N·D little-endian
//! f32, CRC-32.

use std::path::Path;

use super::{check_crc, magic_str, write_atomic, FormatError, Reader};
use crate::bagging::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::norm;

const MAGIC: &[u8; 4] = b"BNGE";
const VERSION: u32 = 1;

/// A loaded matrix and the largest per-row change made by renormalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedEmbeddings {
    pub matrix: EmbeddingMatrix,
    pub max_renorm_delta: f64,
}

pub fn encode_embeddings(e: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * e.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(e.len() as u32).to_le_bytes());
    out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
    for &v in e.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<LoadedEmbeddings, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 8,
            len: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "BNGE".into(),
            found: magic_str(&bytes[..4]),
        });
    }
    let mut r = Reader::new(bytes);
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(20))
        .ok_or(FormatError::DimOverflow(vec![n as u64, d as u64]))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            offset: 16,
            needed: expected - 16,
            len: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let payload = check_crc(bytes)?;
    let mut values: Vec<f64> = payload[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    let mut max_renorm_delta: f64 = 0.0;
    if d > 0 {
        for (r, row) in values.chunks_exact_mut(d).enumerate() {
            let nr = norm(row);
            if nr < 1e-8 {
                return Err(FormatError::Invalid(format!("row {r} has zero norm")));
            }
            for v in row.iter_mut() {
                let u = *v / nr;
                max_renorm_delta = max_renorm_delta.max((u - *v).abs());
                *v = u;
            }
        }
    }
    let matrix = EmbeddingMatrix::new(n, d, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(LoadedEmbeddings {
        matrix,
        max_renorm_delta,
    })
}

pub fn save_embeddings(e: &EmbeddingMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_embeddings(e)).map_err(|err| match err {
        FormatError::Io(io) => Error::io(path, io),
        other => other.into(),
    })
}

pub fn load_embeddings(path: &Path) -> Result<LoadedEmbeddings> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_embeddings(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed, Stream};
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(n: usize, d: usize) -> EmbeddingMatrix {
        let mut rng = keyed(1, Stream::Blobs, 0, 0);
        let mut v = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nr = norm(&row);
            v.extend(row.iter().map(|x| x / nr));
        }
        EmbeddingMatrix::new(n, d, v).unwrap()
    }

    #[test]
    fn round_trip_within_f32_bound() {
        let e = random_unit(50, 16);
        let back = decode_embeddings(&encode_embeddings(&e)).unwrap();
        for (a, b) in e.values().iter().zip(back.matrix.values()) {
            assert!((a - b).abs() < 1e-6);
        }
        for r in 0..50 {
            assert!((norm(back.matrix.row(r)) - 1.0).abs() < 1e-12);
        }
        assert!(back.max_renorm_delta < 1e-6);
        // Re-encoding the reconstruction is stable.
        let again = encode_embeddings(&back.matrix);
        assert_eq!(decode_embeddings(&again).unwrap().matrix.len(), 50);
    }

    #[test]
    fn header_and_payload_errors() {
        let bytes = encode_embeddings(&random_unit(3, 4));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad), Err(FormatError::BadMagic { .. })));
        assert!(matches!(
            decode_embeddings(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(decode_embeddings(&flipped), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn empty_matrix_round_trips() {
        let e = EmbeddingMatrix::new(0, 8, vec![]).unwrap();
        let back = decode_embeddings(&encode_embeddings(&e)).unwrap();
        assert_eq!(back.matrix, e);
    }
}
