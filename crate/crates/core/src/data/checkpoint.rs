//! Encoder checkpoints.
//!
//! Layout (little-endian): `"BNGC"`, u32 version, spec block (u32 input_dim,
//! u32 n_hidden, n_hidden × u32, u32 proj_hidden_dim, u32 embed_dim), u32 role,
//! u64 config fingerprint, u64 seed, u64 steps, u32 stage length + UTF-8 stage
//! name, u32 layer count, then per layer a weight block and a bias block
//! (u32 rows, u32 cols, rows·cols f64), and finally a CRC-32 of everything
//! before it.

use std::path::Path;

use super::{check_crc, magic_str, write_atomic, FormatError, Reader};
use crate::error::{Error, Result};
use crate::nets::{EncoderParams, EncoderSpec, Linear, Role};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BNGC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    /// Stage that produced the checkpoint, e.g. `pretrain` or `distill`.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub fingerprint: u64,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rows());
    put_u32(out, t.cols());
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let mut out = Vec::with_capacity(64 + 8 * p.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, p.spec.input_dim);
    put_u32(&mut out, p.spec.hidden_dims.len());
    p.spec.hidden_dims.iter().for_each(|&h| put_u32(&mut out, h));
    put_u32(&mut out, p.spec.proj_hidden_dim);
    put_u32(&mut out, p.spec.embed_dim);
    out.extend_from_slice(&p.role.code().to_le_bytes());
    out.extend_from_slice(&ckpt.fingerprint.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.steps.to_le_bytes());
    put_u32(&mut out, ckpt.meta.stage.len());
    out.extend_from_slice(ckpt.meta.stage.as_bytes());
    put_u32(&mut out, p.layers.len());
    for l in &p.layers {
        put_block(&mut out, &l.weight);
        put_block(&mut out, &l.bias);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn dim(r: &mut Reader<'_>) -> Result<usize, FormatError> {
    Ok(r.u32()? as usize)
}

fn block(r: &mut Reader<'_>) -> Result<Tensor, FormatError> {
    let (rows, cols) = (dim(r)?, dim(r)?);
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
        .ok_or(FormatError::Truncated {
            offset: r.pos(),
            needed: rows.saturating_mul(cols).saturating_mul(8),
            len: r.pos() + r.remaining(),
        })?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(r.f64()?);
    }
    Ok(Tensor::matrix(rows, cols, values))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 8,
            len: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "BNGC".into(),
            found: magic_str(&bytes[..4]),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let payload = check_crc(bytes)?;
    let mut r = Reader::new(&payload[8..]);
    let input_dim = dim(&mut r)?;
    let n_hidden = dim(&mut r)?;
    if n_hidden > r.remaining() / 4 {
        return Err(FormatError::Invalid(format!("{n_hidden} hidden layers")));
    }
    let hidden_dims = (0..n_hidden).map(|_| dim(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let proj_hidden_dim = dim(&mut r)?;
    let embed_dim = dim(&mut r)?;
    let role = r.u32()?;
    let role = Role::from_code(role).ok_or_else(|| FormatError::Invalid(format!("unknown role code {role}")))?;
    let fingerprint = r.u64()?;
    let seed = r.u64()?;
    let steps = r.u64()?;
    let stage_len = dim(&mut r)?;
    let stage = String::from_utf8(r.take(stage_len)?.to_vec())
        .map_err(|_| FormatError::Invalid("stage name is not UTF-8".into()))?;
    let n_layers = dim(&mut r)?;
    if n_layers > r.remaining() / 16 {
        return Err(FormatError::Invalid(format!("{n_layers} layers")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let weight = block(&mut r)?;
        let bias = block(&mut r)?;
        layers.push(Linear { weight, bias });
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()));
    }
    let params = EncoderParams {
        spec: EncoderSpec {
            input_dim,
            hidden_dims,
            proj_hidden_dim,
            embed_dim,
        },
        role,
        layers,
    };
    params.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(Checkpoint {
        params,
        fingerprint,
        meta: CheckpointMeta { seed, steps, stage },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.params.validate()?;
    write_atomic(path, &encode_checkpoint(ckpt)).map_err(|e| match e {
        FormatError::Io(io) => Error::io(path, io),
        other => other.into(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}
