//! Binary checkpoint format (all integers and floats little-endian):
//!
//! | field          | encoding                                   |
//! |----------------|--------------------------------------------|
//! | magic          | `b"CDRP"`                                  |
//! | format version | u32                                        |
//! | schema hash    | u64 (FNV-1a of the canonical codebook)     |
//! | disease id     | u32 byte length + UTF-8 bytes              |
//! | dims           | u32 input, u32 hidden, u32 blocks          |
//! | norm stats     | f64 x input (mean) then f64 x input (std)  |
//! | parameters     | f32, layer by layer, `W` row-major then `b` |
//!
//! Training runs in f64; parameters are narrowed to f32 on save.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::NormStats;
use crate::model::{Dims, RiskModel};
use crate::schema::FeatureSchema;

pub const MAGIC: &[u8; 4] = b"CDRP";
pub const FORMAT_VERSION: u32 = 1;

const MAX_DIM: u32 = 1 << 16;
const MAX_ID_LEN: u32 = 1 << 12;

pub fn encode(model: &RiskModel) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::with_capacity(64 + 16 * dims.input + 4 * model.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.schema_hash.to_le_bytes());
    out.extend_from_slice(&(model.disease.len() as u32).to_le_bytes());
    out.extend_from_slice(model.disease.as_bytes());
    for d in [dims.input, dims.hidden, dims.blocks] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in model.norm.mean.iter().chain(&model.norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &model.params {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    read_array::<4>(r).map(u32::from_le_bytes)
}

fn invalid(msg: &str) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::InvalidData, msg.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<RiskModel> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = &bytes[4..];
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let schema_hash = u64::from_le_bytes(read_array::<8>(&mut r)?);
    let id_len = read_u32(&mut r)?;
    if id_len > MAX_ID_LEN {
        return Err(invalid("disease id too long"));
    }
    let mut id = vec![0u8; id_len as usize];
    r.read_exact(&mut id)?;
    let disease = String::from_utf8(id).map_err(|_| invalid("disease id is not UTF-8"))?;
    let mut d = [0u32; 3];
    for slot in &mut d {
        *slot = read_u32(&mut r)?;
        if *slot == 0 || *slot > MAX_DIM {
            return Err(invalid("implausible model dimensions"));
        }
    }
    let dims = Dims {
        input: d[0] as usize,
        hidden: d[1] as usize,
        blocks: d[2] as usize,
    };
    let mut stats = vec![0.0; 2 * dims.input];
    for v in &mut stats {
        *v = f64::from_le_bytes(read_array::<8>(&mut r)?);
    }
    let std = stats.split_off(dims.input);
    if stats.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&s| s <= 0.0) {
        return Err(invalid("normalization statistics must be finite with positive std"));
    }
    let n = dims.n_params();
    if r.len() != 4 * n {
        return Err(if r.len() < 4 * n {
            Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated parameter block"))
        } else {
            invalid("trailing bytes after parameters")
        });
    }
    let params: Vec<f64> = r
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    RiskModel::from_parts(dims, params, NormStats { mean: stats, std }, schema_hash, disease)
}

/// Write atomically: temp file in the target directory, then rename.
pub fn save_checkpoint(model: &RiskModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if model.params.iter().any(|p| !(*p as f32).is_finite()) {
        return Err(invalid("parameter outside the f32 range; refusing to write a checkpoint that cannot load back"));
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&encode(model))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RiskModel> {
    decode(&std::fs::read(path)?)
}

/// Load and require that the checkpoint was trained against `schema`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<RiskModel> {
    let model = load_checkpoint(path)?;
    let expected = schema.hash();
    if model.schema_hash != expected {
        return Err(Error::SchemaHashMismatch { found: model.schema_hash, expected });
    }
    if model.input_dim() != schema.n_features() {
        return Err(Error::DimensionMismatch { expected: schema.n_features(), got: model.input_dim() });
    }
    Ok(model)
}
