//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GPMCKPT1"
//! version  u32      1
//! count    u32      number of records
//! record:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank x u32)
//!   values   product(dims) x f32
//! ```
//!
//! Optimizer state is stored in the same layout with records `m/<name>`,
//! `v/<name>` and a rank-0 `adamw.step` holding the step counter.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GPMCKPT1";
pub const VERSION: u32 = 1;
const STEP_RECORD: &str = "adamw.step";

fn format_err(msg: impl Into<String>) -> NnError {
    NnError::Format(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 8];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut bytes)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut bytes)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut bytes, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("record name is not UTF-8"))?;
        let rank = read_u32(&mut bytes)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut bytes).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 4];
            read_exact(&mut bytes, &mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        records.push((name, Tensor::new(dims, data)?));
    }
    if !bytes.is_empty() {
        return Err(format_err("trailing bytes after last record"));
    }
    Ok(records)
}

fn read_exact(src: &mut &[u8], dst: &mut [u8]) -> Result<()> {
    src.read_exact(dst)
        .map_err(|_| format_err("truncated checkpoint"))
}

fn read_u32(src: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn save_params(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let records: Vec<_> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect();
    write_file(path, &encode(&records))
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// Overwrite every parameter of `store` from the file. Every parameter must
/// be present with a matching shape.
pub fn load_params(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let records = read_records(path)?;
    apply_records(&records, store)
}

pub fn apply_records(records: &[(String, Tensor<f32>)], store: &mut ParamStore<f32>) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let t = records
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| format_err(format!("checkpoint lacks parameter `{name}`")))?;
        store.set(&name, t)?;
    }
    Ok(())
}

pub fn save_optimizer(
    path: &Path,
    store: &ParamStore<f32>,
    state: &OptimizerState<f32>,
) -> Result<()> {
    if state.step > 1 << 24 {
        return Err(format_err("step counter exceeds exact f32 range"));
    }
    let mut records = vec![(STEP_RECORD.to_string(), Tensor::scalar(state.step as f32))];
    for (id, p) in store.iter() {
        records.push((format!("m/{}", p.name), state.m[id.index()].clone()));
        records.push((format!("v/{}", p.name), state.v[id.index()].clone()));
    }
    write_file(path, &encode(&records))
}

pub fn load_optimizer(path: &Path, store: &ParamStore<f32>) -> Result<OptimizerState<f32>> {
    let records = read_records(path)?;
    let find = |name: &str| {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| format_err(format!("optimizer checkpoint lacks `{name}`")))
    };
    let step = find(STEP_RECORD)?.item() as u64;
    let mut state = OptimizerState::new(store);
    state.step = step;
    for (id, p) in store.iter() {
        let m = find(&format!("m/{}", p.name))?;
        let v = find(&format!("v/{}", p.name))?;
        if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
            return Err(format_err(format!(
                "moment shape mismatch for `{}`",
                p.name
            )));
        }
        state.m[id.index()] = m;
        state.v[id.index()] = v;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_rejects_bad_magic_and_truncation() {
        let rec = vec![(
            "a".to_string(),
            Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap(),
        )];
        let bytes = encode(&rec);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert_eq!(decode(&bytes).unwrap(), rec);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&[("w".to_string(), Tensor::new(vec![1], vec![1.0f32]).unwrap())]);
        assert_eq!(&bytes[..8], b"GPMCKPT1");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(bytes[20], b'w');
        assert_eq!(&bytes[21..25], &1u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &1u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }
}
