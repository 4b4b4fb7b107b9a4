//! Binary parameter checkpoints. See `docs/checkpoint-format.md` for the
//! byte layout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, NnError, ParamStore, Real, Result};

const MAGIC: &[u8; 4] = b"MGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Contents of a checkpoint file: a JSON metadata document (model
/// configuration echo) and the named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub meta: serde_json::Value,
    pub params: Vec<StoredParam>,
}

impl CheckpointData {
    pub fn from_store<T: Real>(meta: serde_json::Value, store: &ParamStore<T>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| StoredParam {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.value.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self { meta, params }
    }

    /// Copies every stored tensor into `store`. The store must hold exactly
    /// the same parameter names and shapes.
    pub fn apply<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(NnError::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let values = p.values.iter().map(|&v| T::of(v as f64)).collect();
            store.set_value(&p.name, &p.shape, values)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| NnError::Format(e.to_string()))?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len())?;
            for &d in &p.shape {
                put_u32(&mut out, d)?;
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = get_u32(r)? as usize;
        let meta_bytes = take(r, meta_len)?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| NnError::Format(format!("metadata: {e}")))?;
        let n = get_u32(r)? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = get_u32(r)? as usize;
            let name = String::from_utf8(take(r, name_len)?.to_vec())
                .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?;
            let ndim = get_u32(r)? as usize;
            let shape = (0..ndim).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = numel(&shape);
            let raw = take(r, count.checked_mul(4).ok_or_else(|| NnError::Format("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(StoredParam { name, shape, values });
        }
        if !r.is_empty() {
            return Err(NnError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<T: Real>(path: &Path, meta: serde_json::Value, store: &ParamStore<T>) -> Result<()> {
    let bytes = CheckpointData::from_store(meta, store).to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    CheckpointData::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(NnError::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
