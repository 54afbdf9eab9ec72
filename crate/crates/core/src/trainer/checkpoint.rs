//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! "UCMK"  u32 version
//! u32 config length, config text (key=value lines)
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes, u8 dtype code, u32 rank, u64 dims…, raw values
//! f64 best validation mean Dice
//! ```
//!
//! Parameters are stored under their own names, batch-norm running
//! statistics under `buffer:<name>`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{ModelConfig, UCycleMLP};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"UCMK";
pub const VERSION: u32 = 1;
const BUFFER_PREFIX: &str = "buffer:";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    out.push(T::DTYPE as u8);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        v.write_le(out);
    }
}

pub fn config_text(config: &ModelConfig) -> String {
    config.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn encode<T: Element>(model: &UCycleMLP<T>, best_dice: f64) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_str(&mut out, &config_text(model.config()));
    put_u32(&mut out, (model.params.len() + model.buffers.len()) as u32);
    for (name, p) in model.params.iter() {
        put_tensor(&mut out, name, &p.value);
    }
    for (name, b) in &model.buffers {
        put_tensor(&mut out, &format!("{BUFFER_PREFIX}{name}"), b);
    }
    out.extend_from_slice(&best_dice.to_le_bytes());
    out
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &UCycleMLP<T>, best_dice: f64) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model, best_dice))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 string".into()))
    }
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line {line:?}")))?;
        if !config.set(k.trim(), v)? {
            return Err(Error::Format(format!("unknown config key {k:?} in checkpoint")));
        }
    }
    Ok(config)
}

/// Rebuilds the model and returns it with the stored best mean Dice.
pub fn decode<T: Element>(buf: &[u8]) -> Result<(UCycleMLP<T>, f64)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let config = parse_config(&r.string()?)?;
    let mut model = UCycleMLP::<T>::new(&config, 0)?;
    let count = r.u32()? as usize;
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name} stored as {dtype:?}, loading as {:?}",
                T::DTYPE
            )));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let values = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let tensor = Tensor::new(&dims, values)?;
        let slot = match name.strip_prefix(BUFFER_PREFIX) {
            Some(b) => model.buffers.get_mut(b),
            None => model.params.get_mut(&name),
        };
        let slot = slot.ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("tensor {name} stored twice")));
        }
    }
    if seen.len() != model.params.len() + model.buffers.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            seen.len(),
            model.params.len() + model.buffers.len()
        )));
    }
    let best = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((model, best))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(UCycleMLP<T>, f64)> {
    decode(&fs::read(path)?)
}
