//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     "HSOCKPT\x01"
//! u32       header length
//! header    `key = value` text: model config, dtype, tensor_count, tokenizer
//! tensors   tensor_count × { u16 name length, name, u8 ndim, ndim × u32 dim, raw data }
//! ```

use std::path::Path;

use hso_tensor::{Float, Tensor};

use crate::config::{FlatConfig, KvConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"HSOCKPT\x01";
const MAX_HEADER: usize = 1 << 20;
const MAX_NDIM: usize = 4;

/// Weights as stored, in either precision.
#[derive(Clone, Debug)]
pub enum StoredParams {
    F32(Parameters<f32>),
    F64(Parameters<f64>),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: StoredParams,
    pub tokenizer: String,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match &self.params {
            StoredParams::F32(p) => p.config(),
            StoredParams::F64(p) => p.config(),
        }
    }

    pub fn dtype(&self) -> &'static str {
        match &self.params {
            StoredParams::F32(_) => f32::DTYPE,
            StoredParams::F64(_) => f64::DTYPE,
        }
    }

    /// The weights in precision `F`; exact when `F` matches the stored dtype.
    pub fn params<F: Float>(&self) -> Parameters<F> {
        match &self.params {
            StoredParams::F32(p) => p.cast(),
            StoredParams::F64(p) => p.cast(),
        }
    }
}

pub fn encode<F: Float>(params: &Parameters<F>, tokenizer: &str) -> Vec<u8> {
    let mut header = params.config().to_kv();
    header.set("dtype", F::DTYPE);
    header.set("tensor_count", params.tensors().len());
    header.set("tokenizer", tokenizer);
    let header = header.to_text();

    let mut out = Vec::with_capacity(16 + header.len() + params.count() * F::WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in Parameters::<F>::names(params.config()).iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn read_tensors<F: Float>(r: &mut Reader<'_>, config: &ModelConfig) -> Result<Vec<Tensor<F>>> {
    let names = Parameters::<F>::names(config);
    let shapes = Parameters::<F>::shapes(config);
    let mut tensors = Vec::with_capacity(names.len());
    for (name, shape) in names.iter().zip(&shapes) {
        let len = r.u16("tensor name length")? as usize;
        let got = r.take(len, "tensor name")?;
        if got != name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name:?}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        let ndim = r.u8("tensor rank")? as usize;
        if ndim > MAX_NDIM {
            return Err(Error::Checkpoint(format!("{name}: rank {ndim} too large")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("tensor dimension")? as usize);
        }
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * F::WIDTH, "tensor data")?;
        let data = raw.chunks_exact(F::WIDTH).map(F::read_le).collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    Ok(tensors)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let header_len = r.u32("header length")? as usize;
    if header_len > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header of {header_len} bytes")));
    }
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let kv = KvConfig::parse(header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut model_kv = KvConfig::new();
    for key in ModelConfig::KEYS {
        let v = kv
            .raw(key)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks {key}")))?;
        model_kv.set(key, v);
    }
    let config = ModelConfig::from_kv(&model_kv).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // Refuse configs whose tensors could not fit in the remaining bytes
    // before allocating anything.
    let needed = Parameters::<f32>::shapes(&config)
        .iter()
        .try_fold(0usize, |acc, s| {
            s.iter()
                .try_fold(1usize, |p, &d| p.checked_mul(d))
                .and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| Error::Checkpoint("tensor sizes overflow".into()))?;
    let count: usize = kv
        .get("tensor_count")
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .ok_or_else(|| Error::Checkpoint("header lacks tensor_count".into()))?;
    if count != Parameters::<f32>::names(&config).len() {
        return Err(Error::Checkpoint(format!("tensor_count {count} does not match config")));
    }
    let tokenizer = kv
        .raw("tokenizer")
        .ok_or_else(|| Error::Checkpoint("header lacks tokenizer".into()))?
        .to_string();
    let dtype = kv
        .raw("dtype")
        .ok_or_else(|| Error::Checkpoint("header lacks dtype".into()))?;
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        _ => return Err(Error::Checkpoint(format!("unknown dtype {dtype:?}"))),
    };
    if needed.saturating_mul(width) > bytes.len() - r.pos {
        return Err(Error::Checkpoint("file too short for its config".into()));
    }
    let params = match dtype {
        "f32" => StoredParams::F32(Parameters::from_tensors(config, read_tensors(&mut r, &config)?)?),
        _ => StoredParams::F64(Parameters::from_tensors(config, read_tensors(&mut r, &config)?)?),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { params, tokenizer })
}

pub fn save<F: Float>(path: impl AsRef<Path>, params: &Parameters<F>, tokenizer: &str) -> Result<()> {
    crate::manifest::atomic_write(path, &encode(params, tokenizer))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 7,
            max_context: 9,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..3 {
            let p = Parameters::<f32>::init(cfg(), seed).unwrap();
            let bytes = encode(&p, "byte");
            let ck = decode(&bytes).unwrap();
            assert_eq!(ck.dtype(), "f32");
            assert_eq!(ck.tokenizer, "byte");
            assert!(ck.params::<f32>().bit_eq(&p));
            assert_eq!(encode(&ck.params::<f32>(), &ck.tokenizer), bytes);
        }
        let p = Parameters::<f64>::init(cfg(), 9).unwrap();
        let ck = decode(&encode(&p, "byte")).unwrap();
        assert!(ck.params::<f64>().bit_eq(&p));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Parameters::<f32>::init(cfg(), 0).unwrap();
        let bytes = encode(&p, "byte");
        assert!(decode(&[]).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut huge = bytes.clone();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
    }

    #[test]
    fn oversized_config_fails_before_allocation() {
        let text = "n_layers = 1\nd_model = 65536\nn_heads = 1\nd_ff = 65536\nvocab_size = 65536\n\
                    max_context = 65536\ndtype = f64\ntensor_count = 20\ntokenizer = byte\n";
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(text.len() as u32).to_le_bytes());
        bytes.extend_from_slice(text.as_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Parameters::<f32>::init(cfg(), 4).unwrap();
        save(&path, &p, "byte").unwrap();
        let first = std::fs::read(&path).unwrap();
        let ck = load(&path).unwrap();
        save(&path, &ck.params::<f32>(), &ck.tokenizer).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}
