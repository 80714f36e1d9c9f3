//! Binary model container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, the architecture as
//! six `u32` dimensions plus a tied-output byte, then tensor records
//! (`u32` count; per record a `u16`-prefixed name, dtype tag, rank, `u32`
//! extents and an `f32` payload) and cluster records (`u32` count; per record
//! a `u16`-prefixed id, bit-width, `f64` scale, member names, value count and
//! packed level indices). A full-precision model has no cluster records.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerLm};
use crate::quant::pack::{pack_levels, packed_len, unpack_levels};
use crate::quant::{BitWidth, ClusterSpec, QuantTable, QuantizedCluster, QuantizedModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIXQCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Full(TransformerLm),
    Quantized(QuantizedModel),
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        match self {
            Checkpoint::Full(m) => &m.config,
            Checkpoint::Quantized(q) => q.config(),
        }
    }

    /// The model as evaluated: quantized clusters are expanded to their grid values.
    pub fn into_model(self) -> Result<TransformerLm> {
        match self {
            Checkpoint::Full(m) => Ok(m),
            Checkpoint::Quantized(q) => q.dequantize(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn dim(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }
    fn name(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("name fits in u16"));
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.name(name);
        self.u8(DTYPE_F32);
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.dim(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn header(config: &ModelConfig) -> Writer {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    for d in [
        config.vocab,
        config.d_model,
        config.d_ff,
        config.n_heads,
        config.n_layers,
        config.max_len,
    ] {
        w.dim(d);
    }
    w.u8(u8::from(config.tie_embeddings));
    w
}

pub fn encode_model(model: &TransformerLm) -> Vec<u8> {
    let mut w = header(&model.config);
    let params = model.named_params();
    w.dim(params.len());
    for (name, t) in params {
        w.tensor(&name, t);
    }
    w.u32(0);
    w.0
}

pub fn encode_quantized(model: &QuantizedModel) -> Vec<u8> {
    let mut w = header(model.config());
    w.dim(model.residue().len());
    for (name, t) in model.residue() {
        w.tensor(name, t);
    }
    w.dim(model.clusters().len());
    for c in model.clusters() {
        w.name(&c.spec.id);
        w.u8(c.table.bits().bits() as u8);
        w.f64(c.table.alpha());
        w.dim(c.spec.members.len());
        for m in &c.spec.members {
            w.name(m);
        }
        w.u64(c.levels.len() as u64);
        w.0.extend_from_slice(&pack_levels(&c.levels, c.table.bits()));
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(field, "unexpected end of file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }
    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &str) -> Result<u16> {
        self.array(field).map(u16::from_le_bytes)
    }
    fn u32(&mut self, field: &str) -> Result<u32> {
        self.array(field).map(u32::from_le_bytes)
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        self.array(field).map(u64::from_le_bytes)
    }
    fn f64(&mut self, field: &str) -> Result<f64> {
        self.array(field).map(f64::from_le_bytes)
    }
    fn dim(&mut self, field: &str) -> Result<usize> {
        self.u32(field).map(|v| v as usize)
    }
    fn name(&mut self, field: &str) -> Result<String> {
        let len = self.u16(field)? as usize;
        let bytes = self.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(field, "name is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.name("tensor name")?;
        let dtype = self.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(name, format!("unknown dtype tag {dtype}")));
        }
        let rank = self.u8(&name)? as usize;
        let shape = (0..rank).map(|_| self.dim(&name)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::format(name.clone(), "implausible shape"))?;
        let payload = self.take(numel * 4, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(name.clone(), e.to_string()))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a model checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab: r.dim("vocab")?,
        d_model: r.dim("d_model")?,
        d_ff: r.dim("d_ff")?,
        n_heads: r.dim("n_heads")?,
        n_layers: r.dim("n_layers")?,
        max_len: r.dim("max_len")?,
        tie_embeddings: match r.u8("tie_embeddings")? {
            0 => false,
            1 => true,
            v => return Err(Error::format("tie_embeddings", format!("invalid flag {v}"))),
        },
    };
    config
        .validate()
        .map_err(|e| Error::format("architecture", e.to_string()))?;
    let n_tensors = r.dim("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..n_tensors {
        tensors.push(r.tensor()?);
    }
    let n_clusters = r.dim("cluster count")?;
    let mut clusters = Vec::new();
    for _ in 0..n_clusters {
        let id = r.name("cluster id")?;
        let bits = BitWidth::new(u32::from(r.u8(&id)?))
            .map_err(|e| Error::format(id.clone(), e.to_string()))?;
        let table = QuantTable::new(bits, r.f64(&id)?)
            .map_err(|e| Error::format(id.clone(), e.to_string()))?;
        let n_members = r.dim(&id)?;
        let members = (0..n_members)
            .map(|_| r.name(&id))
            .collect::<Result<Vec<_>>>()?;
        let count = usize::try_from(r.u64(&id)?)
            .ok()
            .filter(|&c| c <= bytes.len() * 8)
            .ok_or_else(|| Error::format(id.clone(), "implausible value count"))?;
        let packed = r.take(packed_len(count, bits), &id)?;
        let levels = unpack_levels(packed, bits, count)
            .map_err(|e| Error::format(id.clone(), e.to_string()))?;
        clusters.push(QuantizedCluster {
            spec: ClusterSpec { id, members, count },
            table,
            levels,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailer", "unexpected bytes after the last record"));
    }
    if clusters.is_empty() {
        let named: HashMap<String, Tensor> = tensors.into_iter().collect();
        TransformerLm::from_named(config, named).map(Checkpoint::Full)
    } else {
        QuantizedModel::new(config, clusters, tensors).map(Checkpoint::Quantized)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(Error::file(&tmp))?;
        f.write_all(bytes).and_then(|()| f.sync_all()).map_err(Error::file(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::file(path))?;
    Ok(())
}

pub fn save_model(path: &Path, model: &TransformerLm) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

pub fn save_quantized(path: &Path, model: &QuantizedModel) -> Result<()> {
    write_atomic(path, &encode_quantized(model))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::file(path))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{model_clusters, Precision};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(tied: bool) -> TransformerLm {
        let config = ModelConfig {
            vocab: 7,
            d_model: 4,
            d_ff: 8,
            n_heads: 2,
            n_layers: 1,
            max_len: 5,
            tie_embeddings: tied,
        };
        TransformerLm::init(config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn full_round_trip() {
        for tied in [false, true] {
            let m = model(tied);
            assert_eq!(decode(&encode_model(&m)).unwrap(), Checkpoint::Full(m));
        }
    }

    #[test]
    fn quantized_round_trip() {
        let m = model(false);
        let assignment: Vec<_> = model_clusters(&m.config, true)
            .into_iter()
            .map(|s| (s, Precision::Quantized(BitWidth::TWO)))
            .collect();
        let q = QuantizedModel::quantize(&m, &assignment).unwrap();
        let decoded = decode(&encode_quantized(&q)).unwrap();
        assert_eq!(decoded, Checkpoint::Quantized(q.clone()));
        assert_eq!(decoded.into_model().unwrap(), q.dequantize().unwrap());
    }

    #[test]
    fn names_the_offending_field() {
        let m = model(false);
        let bytes = encode_model(&m);
        let field = |b: &[u8]| match decode(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(field(b"NOTACKPT\x01\0\0\0"), "magic");
        let mut v = bytes.clone();
        v[8] = 9;
        assert_eq!(field(&v), "version");
        assert_eq!(field(&bytes[..bytes.len() - 10]), "out.proj");
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(field(&extra), "trailer");
    }
}
