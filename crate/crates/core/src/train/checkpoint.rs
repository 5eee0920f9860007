//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "FSYN" | u16 version | u16 arch tag | u32 tensor count | u16 heads | u16 context
//! per tensor (name order): u16 name length | name | u8 rank | u32 dims… | f32 data…
//! u32 CRC-32 of everything above
//! ```
//!
//! The remaining configuration (vocabulary, widths, depth, kernel) is read
//! back from the tensor shapes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSYN";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 16;
pub const TRAILER_BYTES: usize = 4;

/// Exact serialized size of `params`.
pub fn checkpoint_size(params: &ModelParams) -> usize {
    HEADER_BYTES
        + params
            .iter()
            .map(|(name, t)| 2 + name.len() + 1 + 4 * t.rank() + 4 * t.numel())
            .sum::<usize>()
        + TRAILER_BYTES
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let c = &model.config;
    let narrow = |what: &str, v: usize| {
        u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit a checkpoint header")))
    };
    let mut out = Vec::with_capacity(checkpoint_size(&model.params));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.arch.tag().to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    out.extend_from_slice(&narrow("head count", c.n_heads)?.to_le_bytes());
    out.extend_from_slice(&narrow("context length", c.context_length)?.to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&narrow("name length", name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::malformed("checkpoint", "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_BYTES + TRAILER_BYTES {
        return Err(Error::malformed("checkpoint", "truncated"));
    }
    let body = &bytes[..bytes.len() - TRAILER_BYTES];
    let stored = u32::from_le_bytes(bytes[bytes.len() - TRAILER_BYTES..].try_into().expect("4 bytes"));
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(Error::Crc { stored, computed });
    }
    let tag = r.u16()?;
    let arch = Architecture::from_tag(tag)
        .ok_or_else(|| Error::malformed("checkpoint", format!("unknown architecture tag {tag}")))?;
    let count = r.u32()? as usize;
    let n_heads = r.u16()? as usize;
    let context_length = r.u16()? as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::malformed("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::malformed("checkpoint", "tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.get(&name).is_some() {
            return Err(Error::malformed("checkpoint", format!("duplicate tensor '{name}'")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::malformed("checkpoint", "trailing bytes after the tensor table"));
    }
    let config = infer_config(arch, n_heads, context_length, &params)?;
    Model::new(config, params)
}

fn dim(params: &ModelParams, name: &str, axis: usize) -> Result<usize> {
    params
        .get(name)
        .and_then(|t| t.shape().get(axis).copied())
        .ok_or_else(|| Error::malformed("checkpoint", format!("shape table lacks '{name}' axis {axis}")))
}

fn count_prefixed(params: &ModelParams, prefix: &str, suffix: &str) -> usize {
    (0..)
        .take_while(|i| params.get(&format!("{prefix}{i}{suffix}")).is_some())
        .count()
}

fn infer_config(arch: Architecture, n_heads: usize, context_length: usize, params: &ModelParams) -> Result<ModelConfig> {
    let mut c = ModelConfig::new(arch, dim(params, "embed", 0)?, context_length);
    c.embed_dim = dim(params, "embed", 1)?;
    c.n_heads = n_heads;
    match arch {
        Architecture::WaveNet => {
            c.conv_layers = count_prefixed(params, "conv", ".weight");
            c.conv_kernel = dim(params, "conv0.weight", 0)?;
            c.hidden_dim = dim(params, "conv0.weight", 2)?;
        }
        Architecture::Rnn => c.hidden_dim = dim(params, "rnn.w_h", 0)?,
        Architecture::Transformer => c.n_blocks = count_prefixed(params, "block", ".ln1.gamma"),
    }
    Ok(c)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
