//! Binary checkpoint: magic `VPNC`, a `u32` version, the model configuration
//! as TOML text, then every named tensor with its values as `f64` LE.
//! All integers are little-endian `u32`; strings are length-prefixed UTF-8.

use std::fs;
use std::path::Path;

use vpn_core::diff::Tensor;
use vpn_core::model::{Model, ModelConfig};
use vpn_core::params::ParamStore;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPNC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let config = toml::to_string(&model.config).map_err(|e| Error::Config(format!("cannot serialize the model configuration: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &config);
    let entries = model.params.entries();
    put_u32(&mut out, entries.len());
    for e in entries {
        put_str(&mut out, &e.name);
        out.push(e.trainable as u8);
        put_u32(&mut out, e.value.rank());
        for &d in e.value.shape() {
            put_u32(&mut out, d);
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::at_offset(self.path, self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::at_offset(self.path, at, format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::at_offset(path, 0, "bad magic, expected VPNC"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::at_offset(path, 4, format!("unsupported version {version}")));
    }
    let config_at = c.pos;
    let text = c.string("configuration")?;
    let config: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::at_offset(path, config_at, format!("configuration: {}", e.message())))?;
    let count = c.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos;
        let name = c.string("tensor name")?;
        let trainable = match c.take(1, "trainable flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::at_offset(path, c.pos - 1, format!("bad trainable flag {b}"))),
        };
        let rank = c.u32("rank")?;
        let shape = (0..rank).map(|_| c.u32("extent")).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= bytes.len() / 8);
        let len = len.ok_or_else(|| Error::at_offset(path, at, format!("{name}: implausible shape {shape:?}")))?;
        let data = c.take(8 * len, "tensor data")?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::at_offset(path, at, format!("{name}: {e}")))?;
        if store.contains(&name) {
            return Err(Error::at_offset(path, at, format!("duplicate tensor {name}")));
        }
        store.insert(&name, value, trainable);
    }
    if c.pos != bytes.len() {
        return Err(Error::at_offset(path, c.pos, "trailing bytes"));
    }
    let reference = Model::new(config.clone(), 0)?;
    let model = Model::from_parts(config, store)?;
    model.check_params_against(&reference.params)?;
    for e in reference.params.entries() {
        let got = model.params.entries().iter().find(|g| g.name == e.name).expect("checked above");
        if got.trainable != e.trainable {
            return Err(Error::Format { path: path.into(), location: "tensors".into(), detail: format!("{}: wrong trainable flag", e.name) });
        }
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
