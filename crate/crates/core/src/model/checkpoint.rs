//! Checkpoint container.
//!
//! ```text
//! ESA-CHECKPOINT/1\n
//! config <n>\n        followed by n bytes of TOML model config
//! params <count>\n
//! <name> f64 <d0>x<d1>..\n   (scalar shape written as `-`)
//! <product(shape) little-endian f64 values>
//! ...
//! ```
//! Values are always stored as f64, so f32 parameters round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Esa, ModelConfig};
use crate::error::{EsaError, Result};
use crate::tensor::{Element, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "ESA-CHECKPOINT/1";

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(EsaError::Checkpoint(msg.into()))
}

pub fn write_checkpoint<T: Element>(out: &mut impl Write, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let cfg = config.to_toml();
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "config {}", cfg.len())?;
    out.write_all(cfg.as_bytes())?;
    writeln!(out, "params {}", store.len())?;
    for p in store.iter() {
        let shape = if p.value.shape().is_empty() {
            "-".to_string()
        } else {
            p.value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
        };
        writeln!(out, "{} f64 {shape}", p.name)?;
        for &x in p.value.data() {
            out.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let Some(n) = rest.iter().position(|&b| b == b'\n') else {
            return bad("unexpected end of file");
        };
        self.pos += n + 1;
        std::str::from_utf8(&rest[..n]).or_else(|_| bad("header line is not UTF-8"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return bad("truncated data");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn count(line: &str, key: &str) -> Result<usize> {
    match line.split_once(' ') {
        Some((k, n)) if k == key => n.parse().or_else(|_| bad(format!("bad count in '{line}'"))),
        _ => bad(format!("expected '{key} <n>', found '{line}'")),
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f64>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.line().ok() != Some(CHECKPOINT_MAGIC) {
        return bad("not a checkpoint (bad magic)");
    }
    let n = count(c.line()?, "config")?;
    let cfg = std::str::from_utf8(c.take(n)?).or_else(|_| bad("config is not UTF-8"))?;
    let config = ModelConfig::from_toml(cfg)?;
    let n = count(c.line()?, "params")?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let header = c.line()?;
        let parts: Vec<&str> = header.split(' ').collect();
        let [name, "f64", shape] = parts[..] else {
            return bad(format!("bad parameter header '{header}'"));
        };
        let shape: Vec<usize> = if shape == "-" {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse().or_else(|_| bad(format!("bad shape in '{header}'"))))
                .collect::<Result<_>>()?
        };
        let len: usize = shape.iter().product();
        let raw = c.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return bad("trailing bytes after parameters");
    }
    Ok((config, store))
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &Esa, store: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model.config(), store)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Rebuilds the model from the stored config and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Esa, ParamStore<f64>)> {
    let bytes = fs::read(path)?;
    let (config, saved) = read_checkpoint(&bytes)?;
    let (model, mut store) = Esa::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    store
        .load_values(&saved)
        .map_err(|e| EsaError::Checkpoint(format!("parameters do not match the config: {e}")))?;
    Ok((model, store))
}
