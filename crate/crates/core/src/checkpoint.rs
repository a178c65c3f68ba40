//! Binary checkpoints of named tensors.
//!
//! Layout, all little-endian: magic `DDSP`, version `u32`, tensor count `u32`,
//! then per tensor a `u16` name length, the UTF-8 name, a dtype tag `u8`
//! (0 = f32, 1 = f64), rank `u8`, `rank` dims as `u32`, and the raw values.
//!
//! The model configuration is kept beside the weights in `<path>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::norm::RunningStats;
use crate::param::{Entry, Module};

pub const MAGIC: &[u8; 4] = b"DDSP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes f64 tensors.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| corrupt("too many tensors"))?;
    w.write_all(&count.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| corrupt(format!("name too long: {}", t.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DType::F64 as u8])?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| corrupt("rank above 255"))?;
        w.write_all(&[rank])?;
        for &d in &t.dims {
            let d = u32::try_from(d).map_err(|_| corrupt("dimension above u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        if t.dims.iter().product::<usize>() != t.values.len() {
            return Err(corrupt(format!("{}: dims do not match value count", t.name)));
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => corrupt("truncated checkpoint"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Reads tensors of either dtype, widening f32 to f64.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| corrupt("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let [tag] = read_exact::<_, 1>(&mut r)?;
        let dtype = match tag {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(corrupt(format!("{name}: unknown dtype tag {t}"))),
        };
        let [rank] = read_exact::<_, 1>(&mut r)?;
        let dims = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_exact(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("{name}: element count overflows")))?;
        let mut values = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            values.push(match dtype {
                DType::F32 => f32::from_le_bytes(read_exact(&mut r)?) as f64,
                DType::F64 => f64::from_le_bytes(read_exact(&mut r)?),
            });
        }
        out.push(NamedTensor { name, dims, values });
    }
    Ok(out)
}

/// Every parameter as a rank-4 tensor and every set of running statistics as
/// two rank-1 tensors, `<name>.mean` and `<name>.var`.
pub fn collect<M: Module + ?Sized>(module: &M) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    module.visit("", &mut |name, entry| match entry {
        Entry::Param(p) => {
            let t = p.get();
            out.push(NamedTensor {
                name,
                dims: t.shape().dims().to_vec(),
                values: t.to_vec(),
            });
        }
        Entry::Stats(s) => {
            let s = s.borrow();
            for (suffix, v) in [("mean", &s.mean), ("var", &s.var)] {
                out.push(NamedTensor {
                    name: format!("{name}.{suffix}"),
                    dims: vec![v.len()],
                    values: v.clone(),
                });
            }
        }
    });
    out
}

/// Loads tensors into `module`. Every slot must be present with matching
/// dims and no tensor may be left over.
pub fn restore<M: Module + ?Sized>(module: &M, tensors: Vec<NamedTensor>) -> Result<()> {
    let mut by_name: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for t in tensors {
        if by_name.contains_key(&t.name) {
            return Err(corrupt(format!("duplicate tensor {}", t.name)));
        }
        by_name.insert(t.name.clone(), t);
    }
    let mut result = Ok(());
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let t = by_name
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(corrupt(format!("{name}: dims {:?}, model expects {dims:?}", t.dims)));
        }
        Ok(t.values)
    };
    module.visit("", &mut |name, entry| {
        if result.is_err() {
            return;
        }
        result = (|| match entry {
            Entry::Param(p) => p.set_data(take(&name, &p.shape().dims())?),
            Entry::Stats(s) => {
                let c = s.borrow().mean.len();
                let mean = take(&format!("{name}.mean"), &[c])?;
                let var = take(&format!("{name}.var"), &[c])?;
                *s.borrow_mut() = RunningStats { mean, var };
                Ok(())
            }
        })();
    });
    result?;
    if let Some(extra) = by_name.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

pub fn config_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes the weights to `path` and the configuration to `<path>.json`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &collect(model))?;
    fs::write(path, buf)?;
    let json = serde_json::to_string_pretty(&model.config).map_err(|e| corrupt(e.to_string()))?;
    fs::write(config_path(path), json + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let cfg_path = config_path(path);
    let json = fs::read_to_string(&cfg_path)
        .map_err(|e| corrupt(format!("{}: {e}", cfg_path.display())))?;
    let config: ModelConfig =
        serde_json::from_str(&json).map_err(|e| corrupt(format!("{}: {e}", cfg_path.display())))?;
    let model = Model::new(config, 0).map_err(|e| corrupt(format!("stored configuration: {e}")))?;
    let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    restore(&model, read_tensors(bytes.as_slice())?)?;
    Ok(model)
}
