//! Parameter archives with a JSON sidecar.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! b"OXCK"  u32 version  u32 param_count
//! per param: u32 name_len, name, u32 ndim, u32 dims[ndim], f32 values[prod(dims)]
//! u8 has_optimizer
//! if 1: u64 step, f32 beta1, f32 beta2, f32 eps, f32 weight_decay,
//!       then per param f32 m[len] followed by f32 v[len]
//! ```
//!
//! `<stem>.meta.json` next to the archive records the kind, config, seed,
//! step, code version and a SHA-256 digest of the parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Module, ParamStore};

const MAGIC: &[u8; 4] = b"OXCK";
const VERSION: u32 = 1;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub code_version: String,
    pub seed: u64,
    pub step: u64,
    pub config: serde_json::Value,
    pub param_digest: String,
}

impl CheckpointMeta {
    pub fn new(kind: &str, seed: u64, step: u64, config: &impl Serialize, model: &dyn Module) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            code_version: CODE_VERSION.to_string(),
            seed,
            step,
            config: serde_json::to_value(config)?,
            param_digest: ParamStore::capture(model).digest(),
        })
    }
}

/// `dir/name.oxck` -> `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, model: &dyn Module, optimizer: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let mut count = 0u32;
    model.visit(&mut |_| count += 1);
    put_u32(&mut buf, count);
    model.visit(&mut |p| {
        put_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.shape.len() as u32);
        for d in &p.shape {
            put_u32(&mut buf, *d as u32);
        }
        put_f32s(&mut buf, &p.value);
    });
    match optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step.to_le_bytes());
            let c = opt.config;
            put_f32s(&mut buf, &[c.beta1, c.beta2, c.eps, c.weight_decay]);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_f32s(&mut buf, m);
                put_f32s(&mut buf, v);
            }
        }
    }
    std::fs::write(path, buf)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err("unexpected end of archive"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint metadata {}", side.display())),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads parameters into `model` (names and shapes must match) and returns
/// the metadata plus optimizer state when present.
pub fn load_checkpoint(path: &Path, model: &mut dyn Module) -> Result<(CheckpointMeta, Option<AdamW>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
        _ => Error::Io(e),
    })?;
    let meta = read_meta(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(cur.err("missing OXCK header"));
    }
    if cur.u32()? != VERSION {
        return Err(cur.err("unsupported archive version"));
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| cur.err("parameter name is not UTF-8"))?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let values = cur.f32s(shape.iter().product())?;
        records.push((name, shape, values));
    }
    let optimizer = match cur.take(1)?[0] {
        0 => None,
        1 => {
            let step = cur.u64()?;
            let c = cur.f32s(4)?;
            let config = AdamWConfig {
                beta1: c[0],
                beta2: c[1],
                eps: c[2],
                weight_decay: c[3],
            };
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for (_, _, values) in &records {
                m.push(cur.f32s(values.len())?);
                v.push(cur.f32s(values.len())?);
            }
            Some(AdamW { config, step, m, v })
        }
        _ => return Err(cur.err("bad optimizer flag")),
    };
    if cur.pos != bytes.len() {
        return Err(cur.err("trailing bytes after archive"));
    }
    let mut i = 0;
    let mut mismatch = None;
    model.visit_mut(&mut |p| {
        match records.get(i) {
            Some((name, shape, values)) if *name == p.name && *shape == p.shape => p.value.copy_from_slice(values),
            Some((name, shape, _)) => {
                mismatch.get_or_insert(format!("expected {} {:?}, archive has {name} {shape:?}", p.name, p.shape));
            }
            None => {
                mismatch.get_or_insert(format!("archive lacks {}", p.name));
            }
        }
        i += 1;
    });
    if let Some(m) = mismatch {
        return Err(cur.err(&m));
    }
    if i != records.len() {
        return Err(cur.err("archive has more parameters than the model"));
    }
    if ParamStore::capture(model).digest() != meta.param_digest {
        return Err(cur.err("parameter digest does not match the sidecar"));
    }
    Ok((meta, optimizer))
}

fn expect_kind(meta: &CheckpointMeta, kind: &str, path: &Path) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a {kind} checkpoint, found {}", meta.kind),
        });
    }
    Ok(())
}

pub fn load_backbone(path: &Path) -> Result<(Backbone, CheckpointMeta)> {
    let meta = read_meta(path)?;
    expect_kind(&meta, "backbone", path)?;
    let config: BackboneConfig = serde_json::from_value(meta.config.clone())?;
    let mut model = Backbone::new(config, meta.seed)?;
    let (meta, _) = load_checkpoint(path, &mut model)?;
    Ok((model, meta))
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, CheckpointMeta)> {
    let meta = read_meta(path)?;
    expect_kind(&meta, "classifier", path)?;
    let config: ClassifierConfig = serde_json::from_value(meta.config.clone())?;
    let mut model = Classifier::new(config, meta.seed)?;
    let (meta, _) = load_checkpoint(path, &mut model)?;
    Ok((model, meta))
}
