//! Binary checkpoint format.
//!
//! Layout: magic `FFCKPT01`; a length-prefixed UTF-8 metadata block of
//! `key=value` lines; tensor records (u32 name length, name bytes, u32
//! rank, u32 extents, raw little-endian f32 values); a u32 record-count
//! footer. All multi-byte integers are little-endian. No timestamps are
//! written, so load followed by save is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::{ModelGraph, ParamStore};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"FFCKPT01";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic at byte offset 0: expected FFCKPT01")]
    BadMagic,
    #[error("truncated checkpoint at byte offset {offset}: {detail}")]
    Truncated { offset: usize, detail: String },
    #[error("malformed checkpoint at byte offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
}

/// Serialized named parameters, optimizer state, and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Ordered key=value metadata lines.
    pub meta: Vec<(String, String)>,
    /// Ordered tensor records: name, extents, values.
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub extents: Vec<usize>,
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let mut count = 0u32;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.extents.len() as u32).to_le_bytes());
            for &e in &t.extents {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            count += 1;
        }
        out.extend_from_slice(&count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<usize, CheckpointError> {
            if *pos + n > bytes.len() {
                return Err(CheckpointError::Truncated {
                    offset: *pos,
                    detail: format!("expected {n} bytes for {what}"),
                });
            }
            let at = *pos;
            *pos += n;
            Ok(at)
        };
        let u32_at = |pos: &mut usize, what: &str| -> Result<u32, CheckpointError> {
            let at = take(pos, 4, what)?;
            Ok(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()))
        };

        let at = take(&mut pos, 8, "magic")?;
        if &bytes[at..at + 8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let meta_len = u32_at(&mut pos, "metadata length")? as usize;
        let at = take(&mut pos, meta_len, "metadata block")?;
        let meta_text = std::str::from_utf8(&bytes[at..at + meta_len]).map_err(|e| {
            CheckpointError::Malformed {
                offset: at + e.valid_up_to(),
                detail: "metadata is not valid UTF-8".into(),
            }
        })?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CheckpointError::Malformed {
                    offset: at,
                    detail: format!("metadata line without '=': {line}"),
                });
            };
            meta.push((k.to_string(), v.to_string()));
        }

        let mut tensors = Vec::new();
        loop {
            // Either a name-length header for the next record or the
            // 4-byte record-count footer ending the file.
            let header_at = pos;
            let word = u32_at(&mut pos, "record header or footer")?;
            if pos == bytes.len() {
                let count = word as usize;
                if count != tensors.len() {
                    return Err(CheckpointError::Malformed {
                        offset: header_at,
                        detail: format!(
                            "footer declares {count} records but {} were read",
                            tensors.len()
                        ),
                    });
                }
                return Ok(Checkpoint { meta, tensors });
            }
            let name_len = word as usize;
            let at = take(&mut pos, name_len, "tensor name")?;
            let name = std::str::from_utf8(&bytes[at..at + name_len])
                .map_err(|_| CheckpointError::Malformed {
                    offset: at,
                    detail: "tensor name is not valid UTF-8".into(),
                })?
                .to_string();
            let rank = u32_at(&mut pos, "rank")? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed {
                    offset: pos - 4,
                    detail: format!("implausible rank {rank}"),
                });
            }
            let mut extents = Vec::with_capacity(rank);
            for _ in 0..rank {
                extents.push(u32_at(&mut pos, "extent")? as usize);
            }
            let numel: usize = extents.iter().product();
            let at = take(&mut pos, numel * 4, "tensor values")?;
            let values = bytes[at..at + numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(TensorRecord {
                name,
                extents,
                values,
            });
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Capture a model's parameters and running statistics (plus, optionally,
/// optimizer moments under `opt.*` names) into a checkpoint.
pub fn snapshot(model: &ModelGraph<f32>, optimizer: Option<&AdamState>) -> Checkpoint {
    let mut meta = vec![
        ("version".to_string(), FORMAT_VERSION.to_string()),
        ("arch".to_string(), model.arch.tag()),
    ];
    if let crate::graph::Arch::Unet {
        base_channels,
        depth,
    } = model.arch
    {
        meta.push(("unet.base_channels".into(), base_channels.to_string()));
        meta.push(("unet.depth".into(), depth.to_string()));
    }
    let mut tensors: Vec<TensorRecord> = model
        .params
        .iter()
        .map(|p| TensorRecord {
            name: p.name.clone(),
            extents: p.shape.clone(),
            values: p.data.clone(),
        })
        .collect();
    if let Some(opt) = optimizer {
        meta.push(("opt.t".into(), opt.t.to_string()));
        meta.push(("opt.alpha".into(), format!("{}", opt.alpha)));
        let (m, v) = opt.moments();
        for (i, p) in model.params.iter().enumerate() {
            if !p.kind.is_learnable() {
                continue;
            }
            tensors.push(TensorRecord {
                name: format!("opt.m.{}", p.name),
                extents: p.shape.clone(),
                values: m[i].clone(),
            });
            tensors.push(TensorRecord {
                name: format!("opt.v.{}", p.name),
                extents: p.shape.clone(),
                values: v[i].clone(),
            });
        }
    }
    Checkpoint { meta, tensors }
}

/// All learnable tensors and BN statistics copied into `model`; optimizer
/// state is never carried. Any name or shape mismatch rejects the whole
/// transfer, listing every differing tensor.
pub fn transfer(ckpt: &Checkpoint, model: &mut ModelGraph<f32>) -> Result<(), String> {
    let want_tag = model.arch.tag();
    let have_tag = ckpt.meta_get("arch").unwrap_or("<missing>");
    if have_tag != want_tag {
        return Err(format!(
            "architecture mismatch: checkpoint is '{have_tag}', model is '{want_tag}'"
        ));
    }
    if let crate::graph::Arch::Unet {
        base_channels,
        depth,
    } = model.arch
    {
        for (key, want) in [
            ("unet.base_channels", base_channels),
            ("unet.depth", depth),
        ] {
            let have = ckpt.meta_get(key).unwrap_or("<missing>");
            if have != want.to_string() {
                return Err(format!(
                    "hyperparameter mismatch: {key} is {have} in the checkpoint, {want} in the model"
                ));
            }
        }
    }
    let mut problems = Vec::new();
    for p in model.params.iter() {
        match ckpt.tensor(&p.name) {
            None => problems.push(format!("missing tensor '{}'", p.name)),
            Some(t) if t.extents != p.shape => problems.push(format!(
                "shape mismatch for '{}': checkpoint {:?}, model {:?}",
                p.name, t.extents, p.shape
            )),
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(format!(
            "transfer rejected; differing tensors: {}",
            problems.join("; ")
        ));
    }
    for p in model.params.iter_mut() {
        let t = ckpt.tensor(&p.name).unwrap();
        p.data.copy_from_slice(&t.values);
        p.grad = None;
        p.initialized = true;
    }
    Ok(())
}

/// Rebuild Adam moments saved by [`snapshot`]; `None` when the checkpoint
/// carries no optimizer state.
pub fn load_optimizer(
    ckpt: &Checkpoint,
    params: &ParamStore<f32>,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
) -> Option<AdamState> {
    let t: u64 = ckpt.meta_get("opt.t")?.parse().ok()?;
    let alpha: f32 = ckpt.meta_get("opt.alpha")?.parse().ok()?;
    let mut state = AdamState::new(params, alpha, beta1, beta2, epsilon);
    state.t = t;
    {
        let (m, v) = state.moments_mut();
        for (i, p) in params.iter().enumerate() {
            if !p.kind.is_learnable() {
                continue;
            }
            m[i].copy_from_slice(&ckpt.tensor(&format!("opt.m.{}", p.name))?.values);
            v[i].copy_from_slice(&ckpt.tensor(&format!("opt.v.{}", p.name))?.values);
        }
    }
    Some(state)
}
