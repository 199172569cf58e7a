//! Checkpoint serialization: a text header (version, dimensions, vocab
//! sizes, flags) followed by every parameter as raw little-endian 32-bit
//! floats in the declared order of [`EncoderParams::visit`].

use crate::hstu::{Dims, EncoderParams};
use crate::sequence::EmbeddingTables;
use std::path::Path;
use thiserror::Error;

const MAGIC: &str = "dfgr-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: expected header {MAGIC:?}")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload holds {got} parameters, header declares {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("slot name {0:?} may not contain ':', ',', or whitespace")]
    BadSlotName(String),
}

fn render_slots(names: &[String], vocabs: &[usize]) -> Result<String, CheckpointError> {
    let mut parts = Vec::with_capacity(names.len());
    for (n, &v) in names.iter().zip(vocabs) {
        if n.contains([':', ',']) || n.chars().any(char::is_whitespace) {
            return Err(CheckpointError::BadSlotName(n.clone()));
        }
        parts.push(format!("{n}:{v}"));
    }
    Ok(parts.join(","))
}

fn parse_slots(s: &str) -> Result<Vec<(String, usize)>, CheckpointError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            let (name, vocab) = p
                .split_once(':')
                .ok_or_else(|| CheckpointError::Header(format!("bad slot spec {p:?}")))?;
            let vocab = vocab
                .parse()
                .map_err(|_| CheckpointError::Header(format!("bad slot vocab in {p:?}")))?;
            Ok((name.to_string(), vocab))
        })
        .collect()
}

/// Serialize to bytes: header, `---` separator line, f32 payload.
pub fn to_bytes(enc: &EncoderParams) -> Result<Vec<u8>, CheckpointError> {
    let d = &enc.dims;
    let t = &enc.tables;
    let item_vocab = t.item.rows - 1;
    let action_vocab = t.action.rows - 2;
    let slot_vocabs: Vec<usize> = t.slots.iter().map(|s| s.rows - 1).collect();
    let profile_vocabs: Vec<usize> = t.profile_slots.iter().map(|s| s.rows - 1).collect();
    let mut count = 0usize;
    enc.visit(&mut |_, v| count += v.len());

    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!(
        "d_model={} heads={} head_dim={} layers={} pos_buckets={} time_buckets={}\n",
        d.d_model, d.heads, d.head_dim, d.layers, d.pos_buckets, d.time_buckets
    ));
    header.push_str(&format!(
        "residual={} scale_scores={}\n",
        u8::from(enc.residual),
        u8::from(enc.scale_scores)
    ));
    header.push_str(&format!(
        "item_vocab={item_vocab} action_vocab={action_vocab}\n"
    ));
    header.push_str(&format!(
        "slots={}\n",
        render_slots(&t.slot_names, &slot_vocabs)?
    ));
    header.push_str(&format!(
        "profile_slots={}\n",
        render_slots(&t.profile_slot_names, &profile_vocabs)?
    ));
    header.push_str(&format!("params={count}\n---\n"));

    let mut bytes = header.into_bytes();
    bytes.reserve(count * 4);
    enc.visit(&mut |_, v| {
        for &x in v {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    });
    Ok(bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderParams, CheckpointError> {
    let sep = b"\n---\n";
    let split = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or(CheckpointError::BadMagic)?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| CheckpointError::Header("header is not UTF-8".into()))?;
    let payload = &bytes[split + sep.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let mut kv = std::collections::HashMap::new();
    let mut slots = Vec::new();
    let mut profile_slots = Vec::new();
    for line in lines {
        for pair in line.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(format!("bad header entry {pair:?}")))?;
            match k {
                "slots" => slots = parse_slots(v)?,
                "profile_slots" => profile_slots = parse_slots(v)?,
                _ => {
                    kv.insert(k.to_string(), v.to_string());
                }
            }
        }
    }
    let get = |k: &str| -> Result<usize, CheckpointError> {
        kv.get(k)
            .ok_or_else(|| CheckpointError::Header(format!("missing header key {k}")))?
            .parse()
            .map_err(|_| CheckpointError::Header(format!("bad value for {k}")))
    };

    let d_model = get("d_model")?;
    let heads = get("heads")?;
    let head_dim = get("head_dim")?;
    let layers = get("layers")?;
    if heads == 0 || d_model != heads * head_dim {
        return Err(CheckpointError::Header(format!(
            "inconsistent dims: d_model={d_model} heads={heads} head_dim={head_dim}"
        )));
    }
    let mut dims =
        Dims::new(d_model, heads, layers).map_err(|e| CheckpointError::Header(e.to_string()))?;
    dims.pos_buckets = get("pos_buckets")?;
    dims.time_buckets = get("time_buckets")?;

    let tables = EmbeddingTables::zeros(
        d_model,
        get("item_vocab")?,
        get("action_vocab")?,
        &slots,
        &profile_slots,
    );
    let mut enc = EncoderParams::new(dims, tables, get("residual")? != 0);
    enc.scale_scores = get("scale_scores")? != 0;

    let declared = get("params")?;
    if payload.len() != declared * 4 {
        return Err(CheckpointError::PayloadSize {
            expected: declared,
            got: payload.len() / 4,
        });
    }
    let mut count = 0usize;
    enc.visit(&mut |_, v| count += v.len());
    if count != declared {
        return Err(CheckpointError::PayloadSize {
            expected: declared,
            got: count,
        });
    }

    let mut offset = 0usize;
    enc.visit_mut(&mut |_, v| {
        for x in v.iter_mut() {
            let raw = [
                payload[offset],
                payload[offset + 1],
                payload[offset + 2],
                payload[offset + 3],
            ];
            *x = f64::from(f32::from_le_bytes(raw));
            offset += 4;
        }
    });
    Ok(enc)
}

/// Write via a temporary sibling so failures never leave a partial file.
pub fn save(path: &Path, enc: &EncoderParams) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = to_bytes(enc)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn load(path: &Path) -> Result<EncoderParams, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
