//! `RSPU1` checkpoints.
//!
//! ```text
//! RSPU1
//! <key> = <value>        run configuration and optimizer scalars
//! tensors <n>
//! <name> <d0>x<d1>... <offset>
//! data
//! <little-endian f64 blocks>
//! ```
//!
//! Tensors are the model parameters in layout order, then `adam.m.<name>`
//! and `adam.v.<name>` for each parameter. Offsets count bytes from the
//! start of the data section.

use std::collections::BTreeMap;
use std::path::Path;

use rspu_core::model::DerainModel;
use rspu_core::train::{AdamState, TrainConfig};
use rspu_core::Tensor;

use crate::config;

pub const MAGIC: &str = "RSPU1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint: bad magic, expected {MAGIC}")]
    BadMagic,
    #[error("checkpoint: truncated {0}")]
    Truncated(&'static str),
    #[error("checkpoint: malformed header line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("checkpoint: manifest mismatch: {0}")]
    Manifest(String),
}

/// Everything needed to continue or reuse a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DerainModel,
    pub optimizer: AdamState,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut head = format!("{MAGIC}\n");
    for (k, v) in config::entries(&ck.config) {
        head.push_str(&format!("{k} = {v}\n"));
    }
    let o = &ck.optimizer;
    head.push_str(&format!("adam_step = {}\n", o.step));
    head.push_str(&format!("adam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\n", o.beta1, o.beta2, o.eps));

    let names = ck.model.names();
    let tensors: Vec<(String, &Tensor)> = names
        .iter()
        .cloned()
        .zip(ck.model.parameters())
        .chain(names.iter().map(|n| format!("adam.m.{n}")).zip(&o.m))
        .chain(names.iter().map(|n| format!("adam.v.{n}")).zip(&o.v))
        .collect();
    head.push_str(&format!("tensors {}\n", tensors.len()));
    let mut offset = 0usize;
    for (name, t) in &tensors {
        head.push_str(&format!("{name} {} {offset}\n", shape_text(t.shape())));
        offset += t.len() * 8;
    }
    head.push_str("data\n");
    let mut out = head.into_bytes();
    out.reserve(offset);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize, what: &'static str) -> Result<&'a str, CheckpointError> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or(CheckpointError::Truncated(what))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Truncated(what))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if !bytes.starts_with(format!("{MAGIC}\n").as_bytes()) {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = MAGIC.len() + 1;
    let mut line_no = 1;
    let header = |line: usize, reason: String| CheckpointError::Header { line, reason };

    let mut meta = BTreeMap::new();
    let count: usize = loop {
        line_no += 1;
        let line = take_line(bytes, &mut pos, "header")?;
        if let Some(n) = line.strip_prefix("tensors ") {
            break n.parse().map_err(|_| header(line_no, "bad tensor count".into()))?;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| header(line_no, format!("expected `key = value`, got {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    };

    let mut cfg = TrainConfig::default();
    for key in config::KEYS {
        let v = meta.remove(key).ok_or_else(|| header(0, format!("missing key {key}")))?;
        config::set(&mut cfg, key, &v).map_err(|e| header(0, e.to_string()))?;
    }
    let mut scalar = |key: &str| -> Result<String, CheckpointError> {
        meta.remove(key).ok_or_else(|| header(0, format!("missing key {key}")))
    };
    let step: u64 = scalar("adam_step")?.parse().map_err(|_| header(0, "bad adam_step".into()))?;
    let mut betas = [0.0f64; 3];
    for (b, key) in betas.iter_mut().zip(["adam_beta1", "adam_beta2", "adam_eps"]) {
        *b = scalar(key)?.parse().map_err(|_| header(0, format!("bad {key}")))?;
    }
    if let Some(k) = meta.keys().next() {
        return Err(header(0, format!("unknown key {k}")));
    }

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        line_no += 1;
        let line = take_line(bytes, &mut pos, "manifest")?;
        let parts: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset] = parts[..] else {
            return Err(header(line_no, format!("expected `name shape offset`, got {line:?}")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| header(line_no, format!("bad shape {shape:?}")))?;
        let offset: usize = offset.parse().map_err(|_| header(line_no, "bad offset".into()))?;
        manifest.push((name.to_string(), shape, offset));
    }
    if take_line(bytes, &mut pos, "manifest")? != "data" {
        return Err(header(line_no + 1, "expected `data`".into()));
    }

    let data = &bytes[pos..];
    let mut expected_offset = 0usize;
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        if offset != expected_offset {
            return Err(CheckpointError::Manifest(format!("{name}: offset {offset}, expected {expected_offset}")));
        }
        let len: usize = shape.iter().product();
        let end = offset + len * 8;
        let block = data.get(offset..end).ok_or(CheckpointError::Truncated("data"))?;
        let values = block.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, values).map_err(|e| CheckpointError::Manifest(format!("{name}: {e}")))?;
        tensors.push((name, t));
        expected_offset = end;
    }
    if data.len() != expected_offset {
        return Err(CheckpointError::Manifest(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_offset
        )));
    }

    let n = tensors.len() / 3;
    if tensors.len() != 3 * n {
        return Err(CheckpointError::Manifest("tensor count is not params + two moment sets".into()));
    }
    let v: Vec<_> = tensors.split_off(2 * n);
    let m: Vec<_> = tensors.split_off(n);
    let model = DerainModel::from_parameters(&cfg.model, tensors)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let moments = |set: Vec<(String, Tensor)>, prefix: &str| -> Result<Vec<Tensor>, CheckpointError> {
        set.into_iter()
            .zip(model.names())
            .map(|((name, t), pname)| {
                if name != format!("{prefix}{pname}") {
                    return Err(CheckpointError::Manifest(format!("expected {prefix}{pname}, found {name}")));
                }
                Ok(t)
            })
            .collect()
    };
    let optimizer = AdamState {
        beta1: betas[0],
        beta2: betas[1],
        eps: betas[2],
        step,
        m: moments(m, "adam.m.")?,
        v: moments(v, "adam.v.")?,
    };
    optimizer
        .check(model.parameters())
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok(Checkpoint {
        config: cfg,
        model,
        optimizer,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> crate::CliResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(ck)).map_err(crate::CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(crate::CliError::io(path))
}

pub fn load(path: &Path) -> crate::CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(crate::CliError::io(path))?;
    Ok(decode(&bytes)?)
}
