use std::fs;
use std::io::Write;
use std::path::Path;

use super::{parameter_specs, ModelConfig, ModelParameters};
use crate::config::KeyValues;
use crate::numerics::{Precision, Tensor};
use crate::{Error, Result};

const MAGIC: &str = "cadb-checkpoint v1";
const END: &str = "end";

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParameters,
    /// Free-form `meta.*` entries (epoch, metrics, ...).
    pub meta: KeyValues,
}

/// Encodes the header and little-endian f32 payload.
pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParameters, meta: &KeyValues) -> Result<Vec<u8>> {
    params.check_against(config)?;
    let mut header = format!("{MAGIC}\n");
    header.push_str(&config.to_key_values().render());
    for (k, v) in meta.iter() {
        if !k.starts_with("meta.") || v.contains('\n') {
            return Err(Error::Checkpoint(format!("invalid metadata entry '{k}'")));
        }
        header.push_str(&format!("{k} = {v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {offset}\n", dims.join("x")));
        offset += 4 * t.numel();
    }
    header.push_str(&format!("{END}\n"));
    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, t) in params.iter() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let n = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        pos += n + 1;
        std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not UTF-8".into()))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic line)".into()));
    }
    let mut config = ModelConfig::full_size();
    let mut meta = KeyValues::new();
    let mut manifest: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        let line = next_line()?;
        if line == END {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 3 {
                return Err(bad(format!("malformed manifest line '{line}'")));
            }
            let shape = parts[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape in '{line}'")))?;
            let offset = parts[2].parse().map_err(|_| bad(format!("bad offset in '{line}'")))?;
            manifest.push((parts[0].to_string(), shape, offset));
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed header line '{line}'")))?;
        if k.starts_with("meta.") {
            meta.push(k, v);
        } else if !config.set(k, v)? {
            return Err(bad(format!("unknown header key '{k}'")));
        }
    }
    config.validate()?;
    let payload = &bytes[pos..];
    let mut params = ModelParameters::new();
    let mut expected_offset = 0;
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        if offset != expected_offset || offset + 4 * n > payload.len() {
            return Err(bad(format!("tensor {name}: payload offset {offset} out of range")));
        }
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(&name, Tensor::with_precision(&shape, data, Precision::Single)?)?;
        expected_offset = offset + 4 * n;
    }
    if expected_offset != payload.len() {
        return Err(bad(format!(
            "payload has {} bytes, manifest describes {expected_offset}",
            payload.len()
        )));
    }
    params.check_against(&config)?;
    Ok(Checkpoint { config, params, meta })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParameters, meta: &KeyValues) -> Result<()> {
    let bytes = encode_checkpoint(config, params, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => Error::Checkpoint(format!("{}: {other}", path.display())),
    })
}

/// Loads and rejects any difference from `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.config != expected {
        let ours = expected.to_key_values();
        let diff: Vec<String> = ck
            .config
            .to_key_values()
            .iter()
            .filter(|(k, v)| ours.get(k) != Some(*v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, config {}", ours.get(k).unwrap_or("?")))
            .collect();
        return Err(Error::Checkpoint(format!(
            "{} does not match the configuration ({})",
            path.display(),
            diff.join("; ")
        )));
    }
    debug_assert_eq!(parameter_specs(expected).len(), ck.params.len());
    Ok(ck)
}
