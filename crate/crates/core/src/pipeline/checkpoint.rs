//! Flat-file weight snapshots: a plain-text shape manifest followed by raw
//! little-endian f32 data in manifest order.
//!
//! ```text
//! mdic-checkpoint 1
//! vae.0 8 3 3 3
//! vae.1 8
//! data
//! <4 * numel bytes per entry, concatenated>
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{PipelineError, PipelineResult};
use crate::tensor::Tensor;

const MAGIC_LINE: &str = "mdic-checkpoint 1";

fn bad(what: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(what.into())
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> PipelineResult<()> {
    let mut header = String::from(MAGIC_LINE);
    header.push('\n');
    let mut seen = HashMap::new();
    for (name, t) in entries {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad(format!("invalid entry name {name:?}")));
        }
        if seen.insert(name.clone(), ()).is_some() {
            return Err(bad(format!("duplicate entry name {name:?}")));
        }
        header.push_str(name);
        for d in t.shape() {
            header.push(' ');
            header.push_str(&d.to_string());
        }
        header.push('\n');
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for (_, t) in entries {
        for v in t.to_vec() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a snapshot back as `name -> (shape, values)` in file order.
pub fn load(path: &Path) -> PipelineResult<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let bytes = fs::read(path)?;
    let data_start = find_data_offset(&bytes)?;
    let header = std::str::from_utf8(&bytes[..data_start])
        .map_err(|_| bad("header is not valid utf-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC_LINE) {
        return Err(bad(format!("expected first line {MAGIC_LINE:?}")));
    }
    let mut entries = Vec::new();
    let mut seen = HashMap::new();
    let mut total = 0usize;
    for line in lines {
        if line == "data" {
            break;
        }
        let mut parts = line.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("empty manifest line"))?;
        if seen.insert(name.to_string(), ()).is_some() {
            return Err(bad(format!("duplicate entry name {name:?}")));
        }
        let mut shape = Vec::new();
        for p in parts {
            let d: usize = p.parse().map_err(|_| bad(format!("bad dimension {p:?} for {name:?}")))?;
            shape.push(d);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(bad(format!("entry {name:?} has an empty or zero shape")));
        }
        total += shape.iter().product::<usize>();
        entries.push((name.to_string(), shape));
    }
    let payload = &bytes[data_start..];
    if payload.len() != total * 4 {
        return Err(bad(format!("expected {} data bytes, found {}", total * 4, payload.len())));
    }
    let mut out = Vec::with_capacity(entries.len());
    let mut offset = 0;
    for (name, shape) in entries {
        let n = shape.iter().product::<usize>();
        let values: Vec<f32> = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += 4 * n;
        out.push((name, shape, values));
    }
    Ok(out)
}

fn find_data_offset(bytes: &[u8]) -> PipelineResult<usize> {
    let needle = b"\ndata\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .ok_or_else(|| bad("no data marker found"))
}
