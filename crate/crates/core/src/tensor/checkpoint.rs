//! Binary checkpoint format.
//!
//! ```text
//! DSMSCKPT <version>\n
//! <count>\n
//! <name> <n>x<c>x<h>x<w> <byte offset>\n     (count lines)
//! <payload: little-endian f32, offsets relative to payload start>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::param::ParamStore;
use super::{numel, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "DSMSCKPT";

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\n{}\n", store.len());
    let mut payload: Vec<u8> = Vec::with_capacity(store.total_count() * 4);
    for p in store.iter() {
        let [n, c, h, w] = p.tensor.shape();
        header.push_str(&format!("{} {n}x{c}x{h}x{w} {}\n", p.name, payload.len()));
        for v in p.tensor.data() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path, e))
}

/// Reads every named tensor of a checkpoint file.
pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut next_line = |what: &str| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, format!("truncated header ({what})")))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::format(path, "header is not utf-8"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };

    let magic = next_line("magic")?;
    let version = magic
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::format(path, "missing DSMSCKPT magic"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count: usize = next_line("count")?
        .trim()
        .parse()
        .map_err(|_| Error::format(path, "bad parameter count"))?;

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line("manifest")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dims, offset] = parts[..] else {
            return Err(Error::format(path, format!("bad manifest line {line:?}")));
        };
        let dims: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad shape in {line:?}")))?;
        let shape: Shape = dims
            .try_into()
            .map_err(|_| Error::format(path, format!("shape must have 4 dims in {line:?}")))?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::format(path, format!("bad offset in {line:?}")))?;
        manifest.push((name.to_string(), shape, offset));
    }
    let payload = &bytes[pos..];
    manifest
        .into_iter()
        .map(|(name, shape, offset)| {
            let len = numel(&shape) * 4;
            let raw = payload
                .get(offset..offset + len)
                .ok_or_else(|| Error::format(path, format!("payload of {name} out of range")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
                .collect();
            Ok((name, Tensor::from_vec(shape, data)))
        })
        .collect()
}

/// Loads a checkpoint into an already-constructed store, validating every
/// parameter name and shape.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let values = read_checkpoint(path)?;
    store.assign(values)
}
