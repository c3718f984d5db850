//! Parameter snapshots.
//!
//! A snapshot is a flat binary record plus a plain-text manifest. The
//! record stores, per tensor: a length-prefixed name, the four shape
//! extents, and the values as 64-bit little-endian floats. The manifest
//! lists the same inventory in readable form so a snapshot can be
//! inspected without tooling.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Shape, Tensor};

const MAGIC: &[u8; 8] = b"NRMSNAP1";

/// Paths of the two files a snapshot occupies, derived from a base path.
#[derive(Clone, Debug)]
pub struct SnapshotPaths {
    pub record: PathBuf,
    pub manifest: PathBuf,
}

impl SnapshotPaths {
    pub fn new(base: impl AsRef<Path>) -> Self {
        let base = base.as_ref();
        SnapshotPaths {
            record: base.with_extension("bin"),
            manifest: base.with_extension("manifest"),
        }
    }
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "record truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(b))
    }
}

/// Serializes named tensors into the binary record.
fn encode<E: Element>(entries: &[(String, &Tensor<E>)]) -> Vec<u8> {
    let total: usize = entries.iter().map(|(_, t)| t.data().len()).sum();
    let mut buf = Vec::with_capacity(16 + entries.len() * 64 + total * 8);
    buf.extend_from_slice(MAGIC);
    write_u64(&mut buf, entries.len() as u64);
    for (name, t) in entries {
        write_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for dim in [s.m, s.c, s.h, s.w] {
            write_u64(&mut buf, dim as u64);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    buf
}

fn render_manifest<E: Element>(entries: &[(String, &Tensor<E>)]) -> String {
    let mut out = String::new();
    out.push_str("snapshot 1\n");
    out.push_str(&format!("tensors {}\n", entries.len()));
    for (name, t) in entries {
        let s = t.shape();
        out.push_str(&format!(
            "{name} {}x{}x{}x{} {}\n",
            s.m,
            s.c,
            s.h,
            s.w,
            t.data().len()
        ));
    }
    out
}

/// Writes named tensors as a binary record and plain-text manifest next
/// to each other under the base path.
pub fn save_snapshot<E: Element>(
    base: impl AsRef<Path>,
    entries: &[(String, &Tensor<E>)],
) -> Result<SnapshotPaths> {
    let paths = SnapshotPaths::new(base);
    if let Some(dir) = paths.record.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(&paths.record).map_err(|e| Error::io(&paths.record, e))?;
    f.write_all(&encode(entries))
        .map_err(|e| Error::io(&paths.record, e))?;
    fs::write(&paths.manifest, render_manifest(entries))
        .map_err(|e| Error::io(&paths.manifest, e))?;
    Ok(paths)
}

/// Reads a snapshot record back into named tensors.
pub fn load_snapshot<E: Element>(base: impl AsRef<Path>) -> Result<Vec<(String, Tensor<E>)>> {
    let paths = SnapshotPaths::new(base);
    let mut bytes = Vec::new();
    fs::File::open(&paths.record)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&paths.record, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::format("record does not start with the snapshot magic"));
    }
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("tensor name is not valid UTF-8"))?
            .to_string();
        let m = r.u64()? as usize;
        let c = r.u64()? as usize;
        let h = r.u64()? as usize;
        let w = r.u64()? as usize;
        let shape = Shape::new(m, c, h, w);
        let mut data = Vec::with_capacity(shape.count());
        for _ in 0..shape.count() {
            data.push(E::from_f64(r.f64()?));
        }
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Saves every model parameter under its parameter name.
pub fn save_model<E: Element>(base: impl AsRef<Path>, model: &Model<E>) -> Result<SnapshotPaths> {
    let entries: Vec<(String, &Tensor<E>)> = model
        .param_infos()
        .iter()
        .zip(model.params())
        .map(|(info, t)| (info.name.clone(), t))
        .collect();
    save_snapshot(base, &entries)
}

/// Restores model parameters from a snapshot. Every parameter must be
/// present under its exact name with its exact shape.
pub fn load_model<E: Element>(base: impl AsRef<Path>, model: &mut Model<E>) -> Result<()> {
    let entries = load_snapshot::<E>(base)?;
    let mut new_params: Vec<Tensor<E>> = Vec::with_capacity(model.params().len());
    for (info, have) in model.param_infos().iter().zip(model.params()) {
        let found = entries
            .iter()
            .find(|(name, _)| *name == info.name)
            .ok_or_else(|| Error::format(format!("snapshot is missing tensor {}", info.name)))?;
        if found.1.shape() != have.shape() {
            return Err(Error::Shape(format!(
                "snapshot tensor {} has shape {}, model expects {}",
                info.name,
                found.1.shape(),
                have.shape()
            )));
        }
        new_params.push(found.1.clone());
    }
    model.set_params(new_params)
}
