//! The `FDL1` model artifact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FDL1"
//! u32 header length, header bytes (compact JSON: format_version, name,
//!     input_shape, layers, norm_stats)
//! for each parametric layer in graph order:
//!     u32 name length, name bytes (UTF-8)
//!     u8 tensor count (2, or 4 for batch norm)
//!     per tensor: u32 rank, rank x u32 dims, f32 data
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Tensors are weights, bias and, for batch norm, moving mean and variance.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelGraph, WeightStore};
use crate::augment::NormStats;
use crate::error::{Error, Result};
use crate::ops::{LayerParams, RunningStats};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    norm_stats: NormStats,
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ArtifactFormat(format!("{what} {v} exceeds 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    push_u32(out, t.rank(), "rank")?;
    for &d in t.shape() {
        push_u32(out, d, "dimension")?;
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialize a graph and its normalization statistics.
pub fn write_artifact(graph: &ModelGraph, stats: &NormStats) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        name: graph.name().to_string(),
        input_shape: graph.input_shape().to_vec(),
        layers: graph.layers().to_vec(),
        norm_stats: *stats,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::ArtifactFormat(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, json.len(), "header length")?;
    out.extend_from_slice(&json);
    for spec in graph.layers().iter().filter(|l| l.is_parametric()) {
        let p = graph
            .weights()
            .get(&spec.name)
            .ok_or_else(|| Error::config(format!("no parameters for layer `{}`", spec.name)))?;
        push_u32(&mut out, spec.name.len(), "name length")?;
        out.extend_from_slice(spec.name.as_bytes());
        let tensors = p.tensors();
        out.push(tensors.len() as u8);
        for t in tensors {
            push_tensor(&mut out, t)?;
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::ArtifactTruncated(format!(
                "{what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self, layer: &str) -> Result<Tensor> {
        let rank = self.u32("tensor rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::ArtifactFormat(format!("layer `{layer}`: tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dimension")?);
        }
        let bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ArtifactFormat(format!("layer `{layer}`: tensor shape {shape:?} overflows")))?;
        let raw = self.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::ArtifactFormat(format!("layer `{layer}`: {e}")))
    }
}

/// Parse an artifact. Structure is checked first (so truncation is
/// reported as such), then the checksum, then the graph itself.
pub fn read_artifact(bytes: &[u8]) -> Result<(ModelGraph, NormStats)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if &magic[..3] != b"FDL" {
        return Err(Error::ArtifactFormat(format!("bad magic {magic:?}")));
    }
    if magic[3] != MAGIC[3] {
        return Err(Error::ArtifactVersion {
            found: String::from_utf8_lossy(&magic[3..]).into_owned(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let header_len = r.u32("header length")?;
    let header_bytes = r.take(header_len, "header")?;

    // Parse the header leniently enough to learn the version before the
    // full schema applies.
    let raw: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| Error::ArtifactFormat(format!("header: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::ArtifactVersion {
            found: version.map_or_else(|| "none".into(), |v| v.to_string()),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::ArtifactFormat(format!("header: {e}")))?;

    let mut blocks = Vec::new();
    for spec in header.layers.iter().filter(|l| l.is_parametric()) {
        let name_len = r.u32("layer name length")?;
        let name = std::str::from_utf8(r.take(name_len, "layer name")?)
            .map_err(|_| Error::ArtifactFormat("layer name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::ArtifactFormat(format!(
                "expected parameters of `{}`, found `{name}`",
                spec.name
            )));
        }
        let count = r.take(1, "tensor count")?[0] as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor(name)?);
        }
        blocks.push((spec.name.clone(), tensors));
    }
    let body_len = r.pos;
    let stored = r.u32("checksum")? as u32;
    if r.pos != bytes.len() {
        return Err(Error::ArtifactFormat(format!(
            "{} unexpected trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::ArtifactChecksum { stored, computed });
    }

    let mut store = WeightStore::new();
    for (name, tensors) in blocks {
        let mut it = tensors.into_iter();
        let params = match (it.next(), it.next(), it.next(), it.next(), it.next()) {
            (Some(w), Some(b), None, None, None) => LayerParams::new(w, b),
            (Some(w), Some(b), Some(mean), Some(var), None) => {
                let mut p = LayerParams::new(w, b);
                p.running = Some(RunningStats { mean, var });
                p
            }
            _ => {
                return Err(Error::ArtifactFormat(format!(
                    "layer `{name}` must hold 2 or 4 tensors"
                )))
            }
        };
        store.insert(name, params);
    }
    header.norm_stats.validate().map_err(|e| Error::ArtifactFormat(e.to_string()))?;
    let graph = ModelGraph::from_parts(header.name, header.input_shape, header.layers, store)
        .map_err(|e| Error::ArtifactFormat(e.to_string()))?;
    Ok((graph, header.norm_stats))
}

/// Write the artifact through a temporary file in the same directory and
/// rename it into place.
pub fn save_model(graph: &ModelGraph, stats: &NormStats, path: &Path) -> Result<()> {
    let bytes = write_artifact(graph, stats)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::file(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::file(path, e)
    })
}

pub fn load_model(path: &Path) -> Result<(ModelGraph, NormStats)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    read_artifact(&bytes)
}

/// Copy parameters for every parametric layer of `graph` from the artifact
/// at `path`, matched by layer name. Either all layers are populated or
/// `graph` is left untouched. Trainable flags of `graph` are kept.
pub fn import_weights(graph: &mut ModelGraph, path: &Path) -> Result<usize> {
    let (source, _) = load_model(path)?;
    let mut staged = Vec::new();
    for spec in graph.layers().iter().filter(|l| l.is_parametric()) {
        let target = graph.weights().get(&spec.name).expect("graph invariant");
        let src = source.weights().get(&spec.name).ok_or_else(|| {
            Error::ArtifactFormat(format!("{} has no parameters for `{}`", path.display(), spec.name))
        })?;
        let shapes_match = src.tensors().len() == target.tensors().len()
            && src
                .tensors()
                .iter()
                .zip(target.tensors())
                .all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::ArtifactFormat(format!(
                "`{}` in {} has weights {:?}, expected {:?}",
                spec.name,
                path.display(),
                src.weights.shape(),
                target.weights.shape()
            )));
        }
        let mut p = src.clone();
        p.trainable = target.trainable;
        p.clear_grads();
        staged.push((spec.name.clone(), p));
    }
    let n = staged.len();
    for (name, p) in staged {
        graph.weights_mut().insert(name, p);
    }
    Ok(n)
}
