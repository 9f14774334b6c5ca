//! On-disk formats: the CTF1 tensor container, PGM mask export, checkpoints,
//! and the dataset directory layout.
//!
//! CTF1 layout: magic `CTF1`, one dtype byte (0 = f32, 1 = f64), one rank
//! byte, `rank` little-endian u64 dimensions, then the data little-endian in
//! row-major order. Everything in this crate computes in f64; f32 files are
//! widened on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CosamError, Result};
use crate::layers::ParamGroup;
use crate::synthdata::{Dataset, IdentitySpec, Snippet};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"CTF1";
const CKPT_MAGIC: &[u8; 10] = b"COSAMCKPT1";

fn fmt_err(msg: impl Into<String>) -> CosamError {
    CosamError::Format(msg.into())
}

pub fn write_tensor(w: &mut dyn Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[1u8, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut dyn Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt_err(format!("bad tensor magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let (dtype, rank) = (head[0], head[1] as usize);
    if dtype > 1 {
        return Err(fmt_err(format!("unknown dtype {dtype}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    if dtype == 1 {
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
    } else {
        let mut b = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
    }
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// Binary PGM (P5) with maxval 255; input values must lie in [0, 1].
pub fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let shape = mask.shape();
    if shape.len() != 2 {
        return Err(CosamError::shape(format!("pgm export needs [H, W], got {shape:?}")));
    }
    if mask.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CosamError::arg("pgm export: values outside [0, 1]"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", shape[1], shape[0])?;
    let bytes: Vec<u8> = mask.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Serialize every tensor a component exposes (running statistics included)
/// into one deterministic byte stream.
pub fn checkpoint_bytes(params: &dyn ParamGroup) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    let mut err = None;
    params.visit(&mut |name, t, _| {
        if err.is_some() {
            return;
        }
        let mut blob = Vec::new();
        if let Err(e) = write_tensor(&mut blob, t) {
            err = Some(e);
            return;
        }
        entries.push((name.to_string(), blob));
    });
    if let Some(e) = err {
        return Err(e);
    }
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, blob) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        offset += blob.len() as u64;
    }
    for (_, blob) in &entries {
        out.extend_from_slice(blob);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &dyn ParamGroup) -> Result<()> {
    let bytes = checkpoint_bytes(params)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into a structurally matching component. Every stored
/// tensor must find a parameter of the same name and shape, and every
/// parameter must be covered.
pub fn load_checkpoint(path: &Path, params: &mut dyn ParamGroup) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(fmt_err("bad checkpoint magic"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("non-utf8 name"))?;
        r.read_exact(&mut b8)?; // offset, implied by order
        let offset = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8);
        manifest.push((name, offset, len));
    }
    let mut tensors = std::collections::HashMap::new();
    let mut expected = 0u64;
    for (name, offset, len) in manifest {
        if offset != expected {
            return Err(fmt_err(format!("non-contiguous payload at {name}")));
        }
        expected += len;
        let mut blob = vec![0u8; len as usize];
        r.read_exact(&mut blob)?;
        tensors.insert(name, read_tensor(&mut blob.as_slice())?);
    }
    let mut err = None;
    params.visit_mut(&mut |name, t, _| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Some(loaded) => {
                err = Some(fmt_err(format!(
                    "{name}: checkpoint shape {:?} vs parameter {:?}",
                    loaded.shape(),
                    t.shape()
                )))
            }
            None => err = Some(fmt_err(format!("checkpoint is missing {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(fmt_err(format!("checkpoint has unknown tensor {name}")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SnippetEntry {
    identity: usize,
    frames: String,
    masks: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    identities: Vec<IdentitySpec>,
    train: Vec<SnippetEntry>,
    query: Vec<SnippetEntry>,
    gallery: Vec<SnippetEntry>,
}

fn save_split(dir: &Path, split: &str, snippets: &[Snippet]) -> Result<Vec<SnippetEntry>> {
    let mut entries = Vec::new();
    for (i, s) in snippets.iter().enumerate() {
        let frames = format!("{split}_{i:03}_frames.ctf");
        let masks = format!("{split}_{i:03}_masks.ctf");
        save_tensor(&dir.join(&frames), &s.frames)?;
        save_tensor(&dir.join(&masks), &s.gt_masks)?;
        entries.push(SnippetEntry {
            identity: s.identity,
            frames,
            masks,
        });
    }
    Ok(entries)
}

fn load_split(dir: &Path, entries: &[SnippetEntry]) -> Result<Vec<Snippet>> {
    entries
        .iter()
        .map(|e| {
            Ok(Snippet {
                identity: e.identity,
                frames: load_tensor(&dir.join(&e.frames))?,
                gt_masks: load_tensor(&dir.join(&e.masks))?,
            })
        })
        .collect()
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        identities: ds.identities.clone(),
        train: save_split(dir, "train", &ds.train)?,
        query: save_split(dir, "query", &ds.query)?,
        gallery: save_split(dir, "gallery", &ds.gallery)?,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| fmt_err(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| fmt_err(format!("manifest decode: {e}")))?;
    Ok(Dataset {
        identities: manifest.identities,
        train: load_split(dir, &manifest.train)?,
        query: load_split(dir, &manifest.query)?,
        gallery: load_split(dir, &manifest.gallery)?,
    })
}
