//! Checkpoint directories: a `manifest.json` describing tensors, config,
//! iteration and RNG streams, plus one flat little-endian f32 binary per
//! tensor group. Loading is bit-exact; a content hash ties control
//! checkpoints to the base they were trained against.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use terradiff_autograd::{AdamW, ParamStore};

use crate::config::RunConfig;
use crate::{Error, Result};

pub const FORMAT: &str = "terradiff-ckpt-v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the group file.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupEntry {
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

/// Serializable RNG stream state (seed plus stream position).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: String,
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        RngSnapshot {
            seed: hex_encode(&seed),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex_decode(&self.seed)?;
        let mut seed = [0u8; 32];
        if bytes.len() != 32 {
            return Err(Error::Data("rng seed must be 32 bytes".into()));
        }
        seed.copy_from_slice(&bytes);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Data(format!("rng word_pos: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: String,
    pub iteration: u64,
    pub optimizer_step: u64,
    pub config: RunConfig,
    pub rng: BTreeMap<String, RngSnapshot>,
    pub loss_history: Vec<f32>,
    pub content_hash: String,
    pub base_hash: Option<String>,
    pub groups: Vec<GroupEntry>,
}

pub struct SaveRequest<'a> {
    pub store: &'a ParamStore<f32>,
    pub optimizer: Option<&'a AdamW<f32>>,
    pub config: &'a RunConfig,
    pub iteration: u64,
    pub rng: BTreeMap<String, RngSnapshot>,
    pub loss_history: Vec<f32>,
    pub base_hash: Option<String>,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Data("odd hex length".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Data(format!("hex: {e}")))
        })
        .collect()
}

fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or("misc").to_string()
}

fn write_f32s(buf: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes a checkpoint directory and returns its content hash.
pub fn save(dir: &Path, req: &SaveRequest<'_>) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    // tensors per group: model parameters, then optimizer moments
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (_, entry) in req.store.iter() {
        tensors.push((
            entry.name.clone(),
            entry.value.shape().to_vec(),
            entry.value.iter().copied().collect(),
        ));
    }
    let optimizer_step = if let Some(opt) = req.optimizer {
        let (step, rows) = opt.export_state();
        for (id, m, v) in rows {
            let name = req.store.name(id);
            tensors.push((
                format!("optim.m.{name}"),
                m.shape().to_vec(),
                m.iter().copied().collect(),
            ));
            tensors.push((
                format!("optim.v.{name}"),
                v.shape().to_vec(),
                v.iter().copied().collect(),
            ));
        }
        step
    } else {
        0
    };

    let mut groups: BTreeMap<String, (Vec<TensorEntry>, Vec<u8>)> = BTreeMap::new();
    for (name, shape, values) in tensors {
        let group = group_of(&name);
        let (entries, buf) = groups.entry(group).or_default();
        let offset = buf.len() as u64;
        entries.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset,
            len: values.len() as u64,
        });
        write_f32s(buf, values.into_iter());
    }

    let mut hasher = Sha256::new();
    let mut group_entries = Vec::new();
    for (group, (entries, buf)) in &groups {
        let file = format!("{group}.bin");
        let path = dir.join(&file);
        std::fs::write(&path, buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        hasher.update(buf);
        group_entries.push(GroupEntry {
            file,
            tensors: entries.clone(),
        });
    }
    let content_hash = format!("sha256:{}", hex_encode(&hasher.finalize()));

    let meta = CheckpointMeta {
        format: FORMAT.into(),
        dtype: "f32".into(),
        iteration: req.iteration,
        optimizer_step,
        config: req.config.clone(),
        rng: req.rng.clone(),
        loss_history: req.loss_history.clone(),
        content_hash: content_hash.clone(),
        base_hash: req.base_hash.clone(),
        groups: group_entries,
    };
    let manifest_path = dir.join(MANIFEST);
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(content_hash)
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Dependency(format!(
            "checkpoint manifest not found at {} ({e})",
            manifest_path.display()
        ))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format {}", meta.format)));
    }
    Ok(meta)
}

fn read_tensor(buf: &[u8], entry: &TensorEntry) -> Result<ArrayD<f32>> {
    let start = entry.offset as usize;
    let end = start + entry.len as usize * 4;
    if end > buf.len() {
        return Err(Error::Data(format!("tensor {} overruns group file", entry.name)));
    }
    let mut values = Vec::with_capacity(entry.len as usize);
    for chunk in buf[start..end].chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
        .map_err(|e| Error::Data(format!("tensor {}: {e}", entry.name)))
}

/// Loads parameters (and optionally optimizer moments) into an existing
/// store. Every store parameter must be present with a matching shape.
pub fn load_into(
    dir: &Path,
    store: &mut ParamStore<f32>,
    mut optimizer: Option<&mut AdamW<f32>>,
) -> Result<CheckpointMeta> {
    let meta = load_meta(dir)?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for g in &meta.groups {
        let path = dir.join(&g.file);
        let mut buf = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        files.insert(g.file.clone(), buf);
    }

    let mut by_name: BTreeMap<&str, (&str, &TensorEntry)> = BTreeMap::new();
    for g in &meta.groups {
        for t in &g.tensors {
            by_name.insert(&t.name, (&g.file, t));
        }
    }

    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in &ids {
        let Some((file, entry)) = by_name.get(name.as_str()) else {
            return Err(Error::Data(format!("checkpoint missing tensor {name}")));
        };
        let arr = read_tensor(&files[*file], entry)?;
        if arr.shape() != store.value(*id).shape() {
            return Err(Error::Data(format!(
                "tensor {name} shape {:?} != expected {:?}",
                arr.shape(),
                store.value(*id).shape()
            )));
        }
        *store.value_mut(*id) = arr;
    }

    if let Some(opt) = optimizer.as_deref_mut() {
        let mut rows = Vec::new();
        for (id, name) in &ids {
            let m_name = format!("optim.m.{name}");
            let v_name = format!("optim.v.{name}");
            if let (Some((mf, me)), Some((vf, ve))) =
                (by_name.get(m_name.as_str()), by_name.get(v_name.as_str()))
            {
                rows.push((*id, read_tensor(&files[*mf], me)?, read_tensor(&files[*vf], ve)?));
            }
        }
        opt.import_state(meta.optimizer_step, rows);
    }
    Ok(meta)
}

/// Content hash of a saved checkpoint (recomputed from its group files).
pub fn content_hash(dir: &Path) -> Result<String> {
    let meta = load_meta(dir)?;
    let mut hasher = Sha256::new();
    for g in &meta.groups {
        let path = dir.join(&g.file);
        let buf = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        hasher.update(&buf);
    }
    Ok(format!("sha256:{}", hex_encode(&hasher.finalize())))
}
