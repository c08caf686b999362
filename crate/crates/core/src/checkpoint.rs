//! Checkpoint directories: `manifest.json`, `tensors.bin` and a `config.toml` echo.
//!
//! `tensors.bin` is the concatenation of every tensor listed in the manifest,
//! in manifest order, as row-major little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::ewc::FisherState;
use crate::hypernet::TaskEmbedding;
use crate::tensor::{ParamSet, Parameter, Tensor};
use crate::trainer::{ContinualState, Head, ModelConfig, Scheme};

pub const CHECKPOINT_FORMAT: &str = "linklearn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const CONFIG_FILE: &str = "config.toml";

const FISHER_FI: &str = "fisher.fi.";
const FISHER_ANCHOR: &str = "fisher.anchor.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Contents {
    Backbone {
        config: BackboneConfig,
    },
    Continual {
        config: ModelConfig,
        scheme: Scheme,
        seed: u64,
        tasks_trained: usize,
        fisher_last_task: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub contents: Contents,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

fn write_dir(dir: &Path, contents: Contents, tensors: &[(String, &Tensor, bool)]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t, frozen) in tensors {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: blob.len() - offset,
            frozen: *frozen,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        contents,
        blob_bytes: blob.len(),
        tensors: entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::storage(&blob_path, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::storage(&path, e))?;
    let echo = toml::to_string(&manifest.contents).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, echo).map_err(|e| Error::storage(&path, e))?;
    Ok(manifest)
}

/// Reads the manifest and every tensor it lists, keyed by name.
pub fn read_dir(dir: &Path) -> Result<(Manifest, BTreeMap<String, Parameter>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Load(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!(
            "checkpoint version {} does not match supported version {CHECKPOINT_VERSION}",
            manifest.version
        )));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::storage(&blob_path, e))?;
    let expected: usize = manifest.tensors.iter().map(|e| 4 * e.shape.iter().product::<usize>()).sum();
    if blob.len() != expected || manifest.blob_bytes != expected {
        return Err(Error::Load(format!(
            "{} holds {} bytes, manifest requires {expected}",
            blob_path.display(),
            blob.len()
        )));
    }
    let mut out = BTreeMap::new();
    let mut cursor = 0;
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != 4 * numel || e.offset != cursor {
            return Err(Error::Load(format!(
                "tensor {} has offset {} and {} bytes; expected offset {cursor} and {} bytes",
                e.name,
                e.offset,
                e.nbytes,
                4 * numel
            )));
        }
        let data = blob[e.offset..e.offset + e.nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = Tensor::new(e.shape.clone(), data)?;
        let p = Parameter {
            name: e.name.clone(),
            value,
            frozen: e.frozen,
        };
        if out.insert(e.name.clone(), p).is_some() {
            return Err(Error::Load(format!("tensor {} listed twice", e.name)));
        }
        cursor += e.nbytes;
    }
    Ok((manifest, out))
}

fn restore(params: Vec<&mut Parameter>, stored: &mut BTreeMap<String, Parameter>) -> Result<()> {
    for p in params {
        let s = stored
            .remove(&p.name)
            .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor {}", p.name)))?;
        if s.value.shape() != p.value.shape() {
            return Err(Error::Load(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                p.name,
                s.value.shape(),
                p.value.shape()
            )));
        }
        *p = s;
    }
    Ok(())
}

fn reject_leftovers(stored: &BTreeMap<String, Parameter>) -> Result<()> {
    match stored.keys().next() {
        Some(name) => Err(Error::Load(format!("checkpoint holds unexpected tensor {name}"))),
        None => Ok(()),
    }
}

pub fn save_backbone(bb: &Backbone, dir: &Path) -> Result<Manifest> {
    let tensors: Vec<_> = bb.params().into_iter().map(|p| (p.name.clone(), &p.value, p.frozen)).collect();
    write_dir(dir, Contents::Backbone { config: bb.config.clone() }, &tensors)
}

pub fn load_backbone(dir: &Path) -> Result<Backbone> {
    let (manifest, mut stored) = read_dir(dir)?;
    let Contents::Backbone { config } = manifest.contents else {
        return Err(Error::Load(format!("{} is not a backbone checkpoint", dir.display())));
    };
    let mut bb = Backbone::init(config, 0)?;
    restore(bb.params_mut(), &mut stored)?;
    reject_leftovers(&stored)?;
    Ok(bb)
}

/// Persists a state whose every started task has completed training.
pub fn save_checkpoint(state: &ContinualState, dir: &Path) -> Result<Manifest> {
    if state.tasks_trained() != state.bank.tasks() {
        return Err(Error::State("cannot checkpoint while a task is in training".into()));
    }
    let mut tensors: Vec<(String, &Tensor, bool)> = state
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), &p.value, p.frozen))
        .collect();
    for (name, t) in &state.fisher.fi {
        tensors.push((format!("{FISHER_FI}{name}"), t, true));
    }
    for (name, t) in &state.fisher.anchor {
        tensors.push((format!("{FISHER_ANCHOR}{name}"), t, true));
    }
    let contents = Contents::Continual {
        config: state.model.clone(),
        scheme: state.scheme,
        seed: state.seed,
        tasks_trained: state.tasks_trained(),
        fisher_last_task: state.fisher.last_task,
    };
    write_dir(dir, contents, &tensors)
}

pub fn load_checkpoint(dir: &Path) -> Result<ContinualState> {
    let (manifest, mut stored) = read_dir(dir)?;
    let Contents::Continual {
        config,
        scheme,
        seed,
        tasks_trained,
        fisher_last_task,
    } = manifest.contents
    else {
        return Err(Error::Load(format!("{} is not a continual-state checkpoint", dir.display())));
    };
    let mut bb = Backbone::init(config.backbone.clone(), 0)?;
    bb.freeze_all();
    let mut state = ContinualState::new(config, scheme, bb, seed)?;
    let d = state.model.backbone.d_model;
    for t in 0..tasks_trained {
        state.bank.add_task(t, 0)?;
        state.bank.freeze_task(t)?;
        let bias = format!("head.t{t}.b");
        let classes = stored
            .get(&bias)
            .map(|p| p.value.numel())
            .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor {bias}")))?;
        state.heads.push(Head::init(t, d, classes, 0));
        if scheme == Scheme::Linked {
            state.embeddings.push(TaskEmbedding::init(t, state.model.embed_dim, 0));
        }
    }
    restore(state.params_mut(), &mut stored)?;

    let mut fisher = FisherState {
        last_task: fisher_last_task,
        ..FisherState::default()
    };
    for (name, p) in std::mem::take(&mut stored) {
        if let Some(n) = name.strip_prefix(FISHER_FI) {
            fisher.fi.insert(n.to_string(), p.value);
        } else if let Some(n) = name.strip_prefix(FISHER_ANCHOR) {
            fisher.anchor.insert(n.to_string(), p.value);
        } else {
            stored.insert(name, p);
        }
    }
    reject_leftovers(&stored)?;
    state.fisher = fisher;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_backbone() -> Backbone {
        let cfg = BackboneConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            layers: 2,
        };
        let mut bb = Backbone::init(cfg, 3).unwrap();
        bb.freeze_all();
        bb
    }

    #[test]
    fn blob_length_matches_manifest_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let bb = tiny_backbone();
        let m = save_backbone(&bb, dir.path()).unwrap();
        let numel: usize = m.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob.len(), 4 * numel);
        assert_eq!(numel, bb.param_count());
    }

    #[test]
    fn backbone_roundtrip_quantizes_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let bb = tiny_backbone();
        save_backbone(&bb, dir.path()).unwrap();
        let back = load_backbone(dir.path()).unwrap();
        assert!(back.is_frozen());
        for (a, b) in bb.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
    }

    #[test]
    fn truncated_blob_names_lengths() {
        let dir = tempfile::tempdir().unwrap();
        save_backbone(&tiny_backbone(), dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&path).unwrap();
        let full = blob.len();
        blob.truncate(full - 4);
        fs::write(&path, blob).unwrap();
        let err = load_backbone(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&(full - 4).to_string()) && err.contains(&full.to_string()), "{err}");
    }

    #[test]
    fn missing_and_mismatched_tensors_fail() {
        let dir = tempfile::tempdir().unwrap();
        save_backbone(&tiny_backbone(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        m.tensors[0].name = "backbone.nonexistent".into();
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_backbone(dir.path()), Err(Error::Load(_))));

        m.version = 99;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_backbone(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn unwritable_target_is_storage_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(save_backbone(&tiny_backbone(), &file.join("sub")), Err(Error::Storage { .. })));
    }
}
