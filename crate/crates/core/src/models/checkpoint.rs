//! Checkpoint I/O: `<stem>.ckpt.json` (names, shapes, offsets, metadata) +
//! `<stem>.ckpt.raw` (f32 payload, little-endian), the same bit-exact
//! sidecar convention as the volume container.
//!
//! `LoadPolicy::Full` restores every entry bitwise; `BackboneOnly` restores
//! everything except the head, which keeps its current (fresh) values — the
//! transfer-learning path from a pretext checkpoint into a classifier.

use super::{is_backbone_param, Model, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const CKPT_FORMAT_VERSION: u32 = 1;
pub const HEADER_EXT: &str = ".ckpt.json";
pub const RAW_EXT: &str = ".ckpt.raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadPolicy {
    Full,
    BackboneOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the f32 payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub config_hash: String,
    /// Training-task tag, e.g. "pvr_classification" or "pretext_calcium".
    pub task: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub metadata: CheckpointMeta,
    pub entries: Vec<EntryMeta>,
}

/// In-memory checkpoint: named f32 tensors plus metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: CheckpointMeta,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn stem_of(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if let Some(stripped) = s.strip_suffix(HEADER_EXT) {
        PathBuf::from(stripped)
    } else if let Some(stripped) = s.strip_suffix(RAW_EXT) {
        PathBuf::from(stripped)
    } else {
        path.to_path_buf()
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = stem_of(path).into_os_string();
    s.push(HEADER_EXT);
    PathBuf::from(s)
}

pub fn raw_path(path: &Path) -> PathBuf {
    let mut s = stem_of(path).into_os_string();
    s.push(RAW_EXT);
    PathBuf::from(s)
}

impl Checkpoint {
    /// Snapshot a model's parameters and buffers.
    pub fn from_model<T: Scalar>(model: &Model<T>, task: &str) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit_params(&mut |name, p| {
            tensors.insert(
                name.to_string(),
                (
                    p.value.shape().to_vec(),
                    p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                ),
            );
        });
        model.visit_buffers(&mut |name, t| {
            tensors.insert(
                name.to_string(),
                (
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.as_f64() as f32).collect(),
                ),
            );
        });
        Checkpoint {
            metadata: CheckpointMeta {
                variant: model.config.variant,
                config_hash: model.config_hash(),
                task: task.to_string(),
            },
            tensors,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            entries.push(EntryMeta {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += data.len();
        }
        let header = CheckpointHeader {
            format_version: CKPT_FORMAT_VERSION,
            metadata: self.metadata.clone(),
            entries,
        };
        let hp = header_path(path);
        fs::write(&hp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&hp, e))?;
        let rp = raw_path(path);
        fs::write(&rp, payload).map_err(|e| Error::io(&rp, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let hp = header_path(path);
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        if header.format_version != CKPT_FORMAT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "format_version {} unsupported (expected {CKPT_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let rp = raw_path(path);
        let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
        let total: usize = header
            .entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != total * 4 {
            return Err(Error::CheckpointMismatch(format!(
                "payload is {} bytes, entries describe {} f32 elements",
                bytes.len(),
                total
            )));
        }
        let mut tensors = BTreeMap::new();
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            if start + n * 4 > bytes.len() {
                return Err(Error::CheckpointMismatch(format!(
                    "entry `{}` overruns the payload",
                    e.name
                )));
            }
            let data: Vec<f32> = bytes[start..start + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if tensors.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
                return Err(Error::CheckpointMismatch(format!(
                    "duplicate entry `{}`",
                    e.name
                )));
            }
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            tensors,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path, task: &str) -> Result<()> {
    Checkpoint::from_model(model, task).write(path)
}

/// Restore parameters from a checkpoint file.
///
/// `Full` requires every model entry to exist with a matching shape and
/// restores all of them bitwise. `BackboneOnly` restores all non-head entries
/// and leaves the head untouched; head entries in the checkpoint are ignored
/// (their shapes are never compared), so a regression-pretext checkpoint
/// loads into a classifier.
pub fn load_checkpoint<T: Scalar>(
    model: &mut Model<T>,
    path: &Path,
    policy: LoadPolicy,
) -> Result<Checkpoint> {
    let ckpt = Checkpoint::read(path)?;
    apply_checkpoint(model, &ckpt, policy)?;
    Ok(ckpt)
}

pub fn apply_checkpoint<T: Scalar>(
    model: &mut Model<T>,
    ckpt: &Checkpoint,
    policy: LoadPolicy,
) -> Result<()> {
    // collect the model's entry inventory
    let mut wanted: Vec<(String, Vec<usize>)> = Vec::new();
    model.visit_params(&mut |name, p| wanted.push((name.to_string(), p.value.shape().to_vec())));
    model.visit_buffers(&mut |name, t| wanted.push((name.to_string(), t.shape().to_vec())));

    let mut problems = Vec::new();
    for (name, shape) in &wanted {
        if policy == LoadPolicy::BackboneOnly && !is_backbone_param(name) {
            continue;
        }
        match ckpt.tensors.get(name) {
            None => problems.push(format!("missing `{name}`")),
            Some((s, _)) if s != shape => {
                problems.push(format!("`{name}` shape {s:?}, model expects {shape:?}"))
            }
            _ => {}
        }
    }
    if policy == LoadPolicy::Full {
        for name in ckpt.tensors.keys() {
            if !wanted.iter().any(|(n, _)| n == name) {
                problems.push(format!("unexpected `{name}`"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems.join("; ")));
    }

    model.visit_params_mut(&mut |name, p| {
        if policy == LoadPolicy::BackboneOnly && !is_backbone_param(name) {
            return;
        }
        let (shape, data) = &ckpt.tensors[name];
        p.value = Tensor::from_vec(
            shape,
            data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("shape checked above");
    });
    model.visit_buffers_mut(&mut |name, t| {
        if policy == LoadPolicy::BackboneOnly && !is_backbone_param(name) {
            return;
        }
        let (shape, data) = &ckpt.tensors[name];
        *t = Tensor::from_vec(
            shape,
            data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("shape checked above");
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::models::{Head, Model, ModelConfig};
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_shape: [16, 16, 16],
            dense: crate::models::DenseParams {
                growth_rate: 4,
                block_layers: vec![1, 1],
            },
            stem_channels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn full_round_trip_restores_forward_bitwise() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut model = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let x = Tensor::<f32>::full(&[1, 1, 16, 16, 16], 0.3);
        let y_before = model.forward(&x, Mode::Eval, Exec::default()).unwrap();

        let p = dir.path().join("model");
        save_checkpoint(&model, &p, "pvr_classification").unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(999);
        let mut restored = Model::<f32>::build(&cfg, &mut rng).unwrap();
        load_checkpoint(&mut restored, &p, LoadPolicy::Full).unwrap();
        let y_after = restored.forward(&x, Mode::Eval, Exec::default()).unwrap();
        assert_eq!(y_before.data(), y_after.data());
    }

    #[test]
    fn backbone_only_keeps_fresh_head() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let donor = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let p = dir.path().join("donor");
        save_checkpoint(&donor, &p, "pretext_calcium").unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut target = Model::<f32>::build(&cfg, &mut rng).unwrap();
        // record the fresh head
        let mut fresh = Vec::new();
        target.visit_params(&mut |n, p| {
            if n.starts_with("head.") {
                fresh.push((n.to_string(), p.value.clone()));
            }
        });
        load_checkpoint(&mut target, &p, LoadPolicy::BackboneOnly).unwrap();

        let mut head_idx = 0;
        target.visit_params(&mut |n, p| {
            if n.starts_with("head.") {
                assert_eq!(p.value.data(), fresh[head_idx].1.data(), "{n} changed");
                head_idx += 1;
            } else {
                let (_, donor_data) = &Checkpoint::from_model(&donor, "x").tensors[n];
                assert_eq!(p.value.data(), donor_data.as_slice(), "{n} not restored");
            }
        });
    }

    #[test]
    fn regressor_checkpoint_loads_backbone_into_classifier() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig {
            head: Head::RegressorScalar,
            ..small_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let pretext = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let p = dir.path().join("pretext");
        save_checkpoint(&pretext, &p, "pretext_calcium").unwrap();

        let cls_cfg = ModelConfig {
            head: Head::ClassifierLogit,
            ..small_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut cls = Model::<f32>::build(&cls_cfg, &mut rng).unwrap();
        let ckpt = load_checkpoint(&mut cls, &p, LoadPolicy::BackboneOnly).unwrap();
        assert_eq!(ckpt.metadata.task, "pretext_calcium");
    }

    #[test]
    fn full_policy_reports_offending_entries() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let model = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let p = dir.path().join("m");
        save_checkpoint(&model, &p, "t").unwrap();

        let other_cfg = ModelConfig {
            stem_channels: 4,
            ..small_config()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut other = Model::<f32>::build(&other_cfg, &mut rng).unwrap();
        match load_checkpoint(&mut other, &p, LoadPolicy::Full) {
            Err(Error::CheckpointMismatch(msg)) => {
                assert!(msg.contains("stem.weight"), "message: {msg}")
            }
            other => panic!("expected CheckpointMismatch, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempdir().unwrap();
        let cfg = small_config();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let model = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let p1 = dir.path().join("a");
        let p2 = dir.path().join("b");
        save_checkpoint(&model, &p1, "t").unwrap();
        save_checkpoint(&model, &p2, "t").unwrap();
        assert_eq!(
            std::fs::read(header_path(&p1)).unwrap(),
            std::fs::read(header_path(&p2)).unwrap()
        );
        assert_eq!(
            std::fs::read(raw_path(&p1)).unwrap(),
            std::fs::read(raw_path(&p2)).unwrap()
        );
    }
}
