//! Checkpoint directory format.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest carries the format version, the model configuration, and
//! one entry per tensor: name, shape, dtype, and the byte window the
//! tensor occupies in `weights.bin`. Windows are contiguous and appear in
//! manifest order, so the binary is reproducible byte for byte from the
//! same weights.
//!
//! Full-precision checkpoints store every parameter as little-endian f32
//! in canonical parameter order. The ternary export replaces each matrix
//! selected by a quantization plan with a `.codes` tensor (dtype i8) and
//! a `.scales` tensor (dtype f32); everything else stays f32.

use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, TransformerModel};
use crate::quant::{Granularity, QuantPlan, TernaryWeight};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "i8" => Ok(1),
        other => Err(Error::CheckpointMismatch {
            detail: format!("unknown dtype '{other}'"),
        }),
    }
}

/// Append one tensor to the blob and its entry to the manifest list.
fn push_tensor(
    tensors: &mut Vec<TensorEntry>,
    blob: &mut Vec<u8>,
    name: &str,
    shape: Vec<usize>,
    dtype: &str,
    bytes: &[u8],
) {
    tensors.push(TensorEntry {
        name: name.to_string(),
        shape,
        dtype: dtype.to_string(),
        byte_offset: blob.len(),
        byte_len: bytes.len(),
    });
    blob.extend_from_slice(bytes);
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_dir(dir: &Path, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut mf = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut mf, manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    std::fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Write a full-precision checkpoint.
pub fn save_model(dir: &Path, model: &TransformerModel) -> Result<()> {
    let layout = param_layout(&model.config);
    let mut tensors = Vec::with_capacity(layout.len());
    let mut blob = Vec::new();
    let mut idx = 0usize;
    model.for_each_param(|name, data| {
        debug_assert_eq!(name, layout[idx].0);
        push_tensor(
            &mut tensors,
            &mut blob,
            name,
            layout[idx].1.clone(),
            "f32",
            &f32_bytes(data),
        );
        idx += 1;
    });
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        tensors,
    };
    write_dir(dir, &manifest, &blob)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointMismatch {
            detail: format!(
                "checkpoint format version {} unsupported; this build reads version {}",
                manifest.format_version, CHECKPOINT_VERSION
            ),
        });
    }
    let mut expected_offset = 0usize;
    for t in &manifest.tensors {
        let width = dtype_width(&t.dtype)?;
        let count: usize = t.shape.iter().product();
        if t.byte_len != count * width {
            return Err(Error::CheckpointMismatch {
                detail: format!(
                    "tensor '{}': shape {:?} needs {} bytes, manifest says {}",
                    t.name,
                    t.shape,
                    count * width,
                    t.byte_len
                ),
            });
        }
        if t.byte_offset != expected_offset {
            return Err(Error::CheckpointMismatch {
                detail: format!(
                    "tensor '{}': expected offset {expected_offset}, manifest says {}",
                    t.name, t.byte_offset
                ),
            });
        }
        expected_offset += t.byte_len;
    }
    Ok(manifest)
}

/// Read back a full-precision checkpoint. Every tensor must match the
/// canonical layout for the stored configuration.
pub fn load_model(dir: &Path) -> Result<TransformerModel> {
    let manifest = read_manifest(dir)?;
    let blob = std::fs::read(dir.join("weights.bin"))?;
    let total: usize = manifest.tensors.iter().map(|t| t.byte_len).sum();
    if blob.len() != total {
        return Err(Error::CheckpointMismatch {
            detail: format!(
                "weights.bin holds {} bytes, manifest expects {total}",
                blob.len()
            ),
        });
    }
    let layout = param_layout(&manifest.model);
    if manifest.tensors.len() != layout.len() {
        return Err(Error::CheckpointMismatch {
            detail: format!(
                "manifest lists {} tensors, model needs {}",
                manifest.tensors.len(),
                layout.len()
            ),
        });
    }
    let mut model = TransformerModel::zeros(&manifest.model)?;
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    model.for_each_param_mut(|name, data| {
        if failure.is_some() {
            return;
        }
        let entry = &manifest.tensors[idx];
        let (want_name, want_shape) = &layout[idx];
        if entry.name != *want_name || entry.name != name {
            failure = Some(Error::CheckpointMismatch {
                detail: format!("tensor {idx}: expected '{want_name}', found '{}'", entry.name),
            });
            return;
        }
        if entry.shape != *want_shape || entry.dtype != "f32" {
            failure = Some(Error::CheckpointMismatch {
                detail: format!(
                    "tensor '{}': expected f32 {:?}, found {} {:?}",
                    entry.name, want_shape, entry.dtype, entry.shape
                ),
            });
            return;
        }
        let window = &blob[entry.byte_offset..entry.byte_offset + entry.byte_len];
        for (dst, chunk) in data.iter_mut().zip(window.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        idx += 1;
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

/// Write the inspection export: matrices covered by the plan become
/// `<name>.codes` (i8) plus `<name>.scales` (f32) pairs, the rest stay
/// plain f32 tensors.
pub fn export_ternary(
    dir: &Path,
    model: &TransformerModel,
    plan: &QuantPlan,
    granularity: Granularity,
) -> Result<()> {
    plan.check_layers(model.config.num_layers)?;
    let layout = param_layout(&model.config);
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    model.for_each_param(|name, data| {
        if failure.is_some() {
            return;
        }
        let shape = layout[idx].1.clone();
        idx += 1;
        if quantized_in_plan(name, plan) {
            let result = match granularity {
                Granularity::PerTensor => crate::quant::ternarize(data),
                Granularity::PerRow => crate::quant::ternarize_rows(data, shape[0], shape[1]),
            };
            let tw: TernaryWeight = match result {
                Ok(t) => t,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let codes_bytes: Vec<u8> = tw.codes.iter().map(|c| *c as u8).collect();
            push_tensor(
                &mut tensors,
                &mut blob,
                &format!("{name}.codes"),
                shape,
                "i8",
                &codes_bytes,
            );
            push_tensor(
                &mut tensors,
                &mut blob,
                &format!("{name}.scales"),
                vec![tw.scales.len()],
                "f32",
                &f32_bytes(&tw.scales),
            );
        } else {
            push_tensor(&mut tensors, &mut blob, name, shape, "f32", &f32_bytes(data));
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        tensors,
    };
    write_dir(dir, &manifest, &blob)
}

/// Whether the named parameter is a weight matrix the plan ternarizes.
fn quantized_in_plan(name: &str, plan: &QuantPlan) -> bool {
    let Some(rest) = name.strip_prefix("layers.") else {
        return false;
    };
    let Some((layer_str, field)) = rest.split_once('.') else {
        return false;
    };
    let Ok(layer) = layer_str.parse::<usize>() else {
        return false;
    };
    let Some(lq) = plan.layers.get(layer) else {
        return false;
    };
    match field {
        "w_q" => lq.w_q,
        "w_k" => lq.w_k,
        "w_v" => lq.w_v,
        "w_o" => lq.w_o,
        "w_1" => lq.w_1,
        "w_2" => lq.w_2,
        _ => false,
    }
}

/// Order-sensitive FNV-1a over the canonical little-endian weight bytes.
/// Cheap identity check for the teacher-frozen invariant.
pub fn weights_fingerprint(model: &TransformerModel) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    model.for_each_param(|_, data| {
        for v in data {
            for b in v.to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x1000_0000_01b3);
            }
        }
    });
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttnScale, TaskHead};
    use crate::quant::{ternarize, LayerQuant};
    use tempfile::tempdir;

    fn small_model(seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            num_layers: 2,
            d_model: 8,
            heads: 2,
            seq_len: 6,
            vocab: 10,
            d_ff: 12,
            task_head: TaskHead::Classification { num_classes: 3 },
            attn_scale: AttnScale::SqrtD,
        };
        TransformerModel::init(&cfg, seed).unwrap()
    }

    fn flat_bits(m: &TransformerModel) -> Vec<u32> {
        let mut out = Vec::new();
        m.for_each_param(|_, d| out.extend(d.iter().map(|v| v.to_bits())));
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let model = small_model(5);
        let path = dir.path().join("ckpt");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(flat_bits(&back), flat_bits(&model));
        // saving the loaded model reproduces both files byte for byte
        let path2 = dir.path().join("ckpt2");
        save_model(&path2, &back).unwrap();
        for f in ["manifest.json", "weights.bin"] {
            let a = std::fs::read(path.join(f)).unwrap();
            let b = std::fs::read(path2.join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn manifest_windows_are_contiguous_and_sized() {
        let dir = tempdir().unwrap();
        let model = small_model(6);
        let path = dir.path().join("ckpt");
        save_model(&path, &model).unwrap();
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.format_version, CHECKPOINT_VERSION);
        let mut offset = 0usize;
        for t in &manifest.tensors {
            assert_eq!(t.dtype, "f32");
            assert_eq!(t.byte_offset, offset);
            let count: usize = t.shape.iter().product();
            assert_eq!(t.byte_len, count * 4);
            offset += t.byte_len;
        }
        let blob = std::fs::read(path.join("weights.bin")).unwrap();
        assert_eq!(blob.len(), offset);
        assert_eq!(manifest.tensors.len(), param_layout(&model.config).len());
        assert_eq!(manifest.tensors[0].name, "token_embedding");
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempdir().unwrap();
        let model = small_model(7);
        let path = dir.path().join("ckpt");
        save_model(&path, &model).unwrap();

        let blob = std::fs::read(path.join("weights.bin")).unwrap();
        std::fs::write(path.join("weights.bin"), &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CheckpointMismatch { .. })));
        std::fs::write(path.join("weights.bin"), &blob).unwrap();

        let raw = std::fs::read_to_string(path.join("manifest.json")).unwrap();
        let hacked = raw.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert_ne!(raw, hacked);
        std::fs::write(path.join("manifest.json"), hacked).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains('2') && err.to_string().contains('1'));

        let hacked = raw.replacen("\"token_embedding\"", "\"renamed\"", 1);
        std::fs::write(path.join("manifest.json"), hacked).unwrap();
        assert!(matches!(load_model(&path), Err(Error::CheckpointMismatch { .. })));
    }

    #[test]
    fn ternary_export_reconstructs_rule_values() {
        let dir = tempdir().unwrap();
        let model = small_model(8);
        let path = dir.path().join("tern");
        let plan = QuantPlan::uniform(2, LayerQuant::ALL);
        export_ternary(&path, &model, &plan, Granularity::PerTensor).unwrap();
        let manifest = read_manifest(&path).unwrap();
        let blob = std::fs::read(path.join("weights.bin")).unwrap();

        let find = |name: &str| {
            manifest
                .tensors
                .iter()
                .find(|t| t.name == name)
                .unwrap_or_else(|| panic!("missing tensor {name}"))
        };
        // embeddings stay full precision, matrices become pairs
        assert_eq!(find("token_embedding").dtype, "f32");
        let codes_t = find("layers.0.w_q.codes");
        let scales_t = find("layers.0.w_q.scales");
        assert_eq!(codes_t.dtype, "i8");
        assert_eq!(scales_t.dtype, "f32");
        assert!(manifest.tensors.iter().all(|t| t.name != "layers.0.w_q"));
        // biases are never ternarized
        assert_eq!(find("layers.0.b_q").dtype, "f32");

        let codes: Vec<i8> = blob[codes_t.byte_offset..codes_t.byte_offset + codes_t.byte_len]
            .iter()
            .map(|b| *b as i8)
            .collect();
        assert!(codes.iter().all(|c| (-1..=1).contains(c)));
        let scale = f32::from_le_bytes(
            blob[scales_t.byte_offset..scales_t.byte_offset + 4]
                .try_into()
                .unwrap(),
        );
        let want = ternarize(&model.layers[0].w_q).unwrap();
        assert_eq!(codes, want.codes);
        assert_eq!(scale.to_bits(), want.scales[0].to_bits());
    }

    #[test]
    fn ternary_export_respects_partial_plans() {
        let dir = tempdir().unwrap();
        let model = small_model(9);
        let path = dir.path().join("ffn");
        let plan = QuantPlan::uniform(2, LayerQuant::FFN);
        export_ternary(&path, &model, &plan, Granularity::PerRow).unwrap();
        let manifest = read_manifest(&path).unwrap();
        let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        assert!(names.contains(&"layers.1.w_1.codes"));
        assert!(names.contains(&"layers.1.w_q"));
        assert!(!names.contains(&"layers.1.w_q.codes"));
        // per-row export carries one scale per output row
        let scales = manifest
            .tensors
            .iter()
            .find(|t| t.name == "layers.0.w_1.scales")
            .unwrap();
        assert_eq!(scales.shape, vec![8]);
    }

    #[test]
    fn fingerprint_tracks_weight_changes() {
        let model = small_model(10);
        let a = weights_fingerprint(&model);
        assert_eq!(a, weights_fingerprint(&model));
        let mut changed = model.clone();
        changed.layers[0].w_q[0] += 1.0;
        assert_ne!(a, weights_fingerprint(&changed));
    }
}
