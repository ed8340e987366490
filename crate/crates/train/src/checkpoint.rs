//! Single-file checkpoints: a safetensors archive whose metadata carries a
//! JSON manifest (stage, epoch, config digest, optimizer step counts, rng
//! state and a free-form payload).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::schedule::StageId;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "hiergen.manifest";
const PARAM_PREFIX: &str = "param/";
const OPT_PREFIX: &str = "opt/";

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    /// Moment tensors keyed as produced by `Adam::state`.
    pub moments: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: StageId,
    pub epoch: usize,
    pub config_digest: String,
    pub params: BTreeMap<String, Tensor>,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub rng: Option<ChaCha8Rng>,
    pub payload: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: StageId,
    epoch: usize,
    config_digest: String,
    optimizer_steps: BTreeMap<String, u64>,
    rng: Option<ChaCha8Rng>,
    payload: serde_json::Value,
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => {
            return Err(TrainError::Checkpoint(format!("unsupported dtype {other:?}")));
        }
    })
}

fn view_to_tensor(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => {
            return Err(TrainError::Checkpoint(format!("unsupported stored dtype {other:?}")));
        }
    };
    Ok(t)
}

/// Writes `ckpt` to `path` via a temporary file in the same directory and an
/// atomic rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, t) in &ckpt.params {
        let (dt, bytes) = tensor_bytes(t)?;
        owned.push((format!("{PARAM_PREFIX}{name}"), dt, t.dims().to_vec(), bytes));
    }
    for (opt, state) in &ckpt.optimizers {
        for (name, t) in &state.moments {
            let (dt, bytes) = tensor_bytes(t)?;
            owned.push((format!("{OPT_PREFIX}{opt}/{name}"), dt, t.dims().to_vec(), bytes));
        }
    }
    let views = owned
        .iter()
        .map(|(n, dt, shape, bytes)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        config_digest: ckpt.config_digest.clone(),
        optimizer_steps: ckpt.optimizers.iter().map(|(k, v)| (k.clone(), v.step)).collect(),
        rng: ckpt.rng.clone(),
        payload: ckpt.payload.clone(),
    };
    let mut meta = HashMap::new();
    meta.insert(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?);
    let bytes = safetensors::serialize(views, Some(meta))?;

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| TrainError::Io(e.error))?;
    Ok(())
}

/// Reads a checkpoint. With `expected_digest` set, a different stored digest
/// is an error unless `allow_mismatch` is true.
pub fn load_checkpoint(
    path: &Path,
    expected_digest: Option<&str>,
    allow_mismatch: bool,
) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)?;
    let manifest_json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| TrainError::Checkpoint(format!("{} has no manifest", path.display())))?;
    let manifest: Manifest = serde_json::from_str(manifest_json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "format version {} is not supported",
            manifest.format_version
        )));
    }
    if let Some(expected) = expected_digest {
        if expected != manifest.config_digest {
            if allow_mismatch {
                log::warn!(
                    "loading {} despite config digest mismatch",
                    path.display()
                );
            } else {
                return Err(TrainError::DigestMismatch {
                    expected: expected.to_string(),
                    found: manifest.config_digest,
                });
            }
        }
    }
    let st = SafeTensors::deserialize(&bytes)?;
    let mut params = BTreeMap::new();
    let mut optimizers: BTreeMap<String, OptimizerState> = manifest
        .optimizer_steps
        .iter()
        .map(|(k, s)| {
            (
                k.clone(),
                OptimizerState {
                    step: *s,
                    moments: BTreeMap::new(),
                },
            )
        })
        .collect();
    for (name, view) in st.tensors() {
        let t = view_to_tensor(&view)?;
        if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
            params.insert(p.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
            let (opt, key) = rest
                .split_once('/')
                .ok_or_else(|| TrainError::Checkpoint(format!("bad tensor name `{name}`")))?;
            optimizers
                .entry(opt.to_string())
                .or_default()
                .moments
                .insert(key.to_string(), t);
        } else {
            return Err(TrainError::Checkpoint(format!("unexpected tensor `{name}`")));
        }
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        epoch: manifest.epoch,
        config_digest: manifest.config_digest,
        params,
        optimizers,
        rng: manifest.rng,
        payload: manifest.payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut params = BTreeMap::new();
        params.insert(
            "a.weight".to_string(),
            Tensor::new(&[[1.5f32, -2.25], [0.1, 3.0]], &Device::Cpu).unwrap(),
        );
        params.insert(
            "b".to_string(),
            Tensor::new(&[std::f64::consts::PI], &Device::Cpu).unwrap(),
        );
        let mut moments = BTreeMap::new();
        moments.insert("m/a.weight".to_string(), Tensor::new(&[0.5f32], &Device::Cpu).unwrap());
        let mut optimizers = BTreeMap::new();
        optimizers.insert("gen".to_string(), OptimizerState { step: 7, moments });
        optimizers.insert("disc".to_string(), OptimizerState { step: 3, moments: BTreeMap::new() });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.next_u64();
        Checkpoint {
            stage: StageId::Shape,
            epoch: 4,
            config_digest: "abc".into(),
            params,
            optimizers,
            rng: Some(rng),
            payload: serde_json::json!({"classes": ["x"]}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let c = sample();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path, Some("abc"), false).unwrap();
        assert_eq!(back.stage, StageId::Shape);
        assert_eq!(back.epoch, 4);
        assert_eq!(back.payload, c.payload);
        assert_eq!(
            back.params["a.weight"].to_vec2::<f32>().unwrap(),
            c.params["a.weight"].to_vec2::<f32>().unwrap()
        );
        assert_eq!(back.params["b"].dtype(), DType::F64);
        assert_eq!(back.params["b"].to_vec1::<f64>().unwrap(), vec![std::f64::consts::PI]);
        assert_eq!(back.optimizers["gen"].step, 7);
        assert_eq!(back.optimizers["disc"].step, 3);
        assert!(back.optimizers["gen"].moments.contains_key("m/a.weight"));
        let mut r1 = back.rng.unwrap();
        let mut r2 = c.rng.unwrap();
        assert_eq!(r1.next_u64(), r2.next_u64());
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn digest_mismatch_needs_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some("other"), false),
            Err(TrainError::DigestMismatch { .. })
        ));
        assert!(load_checkpoint(&path, Some("other"), true).is_ok());
        assert!(load_checkpoint(&path, None, false).is_ok());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path, None, false).is_err());
    }
}
