//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON document holding the model configuration, every
//! named parameter tensor, and the refinement prototypes. Tensor payloads
//! are little-endian scalar bytes in base64, so a round trip restores
//! values bit for bit regardless of number formatting.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::model::{FrState, GaitModel, ModelConfig};
use crate::rng::stream_rng;
use crate::tensor::{ParamStore, Scalar, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("dtype mismatch: checkpoint holds {found}, loader expects {expected}")]
    Dtype { found: String, expected: &'static str },
    #[error("{0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

impl TensorRecord {
    fn capture<E: Scalar>(name: &str, tensor: &Tensor<E>) -> TensorRecord {
        let mut bytes = Vec::with_capacity(tensor.data().len() * E::BYTES);
        for &v in tensor.data() {
            v.write_le(&mut bytes);
        }
        TensorRecord {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: BASE64.encode(&bytes),
        }
    }

    fn restore_into<E: Scalar>(&self, target: &mut Tensor<E>) -> Result<(), CheckpointError> {
        if target.shape() != self.shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {}: checkpoint shape {:?} does not match model shape {:?}",
                self.name,
                self.shape,
                target.shape()
            )));
        }
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() != target.data().len() * E::BYTES {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {}: payload holds {} bytes, shape needs {}",
                self.name,
                bytes.len(),
                target.data().len() * E::BYTES
            )));
        }
        for (slot, chunk) in target.data_mut().iter_mut().zip(bytes.chunks_exact(E::BYTES)) {
            *slot = E::read_le(chunk);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    params: Vec<TensorRecord>,
    prototypes: Vec<TensorRecord>,
}

/// Everything a restored checkpoint yields: the rebuilt network, its
/// parameter store, and the refinement prototypes it was saved with.
pub struct LoadedModel<E: Scalar> {
    pub config: ModelConfig,
    pub model: GaitModel<E>,
    pub store: ParamStore<E>,
    pub fr: FrState<E>,
}

impl Checkpoint {
    pub fn capture<E: Scalar>(
        config: &ModelConfig,
        store: &ParamStore<E>,
        fr: &FrState<E>,
    ) -> Checkpoint {
        let params = store
            .iter()
            .map(|(name, tensor)| TensorRecord::capture(name, tensor))
            .collect();
        let mut prototypes = Vec::new();
        for (stream, set) in [("posture", &fr.posture), ("motion", &fr.motion)] {
            for (i, p) in set.iter().enumerate() {
                prototypes.push(TensorRecord::capture(&format!("{stream}.{i}"), &p.values));
            }
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dtype: E::DTYPE.to_string(),
            config: config.clone(),
            params,
            prototypes,
        }
    }

    pub fn restore<E: Scalar>(&self) -> Result<LoadedModel<E>, CheckpointError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(self.version));
        }
        if self.dtype != E::DTYPE {
            return Err(CheckpointError::Dtype {
                found: self.dtype.clone(),
                expected: E::DTYPE,
            });
        }
        self.config.validate()?;

        // Rebuild the architecture, then overwrite every initialized
        // parameter with the stored payload.
        let mut store = ParamStore::<E>::new();
        let mut rng = stream_rng(0, "checkpoint-restore", 0);
        let model = GaitModel::register(&mut store, self.config.clone(), &mut rng)?;
        if self.params.len() != store.len() {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint stores {} tensors but the model registers {}",
                self.params.len(),
                store.len()
            )));
        }
        for record in &self.params {
            let id = store.id_of(&record.name).ok_or_else(|| {
                CheckpointError::Corrupt(format!("unknown tensor {}", record.name))
            })?;
            record.restore_into(store.get_mut(id))?;
        }

        let mut fr = FrState::<E>::new(self.config.block_count);
        if self.prototypes.len() != 2 * self.config.block_count {
            return Err(CheckpointError::Corrupt(format!(
                "checkpoint stores {} prototype sets, expected {}",
                self.prototypes.len(),
                2 * self.config.block_count
            )));
        }
        for record in &self.prototypes {
            let (stream, index) = record.name.split_once('.').ok_or_else(|| {
                CheckpointError::Corrupt(format!("malformed prototype name {}", record.name))
            })?;
            let index: usize = index.parse().map_err(|_| {
                CheckpointError::Corrupt(format!("malformed prototype name {}", record.name))
            })?;
            let set = match stream {
                "posture" => &mut fr.posture,
                "motion" => &mut fr.motion,
                _ => {
                    return Err(CheckpointError::Corrupt(format!(
                        "unknown prototype stream {stream}"
                    )))
                }
            };
            let slot = set.get_mut(index).ok_or_else(|| {
                CheckpointError::Corrupt(format!("prototype index {index} out of range"))
            })?;
            record.restore_into(&mut slot.values)?;
        }

        Ok(LoadedModel { config: self.config.clone(), model, store, fr })
    }
}

pub fn save<E: Scalar>(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore<E>,
    fr: &FrState<E>,
) -> Result<(), CheckpointError> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer(file, &Checkpoint::capture(config, store, fr))?;
    Ok(())
}

pub fn load<E: Scalar>(path: &Path) -> Result<LoadedModel<E>, CheckpointError> {
    let file = BufReader::new(File::open(path)?);
    let checkpoint: Checkpoint = serde_json::from_reader(file)?;
    checkpoint.restore()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{JOINT_COUNT, NUM_CLASSES};
    use crate::model::POSTURE_CHANNELS;
    use crate::tensor::Graph;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig { frames: 8, heads: 2, ..ModelConfig::default().with_block_count(3) }
    }

    fn build<E: Scalar>(seed: u64) -> (ModelConfig, GaitModel<E>, ParamStore<E>, FrState<E>) {
        let config = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "checkpoint-test", 0);
        let model = GaitModel::register(&mut store, config.clone(), &mut rng).unwrap();
        let mut fr = FrState::new(config.block_count);
        for set in [&mut fr.posture, &mut fr.motion] {
            for p in set.iter_mut() {
                for v in p.values.data_mut() {
                    *v = E::from_f64(rng.random_range(-1.0..1.0));
                }
            }
        }
        (config, model, store, fr)
    }

    #[test]
    fn file_round_trip_is_value_exact() {
        let (config, _, store, fr) = build::<f32>(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save(&path, &config, &store, &fr).unwrap();
        let loaded = load::<f32>(&path).unwrap();

        assert_eq!(loaded.store.len(), store.len());
        for (name, tensor) in store.iter() {
            let id = loaded.store.id_of(name).unwrap();
            let restored = loaded.store.get(id);
            assert_eq!(restored.shape(), tensor.shape(), "{name}");
            assert_eq!(restored.data(), tensor.data(), "{name}");
        }
        for (a, b) in fr.posture.iter().zip(&loaded.fr.posture) {
            assert_eq!(a.values.data(), b.values.data());
        }
        for (a, b) in fr.motion.iter().zip(&loaded.fr.motion) {
            assert_eq!(a.values.data(), b.values.data());
        }
    }

    #[test]
    fn restored_model_reproduces_forward_outputs_bitwise() {
        let (config, model, store, _fr) = build::<f64>(13);
        let mut rng = stream_rng(13, "checkpoint-input", 0);
        let mut coords = Tensor::<f64>::zeros(vec![2, POSTURE_CHANNELS, config.frames, JOINT_COUNT]);
        for v in coords.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }

        let run = |model: &GaitModel<f64>, store: &ParamStore<f64>| {
            let (posture, motion) = crate::model::stream_inputs(&coords).unwrap();
            let mut g = Graph::new();
            let p = g.constant(posture);
            let m = g.constant(motion);
            let out = model.forward(&mut g, store, p, m).unwrap();
            (g.to_tensor(out.probs_p).data().to_vec(), g.to_tensor(out.b_aff).data().to_vec())
        };
        let before = run(&model, &store);

        let fr = FrState::new(config.block_count);
        let loaded = Checkpoint::capture(&config, &store, &fr).restore::<f64>().unwrap();
        let after = run(&loaded.model, &loaded.store);
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let (config, _, store, fr) = build::<f32>(3);
        let checkpoint = Checkpoint::capture(&config, &store, &fr);
        let err = checkpoint.restore::<f64>().err().unwrap();
        assert!(matches!(err, CheckpointError::Dtype { .. }), "{err}");
    }

    #[test]
    fn future_versions_are_rejected() {
        let (config, _, store, fr) = build::<f32>(3);
        let mut checkpoint = Checkpoint::capture(&config, &store, &fr);
        checkpoint.version = CHECKPOINT_VERSION + 1;
        let err = checkpoint.restore::<f32>().err().unwrap();
        assert!(matches!(err, CheckpointError::Version(_)), "{err}");
    }

    #[test]
    fn tampered_payloads_are_rejected() {
        let (config, _, store, fr) = build::<f32>(3);

        let mut renamed = Checkpoint::capture(&config, &store, &fr);
        renamed.params[0].name = "no.such.tensor".into();
        assert!(matches!(
            renamed.restore::<f32>().err().unwrap(),
            CheckpointError::Corrupt(_)
        ));

        let mut reshaped = Checkpoint::capture(&config, &store, &fr);
        reshaped.params[0].shape = vec![1, NUM_CLASSES];
        assert!(matches!(
            reshaped.restore::<f32>().err().unwrap(),
            CheckpointError::Corrupt(_)
        ));

        let mut truncated = Checkpoint::capture(&config, &store, &fr);
        truncated.prototypes.pop();
        assert!(matches!(
            truncated.restore::<f32>().err().unwrap(),
            CheckpointError::Corrupt(_)
        ));
    }
}
