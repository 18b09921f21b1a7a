//! SGD training loop: stratified splitting, augmentation, micro-batch
//! gradient accumulation, step-decayed momentum updates, prototype
//! refinement, and per-epoch evaluation.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{
    augment, compute_affective, generate_dataset, load_jsonl, resample, stack_batch, DataError,
    GeneratorConfig, SkeletonSequence, AFFECTIVE_DIM, NUM_CLASSES,
};
use crate::eval::{evaluate, EvalReport};
use crate::model::{confidences, stream_inputs, FrState, GaitModel, ModelConfig};
use crate::rng::stream_rng;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// Where training data comes from: a JSONL file or the synthetic
/// generator run in place.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    File { path: PathBuf },
    Synthetic {
        counts: [usize; NUM_CLASSES],
        seed: u64,
        #[serde(default)]
        generator: GeneratorConfig,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<SkeletonSequence>, DataError> {
        match self {
            DataSource::File { path } => load_jsonl(path),
            DataSource::Synthetic { counts, seed, generator } => {
                Ok(generate_dataset(generator, *counts, *seed))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// Epochs between decay steps.
    pub lr_step: usize,
    /// Largest shard run through the graph at once; gradients from the
    /// shards of one batch are accumulated before the optimizer step.
    pub micro_batch: usize,
    pub seed: u64,
    /// Held-out fraction of each class.
    pub test_fraction: f64,
    pub augment: bool,
    /// Train on the full dataset and evaluate on it too. Overrides the
    /// split; used for memorization checks.
    pub overfit: bool,
    /// Stop once evaluation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Global gradient-norm ceiling applied before each optimizer step.
    /// The graph stack carries no batch normalization, so early-epoch
    /// gradients reach norms in the hundreds; unclipped SGD at the
    /// default learning rate diverges within a few steps.
    pub clip_norm: Option<f64>,
    pub model: ModelConfig,
    pub data: Option<DataSource>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            initial_lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_step: 30,
            micro_batch: 8,
            seed: 0,
            test_fraction: 0.1,
            augment: true,
            overfit: false,
            target_accuracy: None,
            clip_norm: Some(5.0),
            model: ModelConfig::default(),
            data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Invalid(
                "batch_size must be at least 2: the refinement loss needs pairs".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::Invalid("epochs must be positive".into()));
        }
        if self.micro_batch == 0 {
            return Err(TrainError::Invalid("micro_batch must be positive".into()));
        }
        if !self.overfit && !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(TrainError::Invalid(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        if !(self.initial_lr > 0.0) || !(self.lr_decay > 0.0) || self.lr_step == 0 {
            return Err(TrainError::Invalid("learning-rate schedule must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Invalid("clip_norm must be positive when set".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

/// Deterministic per-class split into (train, test) dataset indices.
/// Every class contributes `round(n * test_fraction)` test sequences,
/// at least one and at most n-1 when it has two or more.
pub fn stratified_split(
    data: &[SkeletonSequence],
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut indices: Vec<usize> =
            (0..data.len()).filter(|&i| data[i].label.index() == class).collect();
        if indices.is_empty() {
            continue;
        }
        let mut rng = stream_rng(seed, "split", class as u64);
        for i in (1..indices.len()).rev() {
            indices.swap(i, rand::Rng::random_range(&mut rng, 0..=i));
        }
        let mut held = (indices.len() as f64 * test_fraction).round() as usize;
        if indices.len() > 1 {
            held = held.clamp(1, indices.len() - 1);
        } else {
            held = 0;
        }
        test.extend(indices.drain(..held));
        train.extend(indices);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Plain SGD with momentum: v <- m v + g, theta <- theta - lr v.
pub struct Momentum<E: Scalar> {
    velocity: Vec<Tensor<E>>,
    ids: Vec<ParamId>,
    momentum: f64,
}

impl<E: Scalar> Momentum<E> {
    pub fn new(store: &ParamStore<E>, momentum: f64) -> Momentum<E> {
        let ids: Vec<ParamId> = store.ids().collect();
        let velocity =
            ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Momentum { velocity, ids, momentum }
    }

    pub fn step(&mut self, store: &mut ParamStore<E>, lr: f64) {
        let m = E::from_f64(self.momentum);
        let lr = E::from_f64(lr);
        for (slot, &id) in self.ids.iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            for (v, g) in self.velocity[slot].data_mut().iter_mut().zip(grad) {
                *v = *v * m + g;
            }
            let theta = store.get_mut(id).data_mut();
            for (t, &v) in theta.iter_mut().zip(self.velocity[slot].data()) {
                *t = *t - lr * v;
            }
        }
    }
}

/// Scale all gradients in the store so their joint norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_gradients<E: Scalar>(store: &mut ParamStore<E>, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut total = 0.0f64;
    for &id in &ids {
        for &v in store.grad(id).data() {
            let v = v.to_f64();
            total += v * v;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for &id in &ids {
            for v in store.grad_mut(id).data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub mse: f64,
    pub fr: f64,
    pub eval_accuracy: f64,
    pub eval_macro_f1: f64,
    pub seconds: f64,
}

pub struct TrainOutcome<E: Scalar> {
    pub model: GaitModel<E>,
    pub store: ParamStore<E>,
    pub fr: FrState<E>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// Checkpoint captured at the best evaluation accuracy, earliest
    /// epoch on ties.
    pub best: Checkpoint,
    pub final_report: EvalReport,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn affective_targets(data: &[SkeletonSequence]) -> Result<Vec<[f64; AFFECTIVE_DIM]>, DataError> {
    data.iter().map(|s| compute_affective(&s.frames)).collect()
}

/// One training batch, augmented and resampled: stream tensors, labels,
/// and affective regression targets.
fn build_batch<E: Scalar>(
    data: &[SkeletonSequence],
    targets: &[[f64; AFFECTIVE_DIM]],
    batch: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Tensor<E>, Tensor<E>, Vec<usize>, Tensor<E>), TrainError> {
    let mut clips = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut y_a = Tensor::<E>::zeros(vec![batch.len(), AFFECTIVE_DIM]);
    for (row, &idx) in batch.iter().enumerate() {
        let seq = &data[idx];
        let frames = if config.augment {
            let mut rng =
                stream_rng(config.seed, "augment", (epoch * data.len() + idx) as u64);
            augment(&seq.frames, &mut rng)
        } else {
            seq.frames.clone()
        };
        clips.push(resample(&frames, config.model.frames)?);
        labels.push(seq.label.index());
        for (k, &v) in targets[idx].iter().enumerate() {
            y_a.data_mut()[row * AFFECTIVE_DIM + k] = E::from_f64(v);
        }
    }
    let coords = stack_batch::<E>(&clips)?;
    let (posture, motion) = stream_inputs(&coords)?;
    Ok((posture, motion, labels, y_a))
}

pub fn train<E: Scalar>(
    config: &TrainConfig,
    data: &[SkeletonSequence],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<E>, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Invalid("dataset is empty".into()));
    }

    let (train_indices, test_indices) = if config.overfit {
        let all: Vec<usize> = (0..data.len()).collect();
        (all.clone(), all)
    } else {
        stratified_split(data, config.test_fraction, config.seed)
    };
    let classes_present = {
        let mut seen = [false; NUM_CLASSES];
        for &i in &train_indices {
            seen[data[i].label.index()] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if classes_present < 2 {
        return Err(TrainError::Invalid(format!(
            "training split covers {classes_present} class(es); need at least 2"
        )));
    }
    if train_indices.len() < config.batch_size {
        return Err(TrainError::Invalid(format!(
            "training split holds {} sequences, fewer than one batch of {}",
            train_indices.len(),
            config.batch_size
        )));
    }

    let targets = affective_targets(data)?;
    let eval_set: Vec<SkeletonSequence> =
        test_indices.iter().map(|&i| data[i].clone()).collect();

    let mut store = ParamStore::<E>::new();
    let mut init_rng = stream_rng(config.seed, "init", 0);
    let model = GaitModel::register(&mut store, config.model.clone(), &mut init_rng)?;
    let mut fr = FrState::<E>::new(config.model.block_count);
    let mut optimizer = Momentum::new(&store, config.momentum);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.learning_rate(epoch);

        let mut order = train_indices.clone();
        let mut shuffle_rng = stream_rng(config.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::random_range(&mut shuffle_rng, 0..=i));
        }

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in order.chunks_exact(config.batch_size) {
            store.zero_grads();
            for shard in batch.chunks(config.micro_batch) {
                let (posture, motion, labels, y_a) =
                    build_batch::<E>(data, &targets, shard, config, epoch)?;
                let mut g = Graph::new();
                let p = g.constant(posture);
                let m = g.constant(motion);
                let out = model.forward(&mut g, &store, p, m)?;
                let loss = model.total_loss(&mut g, &store, &out, &labels, &y_a, &fr)?;
                g.backward(loss.total)?;
                let weight = shard.len() as f64 / batch.len() as f64;
                g.accumulate_param_grads(&mut store, E::from_f64(weight));

                let probs_p = g.to_tensor(out.probs_p);
                let probs_m = g.to_tensor(out.probs_m);
                let conf = confidences(&probs_p, &probs_m);
                model.update_prototypes(&g, &loss, &labels, &conf, &mut fr);

                sums.0 += g.to_tensor(loss.total).data()[0].to_f64() * weight;
                sums.1 += g.to_tensor(loss.ce).data()[0].to_f64() * weight;
                sums.2 += g.to_tensor(loss.mse).data()[0].to_f64() * weight;
                sums.3 += g.to_tensor(loss.fr).data()[0].to_f64() * weight;
            }
            if let Some(max_norm) = config.clip_norm {
                clip_gradients(&mut store, max_norm);
            }
            optimizer.step(&mut store, lr);
            batches += 1;
        }
        store.zero_grads();

        let report = evaluate(&model, &store, &config.model, &eval_set, config.batch_size)?;
        let denom = batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: sums.0 / denom,
            ce: sums.1 / denom,
            mse: sums.2 / denom,
            fr: sums.3 / denom,
            eval_accuracy: report.accuracy,
            eval_macro_f1: report.macro_f1,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        let improved = best.as_ref().is_none_or(|(_, acc, _)| stats.eval_accuracy > *acc);
        if improved {
            best = Some((
                epoch,
                stats.eval_accuracy,
                Checkpoint::capture(&config.model, &store, &fr),
            ));
        }
        history.push(stats);
        if config.target_accuracy.is_some_and(|t| report.accuracy >= t) {
            break;
        }
    }

    let (best_epoch, best_accuracy, best) = best.expect("at least one epoch ran");
    let final_report = evaluate(&model, &store, &config.model, &eval_set, config.batch_size)?;
    Ok(TrainOutcome {
        model,
        store,
        fr,
        history,
        best_epoch,
        best_accuracy,
        best,
        final_report,
        train_indices,
        test_indices,
    })
}
