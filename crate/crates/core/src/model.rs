//! Full dual-stream network.
//!
//! Raw joint coordinates feed two parallel stacks of blocks: a posture
//! stream on root-centered positions and a motion stream on velocity and
//! acceleration channels. A fusion module exchanges information between
//! the streams at one configurable block boundary. Each stream ends in a
//! mean-pool classifier; the posture stream additionally regresses the
//! hand-crafted affective descriptor, and every block output feeds a
//! refinement head for the prototype contrastive loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::TemporalKind;
use crate::block::{BlockOrder, BlockSpec, CgtBlock};
use crate::contrastive::{prototype_infonce, FrHead, Prototypes};
use crate::data::{
    motion_stream, root_centered, DataError, AFFECTIVE_DIM, JOINT_COUNT, MOTION_CHANNELS,
    NUM_CLASSES, PARENTS,
};
use crate::fusion::{BcsfLayer, FusionParts};
use crate::tensor::{uniform_fan_in, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

/// Coordinate channels of the posture stream.
pub const POSTURE_CHANNELS: usize = 3;
/// Frames every sequence is resampled to before entering the network.
pub const MODEL_FRAMES: usize = 48;

/// Output channels and frame stride for each block position. Counts
/// above four repeat the 128- then 256-wide stages at stride 1, keeping
/// the final width and frame rate fixed.
pub fn block_plan(block_count: usize) -> Result<Vec<(usize, usize)>, TensorError> {
    let mut plan = match block_count {
        3 => vec![(64, 1)],
        4..=6 => vec![(64, 1), (64, 1)],
        _ => {
            return Err(TensorError::Invalid(format!(
                "block count {block_count} outside the supported 3..=6"
            )))
        }
    };
    plan.push((128, 2));
    if block_count >= 5 {
        plan.push((128, 1));
    }
    plan.push((256, 2));
    if block_count >= 6 {
        plan.push((256, 1));
    }
    Ok(plan)
}

/// Per-block refinement loss coefficients: later blocks weigh more, and
/// the schedule keeps its tail when blocks are removed and extends with
/// full weight when blocks are added.
pub fn lambda_plan(block_count: usize) -> Vec<f64> {
    let base = [0.1, 0.2, 0.5, 1.0];
    let mut lambda: Vec<f64> = base[base.len().saturating_sub(block_count)..].to_vec();
    while lambda.len() < block_count {
        lambda.push(1.0);
    }
    lambda
}

/// Everything needed to rebuild the network deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frames: usize,
    pub order: BlockOrder,
    pub temporal: TemporalKind,
    pub heads: usize,
    pub positional: bool,
    pub block_count: usize,
    /// Fusion sits after this 1-based block; `None` removes it entirely.
    pub bcsf_position: Option<usize>,
    pub fusion: FusionParts,
    pub lambda: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: MODEL_FRAMES,
            order: BlockOrder::GraphFirst,
            temporal: TemporalKind::Attention,
            heads: 8,
            positional: true,
            block_count: 4,
            bcsf_position: Some(2),
            fusion: FusionParts::default(),
            lambda: lambda_plan(4),
        }
    }
}

impl ModelConfig {
    /// Adjusts the block count and rederives the matching λ schedule.
    pub fn with_block_count(mut self, block_count: usize) -> Self {
        self.block_count = block_count;
        self.lambda = lambda_plan(block_count);
        if let Some(pos) = self.bcsf_position {
            self.bcsf_position = Some(pos.min(block_count));
        }
        self
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let plan = block_plan(self.block_count)?;
        if self.lambda.len() != self.block_count {
            return Err(TensorError::Invalid(format!(
                "{} lambda weights for {} blocks",
                self.lambda.len(),
                self.block_count
            )));
        }
        if self.lambda.iter().any(|l| *l < 0.0) {
            return Err(TensorError::Invalid("lambda weights must be nonnegative".into()));
        }
        if let Some(pos) = self.bcsf_position {
            if pos == 0 || pos > self.block_count {
                return Err(TensorError::Invalid(format!(
                    "fusion position {pos} outside 1..={}",
                    self.block_count
                )));
            }
            let c = plan[pos - 1].0;
            if self.heads == 0 || c % self.heads != 0 {
                return Err(TensorError::Invalid(format!(
                    "fusion width {c} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        for (c, _) in &plan {
            if self.heads == 0 || c % self.heads != 0 {
                return Err(TensorError::Invalid(format!(
                    "block width {c} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.frames == 0 {
            return Err(TensorError::Invalid("frames must be positive".into()));
        }
        Ok(())
    }
}

/// Converts a raw coordinate batch `[B, 3, T, N]` into the two stream
/// inputs: root-centered positions and velocity/acceleration channels.
pub fn stream_inputs<E: Scalar>(coords: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>), DataError> {
    Ok((root_centered(coords)?, motion_stream(coords)?))
}

/// Graph variables produced by one forward pass.
pub struct ForwardOutput {
    pub logits_p: Var,
    pub logits_m: Var,
    pub probs_p: Var,
    pub probs_m: Var,
    pub b_aff: Var,
    /// Pre-fusion block outputs, one per block, per stream.
    pub block_feats_p: Vec<Var>,
    pub block_feats_m: Vec<Var>,
}

/// Loss terms; `total = ce + mse + fr`.
pub struct LossBreakdown {
    pub total: Var,
    pub ce: Var,
    pub mse: Var,
    pub fr: Var,
    /// Refinement embeddings per block, for the prototype EMA step.
    pub z_p: Vec<Var>,
    pub z_m: Vec<Var>,
}

/// Prototype banks for every refinement head.
#[derive(Debug, Clone)]
pub struct FrState<E: Scalar> {
    pub posture: Vec<Prototypes<E>>,
    pub motion: Vec<Prototypes<E>>,
}

impl<E: Scalar> FrState<E> {
    pub fn new(block_count: usize) -> Self {
        FrState {
            posture: vec![Prototypes::new(); block_count],
            motion: vec![Prototypes::new(); block_count],
        }
    }
}

pub struct GaitModel<E: Scalar> {
    pub config: ModelConfig,
    posture: Vec<CgtBlock<E>>,
    motion: Vec<CgtBlock<E>>,
    bcsf: Option<BcsfLayer<E>>,
    fr_posture: Vec<FrHead<E>>,
    fr_motion: Vec<FrHead<E>>,
    cls_p_w: ParamId,
    cls_p_b: ParamId,
    cls_m_w: ParamId,
    cls_m_b: ParamId,
    aff_w: ParamId,
    aff_b: ParamId,
}

impl<E: Scalar> GaitModel<E> {
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        let plan = block_plan(config.block_count)?;

        let build_stream = |store: &mut ParamStore<E>,
                                name: &str,
                                mut c_in: usize,
                                rng: &mut R|
         -> Result<Vec<CgtBlock<E>>, TensorError> {
            let mut blocks = Vec::with_capacity(plan.len());
            let mut t_in = config.frames;
            for (i, &(c_out, stride)) in plan.iter().enumerate() {
                let spec = BlockSpec {
                    order: config.order,
                    temporal: config.temporal.clone(),
                    c_in,
                    c_out,
                    t_in,
                    stride,
                    heads: config.heads,
                    positional: config.positional,
                };
                let block =
                    CgtBlock::register(store, &format!("{name}.{i}"), spec, &PARENTS, rng)?;
                t_in = block.spec.t_out();
                c_in = c_out;
                blocks.push(block);
            }
            Ok(blocks)
        };
        let posture = build_stream(store, "posture", POSTURE_CHANNELS, rng)?;
        let motion = build_stream(store, "motion", MOTION_CHANNELS, rng)?;

        let bcsf = match config.bcsf_position {
            Some(pos) => {
                let c = plan[pos - 1].0;
                Some(BcsfLayer::register(
                    store,
                    "bcsf",
                    c,
                    JOINT_COUNT,
                    config.heads,
                    config.fusion,
                    rng,
                )?)
            }
            None => None,
        };

        let mut fr_posture = Vec::with_capacity(plan.len());
        let mut fr_motion = Vec::with_capacity(plan.len());
        for (i, &(c_out, _)) in plan.iter().enumerate() {
            fr_posture.push(FrHead::register(store, &format!("fr.p.{i}"), c_out, rng)?);
            fr_motion.push(FrHead::register(store, &format!("fr.m.{i}"), c_out, rng)?);
        }

        let c_final = plan.last().expect("plan is never empty").0;
        Ok(GaitModel {
            config,
            posture,
            motion,
            bcsf,
            fr_posture,
            fr_motion,
            cls_p_w: store
                .register("cls.p.w", uniform_fan_in(vec![c_final, NUM_CLASSES], c_final, rng))?,
            cls_p_b: store.register("cls.p.b", Tensor::zeros(vec![NUM_CLASSES]))?,
            cls_m_w: store
                .register("cls.m.w", uniform_fan_in(vec![c_final, NUM_CLASSES], c_final, rng))?,
            cls_m_b: store.register("cls.m.b", Tensor::zeros(vec![NUM_CLASSES]))?,
            aff_w: store
                .register("aff.w", uniform_fan_in(vec![c_final, AFFECTIVE_DIM], c_final, rng))?,
            aff_b: store.register("aff.b", Tensor::zeros(vec![AFFECTIVE_DIM]))?,
        })
    }

    /// Runs both streams on prepared inputs (see [`stream_inputs`]). The
    /// network has no stochastic layers, so there is no train/eval split.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        posture_in: Var,
        motion_in: Var,
    ) -> Result<ForwardOutput, TensorError> {
        let shape = g.shape(posture_in).to_vec();
        if shape.len() != 4
            || shape[1] != POSTURE_CHANNELS
            || shape[2] != self.config.frames
            || shape[3] != JOINT_COUNT
        {
            return Err(TensorError::shape(
                "model_forward",
                format!(
                    "expected posture [B, {POSTURE_CHANNELS}, {}, {JOINT_COUNT}], got {shape:?}",
                    self.config.frames
                ),
            ));
        }

        let mut f_p = posture_in;
        let mut f_m = motion_in;
        let mut block_feats_p = Vec::with_capacity(self.posture.len());
        let mut block_feats_m = Vec::with_capacity(self.motion.len());
        for i in 0..self.posture.len() {
            f_p = self.posture[i].forward(g, store, f_p)?;
            f_m = self.motion[i].forward(g, store, f_m)?;
            block_feats_p.push(f_p);
            block_feats_m.push(f_m);
            if self.config.bcsf_position == Some(i + 1) {
                if let Some(bcsf) = &self.bcsf {
                    (f_p, f_m) = bcsf.forward(g, store, f_p, f_m)?;
                }
            }
        }

        let pool = |g: &mut Graph<E>, f: Var| g.reduce_mean(f, &[2, 3]);
        let pooled_p = pool(g, f_p)?;
        let pooled_m = pool(g, f_m)?;

        let affine = |g: &mut Graph<E>, x: Var, w: ParamId, b: ParamId| -> Result<Var, TensorError> {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };
        let logits_p = affine(g, pooled_p, self.cls_p_w, self.cls_p_b)?;
        let logits_m = affine(g, pooled_m, self.cls_m_w, self.cls_m_b)?;
        let b_aff = affine(g, pooled_p, self.aff_w, self.aff_b)?;
        let probs_p = g.softmax(logits_p, 1)?;
        let probs_m = g.softmax(logits_m, 1)?;

        Ok(ForwardOutput {
            logits_p,
            logits_m,
            probs_p,
            probs_m,
            b_aff,
            block_feats_p,
            block_feats_m,
        })
    }

    /// Classification, affective regression, and refinement terms. The
    /// refinement losses score against the incoming prototypes; callers
    /// apply the EMA step afterwards from the returned embeddings.
    pub fn total_loss(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        out: &ForwardOutput,
        labels: &[usize],
        y_a: &Tensor<E>,
        fr_state: &FrState<E>,
    ) -> Result<LossBreakdown, TensorError> {
        let ce_p = g.cross_entropy(out.logits_p, labels)?;
        let ce_m = g.cross_entropy(out.logits_m, labels)?;
        let ce = g.add(ce_p, ce_m)?;

        let target = g.constant(y_a.clone());
        let diff = g.sub(out.b_aff, target)?;
        let sq = g.mul(diff, diff)?;
        let per_sample = g.reduce_sum(sq, &[1])?;
        let mse = g.reduce_mean(per_sample, &[0])?;

        let mut fr = g.constant(Tensor::scalar(E::zero()));
        let mut z_p = Vec::with_capacity(self.fr_posture.len());
        let mut z_m = Vec::with_capacity(self.fr_motion.len());
        for i in 0..self.fr_posture.len() {
            let (lp, zp) = {
                let z = self.fr_posture[i].embed(g, store, out.block_feats_p[i])?;
                (prototype_infonce(g, z, &fr_state.posture[i], labels)?, z)
            };
            let (lm, zm) = {
                let z = self.fr_motion[i].embed(g, store, out.block_feats_m[i])?;
                (prototype_infonce(g, z, &fr_state.motion[i], labels)?, z)
            };
            z_p.push(zp);
            z_m.push(zm);
            let pair = g.add(lp, lm)?;
            let weighted = g.scale(pair, self.config.lambda[i]);
            fr = g.add(fr, weighted)?;
        }

        let partial = g.add(ce, mse)?;
        let total = g.add(partial, fr)?;
        Ok(LossBreakdown { total, ce, mse, fr, z_p, z_m })
    }

    /// Gated prototype EMA from a finished step's embeddings.
    pub fn update_prototypes(
        &self,
        g: &Graph<E>,
        loss: &LossBreakdown,
        labels: &[usize],
        confidences: &[f64],
        fr_state: &mut FrState<E>,
    ) {
        for i in 0..self.fr_posture.len() {
            let zp = g.to_tensor(loss.z_p[i]);
            let zm = g.to_tensor(loss.z_m[i]);
            fr_state.posture[i].update_batch(&zp, labels, confidences);
            fr_state.motion[i].update_batch(&zm, labels, confidences);
        }
    }
}

/// Average the two streams' class probabilities per row.
pub fn average_probs<E: Scalar>(p: &Tensor<E>, m: &Tensor<E>) -> Tensor<E> {
    let mut out = p.clone();
    let half = E::from_f64(0.5);
    for (o, &b) in out.data_mut().iter_mut().zip(m.data()) {
        *o = (*o + b) * half;
    }
    out
}

/// Argmax of the averaged probabilities; ties go to the lowest index.
pub fn predict_classes<E: Scalar>(p: &Tensor<E>, m: &Tensor<E>) -> Vec<usize> {
    let avg = average_probs(p, m);
    let rows = avg.shape()[0];
    let cols = avg.shape()[1];
    (0..rows)
        .map(|r| {
            let row = &avg.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Peak averaged probability per row, the gating signal for prototype
/// updates.
pub fn confidences<E: Scalar>(p: &Tensor<E>, m: &Tensor<E>) -> Vec<f64> {
    let avg = average_probs(p, m);
    let cols = avg.shape()[1];
    (0..avg.shape()[0])
        .map(|r| {
            avg.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|&v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::gradcheck;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            frames: 8,
            heads: 2,
            ..ModelConfig::default().with_block_count(3)
        }
    }

    fn random_coords(batch: usize, frames: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, "model-test", 0);
        let numel = batch * 3 * frames * JOINT_COUNT;
        let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![batch, 3, frames, JOINT_COUNT], data).unwrap()
    }

    fn build(config: ModelConfig, seed: u64) -> (ParamStore<f64>, GaitModel<f64>) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "model-init", 0);
        let model = GaitModel::register(&mut store, config, &mut rng).unwrap();
        (store, model)
    }

    fn forward_tensors(
        model: &GaitModel<f64>,
        store: &ParamStore<f64>,
        coords: &Tensor<f64>,
    ) -> (Graph<f64>, ForwardOutput) {
        let (posture, motion) = stream_inputs(coords).unwrap();
        let mut g = Graph::new();
        let pv = g.constant(posture);
        let mv = g.constant(motion);
        let out = model.forward(&mut g, store, pv, mv).unwrap();
        (g, out)
    }

    #[test]
    fn plans_follow_the_block_count_rules() {
        assert_eq!(block_plan(3).unwrap(), vec![(64, 1), (128, 2), (256, 2)]);
        assert_eq!(block_plan(4).unwrap(), vec![(64, 1), (64, 1), (128, 2), (256, 2)]);
        assert_eq!(
            block_plan(5).unwrap(),
            vec![(64, 1), (64, 1), (128, 2), (128, 1), (256, 2)]
        );
        assert_eq!(
            block_plan(6).unwrap(),
            vec![(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1)]
        );
        assert!(block_plan(2).is_err());
        assert_eq!(lambda_plan(3), vec![0.2, 0.5, 1.0]);
        assert_eq!(lambda_plan(4), vec![0.1, 0.2, 0.5, 1.0]);
        assert_eq!(lambda_plan(6), vec![0.1, 0.2, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn default_network_shapes_and_probability_rows() {
        let (store, model) = build(ModelConfig::default(), 0);
        let coords = random_coords(2, MODEL_FRAMES, 1);
        let (g, out) = forward_tensors(&model, &store, &coords);

        assert_eq!(g.shape(out.probs_p), &[2, NUM_CLASSES]);
        assert_eq!(g.shape(out.probs_m), &[2, NUM_CLASSES]);
        assert_eq!(g.shape(out.b_aff), &[2, AFFECTIVE_DIM]);
        assert_eq!(g.shape(*out.block_feats_p.last().unwrap()), &[2, 256, 12, JOINT_COUNT]);
        assert_eq!(g.shape(*out.block_feats_m.last().unwrap()), &[2, 256, 12, JOINT_COUNT]);
        for probs in [out.probs_p, out.probs_m] {
            for row in 0..2 {
                let sum: f64 = g.data(probs)[row * NUM_CLASSES..(row + 1) * NUM_CLASSES]
                    .iter()
                    .sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, model) = build(tiny_config(), 2);
        let coords = random_coords(2, 8, 3);
        let (g1, o1) = forward_tensors(&model, &store, &coords);
        let (g2, o2) = forward_tensors(&model, &store, &coords);
        assert_eq!(
            g1.to_tensor(o1.probs_p).max_abs_diff(&g2.to_tensor(o2.probs_p)),
            0.0
        );
        assert_eq!(
            g1.to_tensor(o1.b_aff).max_abs_diff(&g2.to_tensor(o2.b_aff)),
            0.0
        );
    }

    #[test]
    fn loss_components_hit_their_analytic_anchors() {
        let (mut store, model) = build(tiny_config(), 4);
        let coords = random_coords(2, 8, 5);
        let labels = [0usize, 2];

        // Uniform classifier outputs: zero the classifier affines.
        for name in ["cls.p.w", "cls.p.b", "cls.m.w", "cls.m.b"] {
            let id = store.id_of(name).unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let (mut g, out) = forward_tensors(&model, &store, &coords);

        // Perfect affective targets: reuse the model's own outputs.
        let y_a = g.to_tensor(out.b_aff);
        let fr_state = FrState::new(3);
        let loss = model.total_loss(&mut g, &store, &out, &labels, &y_a, &fr_state).unwrap();
        assert!((g.scalar_value(loss.ce) - 2.0 * (NUM_CLASSES as f64).ln()).abs() < 1e-9);
        assert_eq!(g.scalar_value(loss.mse), 0.0);
        // Zero prototypes leave every head at ln(4) and λ sums to 1.7.
        let want_fr = 1.7 * 2.0 * (NUM_CLASSES as f64).ln();
        assert!((g.scalar_value(loss.fr) - want_fr).abs() < 1e-9);
        let total = g.scalar_value(loss.total);
        let sum = g.scalar_value(loss.ce) + g.scalar_value(loss.mse) + g.scalar_value(loss.fr);
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_removes_the_refinement_term() {
        let mut config = tiny_config();
        config.lambda = vec![0.0; 3];
        let (store, model) = build(config, 6);
        let coords = random_coords(2, 8, 7);
        let (mut g, out) = forward_tensors(&model, &store, &coords);
        let y_a = Tensor::zeros(vec![2, AFFECTIVE_DIM]);
        let fr_state = FrState::new(3);
        let loss = model.total_loss(&mut g, &store, &out, &[1, 3], &y_a, &fr_state).unwrap();
        assert_eq!(g.scalar_value(loss.fr), 0.0);
        let total = g.scalar_value(loss.total);
        let sum = g.scalar_value(loss.ce) + g.scalar_value(loss.mse);
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn affective_head_does_not_touch_classification() {
        let (mut store, model) = build(tiny_config(), 8);
        let coords = random_coords(2, 8, 9);
        let labels = [1usize, 2];
        let y_a = Tensor::zeros(vec![2, AFFECTIVE_DIM]);
        let fr_state = FrState::new(3);

        let (mut g, out) = forward_tensors(&model, &store, &coords);
        let before = model.total_loss(&mut g, &store, &out, &labels, &y_a, &fr_state).unwrap();
        let ce_before = g.scalar_value(before.ce);
        let mse_before = g.scalar_value(before.mse);

        for name in ["aff.w", "aff.b"] {
            let id = store.id_of(name).unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let (mut g, out) = forward_tensors(&model, &store, &coords);
        let after = model.total_loss(&mut g, &store, &out, &labels, &y_a, &fr_state).unwrap();
        assert_eq!(g.scalar_value(after.ce), ce_before);
        assert_ne!(g.scalar_value(after.mse), mse_before);
        assert_eq!(g.scalar_value(after.mse), 0.0);
    }

    #[test]
    fn prediction_averages_streams_and_breaks_ties_low() {
        let p = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = Tensor::new(vec![2, 4], vec![0.0, 0.0, 1.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(predict_classes(&p, &m), vec![0, 3]);
        assert_eq!(predict_classes(&m, &m), vec![2, 3]);
        let conf = confidences(&p, &m);
        assert!((conf[0] - 0.5).abs() < 1e-12);
        assert!((conf[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_predict_identically() {
        let (store, model) = build(tiny_config(), 10);
        let base = random_coords(2, 8, 11);
        let mut tripled = Vec::from(base.data());
        tripled.extend_from_slice(&base.data()[..base.data().len() / 2]);
        let coords = Tensor::new(vec![3, 3, 8, JOINT_COUNT], tripled).unwrap();

        let (g2, o2) = forward_tensors(&model, &store, &base);
        let (g3, o3) = forward_tensors(&model, &store, &coords);
        let pred2 = predict_classes(&g2.to_tensor(o2.probs_p), &g2.to_tensor(o2.probs_m));
        let pred3 = predict_classes(&g3.to_tensor(o3.probs_p), &g3.to_tensor(o3.probs_m));
        assert_eq!(pred3[0], pred2[0]);
        assert_eq!(pred3[1], pred2[1]);
        assert_eq!(pred3[2], pred2[0]);
    }

    #[test]
    fn fusion_position_changes_the_forward_value() {
        let coords = random_coords(1, 8, 12);
        let mut values = Vec::new();
        for pos in 1..=3 {
            let config = ModelConfig { bcsf_position: Some(pos), ..tiny_config() };
            let (store, model) = build(config, 13);
            let (g, out) = forward_tensors(&model, &store, &coords);
            values.push(g.to_tensor(out.probs_p));
        }
        assert!(values[0].max_abs_diff(&values[1]) > 0.0);
        assert!(values[1].max_abs_diff(&values[2]) > 0.0);
    }

    #[test]
    fn config_json_round_trips_with_partial_overrides() {
        let parsed: ModelConfig =
            serde_json::from_str(r#"{"heads": 4, "bcsf_position": 3}"#).unwrap();
        assert_eq!(parsed.heads, 4);
        assert_eq!(parsed.bcsf_position, Some(3));
        assert_eq!(parsed.block_count, 4);
        assert_eq!(parsed.frames, MODEL_FRAMES);
        let json = serde_json::to_string(&parsed).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, parsed);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { bcsf_position: Some(5), ..ModelConfig::default() }
            .validate()
            .is_err());
        assert!(ModelConfig { lambda: vec![1.0; 3], ..ModelConfig::default() }
            .validate()
            .is_err());
        assert!(ModelConfig { lambda: vec![-1.0, 0.2, 0.5, 1.0], ..ModelConfig::default() }
            .validate()
            .is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (mut store, model) = build(tiny_config(), 14);
        let coords = random_coords(2, 8, 15);
        let labels = [0usize, 3];
        let mut rng = stream_rng(16, "model-ya", 0);
        let y_a = {
            let data = (0..2 * AFFECTIVE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![2, AFFECTIVE_DIM], data).unwrap()
        };
        let mut fr_state = FrState::new(3);
        for bank in fr_state.posture.iter_mut().chain(fr_state.motion.iter_mut()) {
            for c in 0..NUM_CLASSES {
                let z: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let z: Vec<f64> = z.iter().map(|v| v / norm).collect();
                bank.update(&z, c);
            }
        }
        let (posture, motion) = stream_inputs(&coords).unwrap();

        let report = gradcheck::check_sampled(&mut store, 30, 1e-5, 2, 17, |g, store| {
            let pv = g.constant(posture.clone());
            let mv = g.constant(motion.clone());
            let out = model.forward(g, store, pv, mv)?;
            let loss = model.total_loss(g, store, &out, &labels, &y_a, &fr_state)?;
            Ok(loss.total)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "{} at {}",
            report.max_rel_err,
            report.worst_entry
        );
    }
}
