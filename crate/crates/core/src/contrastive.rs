//! Per-block feature refinement.
//!
//! Each block output is pooled, projected to a shared 64-d space, and
//! L2-normalized, then scored against one moving prototype per class with
//! an InfoNCE loss. Prototypes sit outside the parameter store: they take
//! no gradient and move only by exponential averaging over embeddings of
//! samples the classifier is already confident about, so ambiguous samples
//! are pulled toward the confident cluster of their class.

use rand::Rng;

use crate::data::NUM_CLASSES;
use crate::tensor::{uniform_fan_in, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

/// Embedding width shared by every refinement head.
pub const PROJ_DIM: usize = 64;
/// Softmax temperature for prototype similarities.
pub const TEMPERATURE: f64 = 0.1;
/// Minimum classifier confidence for a sample to move its prototype.
pub const CONFIDENCE_THRESHOLD: f64 = 0.8;
/// Fraction of the old prototype kept per update.
pub const EMA_MOMENTUM: f64 = 0.9;

/// One prototype row per class, updated outside the gradient tape.
#[derive(Debug, Clone)]
pub struct Prototypes<E: Scalar> {
    pub values: Tensor<E>,
}

impl<E: Scalar> Default for Prototypes<E> {
    fn default() -> Self {
        Prototypes { values: Tensor::zeros(vec![NUM_CLASSES, PROJ_DIM]) }
    }
}

impl<E: Scalar> Prototypes<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// EMA step for one confident sample's class row.
    pub fn update(&mut self, z: &[E], class: usize) {
        let m = E::from_f64(EMA_MOMENTUM);
        let w = E::from_f64(1.0 - EMA_MOMENTUM);
        let row = &mut self.values.data_mut()[class * PROJ_DIM..(class + 1) * PROJ_DIM];
        for (p, &zi) in row.iter_mut().zip(z) {
            *p = m * *p + w * zi;
        }
    }

    /// Applies the gated EMA over a batch of embeddings in batch order.
    pub fn update_batch(&mut self, z: &Tensor<E>, labels: &[usize], confidences: &[f64]) {
        for (i, (&label, &conf)) in labels.iter().zip(confidences).enumerate() {
            if conf > CONFIDENCE_THRESHOLD {
                self.update(&z.data()[i * PROJ_DIM..(i + 1) * PROJ_DIM], label);
            }
        }
    }
}

/// InfoNCE of normalized embeddings `[B, 64]` against fixed prototypes.
pub fn prototype_infonce<E: Scalar>(
    g: &mut Graph<E>,
    z: Var,
    prototypes: &Prototypes<E>,
    labels: &[usize],
) -> Result<Var, TensorError> {
    let protos = g.constant(prototypes.values.clone());
    let protos_t = g.transpose(protos)?;
    let sims = g.matmul(z, protos_t)?;
    let logits = g.scale(sims, 1.0 / TEMPERATURE);
    g.cross_entropy(logits, labels)
}

/// Pooled projection head for one block of one stream.
pub struct FrHead<E: Scalar> {
    pub c_in: usize,
    w: ParamId,
    b: ParamId,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Scalar> FrHead<E> {
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(FrHead {
            c_in,
            w: store
                .register(&format!("{prefix}.w"), uniform_fan_in(vec![c_in, PROJ_DIM], c_in, rng))?,
            b: store.register(&format!("{prefix}.b"), Tensor::zeros(vec![PROJ_DIM]))?,
            _marker: std::marker::PhantomData,
        })
    }

    /// `[B, C, T, N]` -> unit-norm `[B, 64]`.
    pub fn embed(&self, g: &mut Graph<E>, store: &ParamStore<E>, f: Var) -> Result<Var, TensorError> {
        let shape = g.shape(f).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(TensorError::shape(
                "fr_embed",
                format!("expected [B, {}, T, N], got {shape:?}", self.c_in),
            ));
        }
        let pooled = g.reduce_mean(f, &[2, 3])?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let proj = g.matmul(pooled, w)?;
        let proj = g.add(proj, b)?;
        let norm = g.norm_axis(proj, 1)?;
        let norm = g.clamp_min(norm, 1e-12);
        g.div(proj, norm)
    }

    /// Embeds the block output and scores it against the prototypes.
    /// Returns the loss and the embeddings for the caller's EMA step.
    pub fn loss(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        f: Var,
        labels: &[usize],
        prototypes: &Prototypes<E>,
    ) -> Result<(Var, Var), TensorError> {
        let z = self.embed(g, store, f)?;
        let loss = prototype_infonce(g, z, prototypes, labels)?;
        Ok((loss, z))
    }
}

/// Full refinement step: loss on the incoming prototypes, then the gated
/// EMA update from the detached embeddings.
pub fn fr_contrastive<E: Scalar>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    head: &FrHead<E>,
    f: Var,
    labels: &[usize],
    confidences: &[f64],
    prototypes: &mut Prototypes<E>,
) -> Result<Var, TensorError> {
    let (loss, z) = head.loss(g, store, f, labels, prototypes)?;
    let z = g.to_tensor(z);
    prototypes.update_batch(&z, labels, confidences);
    Ok(loss)
}
