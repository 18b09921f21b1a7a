//! Bidirectional cross-stream fusion.
//!
//! Two equal-shaped stream features exchange information through per-joint
//! temporal cross-attention (each stream queries the other) followed by a
//! per-joint sigmoid gate on the other stream's result. The two directions
//! are parameterized independently and can be disabled separately; with
//! both parts off the module passes its inputs through untouched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LN_EPS;
use crate::tensor::{uniform_fan_in, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

/// Which fusion parts are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionParts {
    pub temporal: bool,
    pub spatial: bool,
}

impl Default for FusionParts {
    fn default() -> Self {
        FusionParts { temporal: true, spatial: true }
    }
}

/// One direction of temporal cross-attention with its post-norm pair.
struct CrossTransform {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

impl CrossTransform {
    fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let d_ff = 2 * c;
        Ok(CrossTransform {
            w_q: store.register(&format!("{prefix}.wq"), uniform_fan_in(vec![c, c], c, rng))?,
            w_k: store.register(&format!("{prefix}.wk"), uniform_fan_in(vec![c, c], c, rng))?,
            w_v: store.register(&format!("{prefix}.wv"), uniform_fan_in(vec![c, c], c, rng))?,
            w_o: store.register(&format!("{prefix}.wo"), uniform_fan_in(vec![c, c], c, rng))?,
            ln1_gamma: store.register(&format!("{prefix}.ln1.g"), Tensor::filled(vec![c], E::one()))?,
            ln1_beta: store.register(&format!("{prefix}.ln1.b"), Tensor::zeros(vec![c]))?,
            ln2_gamma: store.register(&format!("{prefix}.ln2.g"), Tensor::filled(vec![c], E::one()))?,
            ln2_beta: store.register(&format!("{prefix}.ln2.b"), Tensor::zeros(vec![c]))?,
            ffn_w1: store.register(&format!("{prefix}.ffn.w1"), uniform_fan_in(vec![c, d_ff], c, rng))?,
            ffn_b1: store.register(&format!("{prefix}.ffn.b1"), Tensor::zeros(vec![d_ff]))?,
            ffn_w2: store.register(&format!("{prefix}.ffn.w2"), uniform_fan_in(vec![d_ff, c], d_ff, rng))?,
            ffn_b2: store.register(&format!("{prefix}.ffn.b2"), Tensor::zeros(vec![c]))?,
        })
    }

    /// Multi-head attention on token tracks `[M, T, C]`: queries from `a`,
    /// keys and values from `b`.
    fn attention<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        a: Var,
        b: Var,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let shape = g.shape(a).to_vec();
        let (m, t, c) = (shape[0], shape[1], shape[2]);
        let d = c / heads;
        let split = |g: &mut Graph<E>, v: Var| -> Result<Var, TensorError> {
            let v = g.reshape(v, vec![m, t, heads, d])?;
            g.permute(v, &[0, 2, 1, 3])
        };
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let q = g.matmul(a, wq)?;
        let k = g.matmul(b, wk)?;
        let v = g.matmul(b, wv)?;
        let q = split(g, q)?;
        let k = split(g, k)?;
        let v = split(g, v)?;
        let ctx = g.scaled_dot_attention(q, k, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![m, t, c])?;
        let wo = g.param(store, self.w_o);
        g.matmul(ctx, wo)
    }

    /// Cross-attention, both post-norm residuals, and the outer residual
    /// back onto the query stream.
    fn apply<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        a: Var,
        b: Var,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let attended = self.attention(g, store, a, b, heads)?;
        let summed = g.add(attended, a)?;
        let g1 = g.param(store, self.ln1_gamma);
        let b1 = g.param(store, self.ln1_beta);
        let f1 = g.layer_norm(summed, g1, b1, 2, LN_EPS)?;

        let w1 = g.param(store, self.ffn_w1);
        let bias1 = g.param(store, self.ffn_b1);
        let hidden = g.matmul(f1, w1)?;
        let hidden = g.add(hidden, bias1)?;
        let hidden = g.relu(hidden);
        let w2 = g.param(store, self.ffn_w2);
        let bias2 = g.param(store, self.ffn_b2);
        let ffn = g.matmul(hidden, w2)?;
        let ffn = g.add(ffn, bias2)?;
        let summed = g.add(ffn, f1)?;
        let g2 = g.param(store, self.ln2_gamma);
        let b2 = g.param(store, self.ln2_beta);
        let normed = g.layer_norm(summed, g2, b2, 2, LN_EPS)?;
        g.add(normed, a)
    }
}

/// Per-joint sigmoid gate computed from the other stream.
struct SpatialGate {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SpatialGate {
    fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        n: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(SpatialGate {
            w1: store.register(&format!("{prefix}.w1"), uniform_fan_in(vec![n, n], n, rng))?,
            b1: store.register(&format!("{prefix}.b1"), Tensor::zeros(vec![n]))?,
            w2: store.register(&format!("{prefix}.w2"), uniform_fan_in(vec![n, n], n, rng))?,
            b2: store.register(&format!("{prefix}.b2"), Tensor::zeros(vec![n]))?,
        })
    }

    /// Joint weights in (0,1) from tokens `[B*N, T, C]`, shaped `[B*N, 1, 1]`
    /// for broadcasting back onto the tokens.
    fn weights<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        other: Var,
        batch: usize,
        n: usize,
    ) -> Result<Var, TensorError> {
        let pooled = g.reduce_mean(other, &[1, 2])?;
        let pooled = g.reshape(pooled, vec![batch, n])?;
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let hidden = g.matmul(pooled, w1)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.relu(hidden);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let out = g.matmul(hidden, w2)?;
        let out = g.add(out, b2)?;
        let gate = g.sigmoid(out);
        g.reshape(gate, vec![batch * n, 1, 1])
    }
}

/// The full bidirectional module over `[B, C, T, N]` stream pairs.
pub struct BcsfLayer<E: Scalar> {
    pub c: usize,
    pub n: usize,
    pub heads: usize,
    ct_p: Option<CrossTransform>,
    ct_m: Option<CrossTransform>,
    gate_p: Option<SpatialGate>,
    gate_m: Option<SpatialGate>,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Scalar> BcsfLayer<E> {
    /// Registers the enabled parts for both directions. Direction `p`
    /// produces the first output (first stream queries the second).
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c: usize,
        n: usize,
        heads: usize,
        parts: FusionParts,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "fusion width {c} is not divisible by {heads} heads"
            )));
        }
        let (ct_p, ct_m) = if parts.temporal {
            (
                Some(CrossTransform::register(store, &format!("{prefix}.p"), c, rng)?),
                Some(CrossTransform::register(store, &format!("{prefix}.m"), c, rng)?),
            )
        } else {
            (None, None)
        };
        let (gate_p, gate_m) = if parts.spatial {
            (
                Some(SpatialGate::register(store, &format!("{prefix}.p.mlp"), n, rng)?),
                Some(SpatialGate::register(store, &format!("{prefix}.m.mlp"), n, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(BcsfLayer { c, n, heads, ct_p, ct_m, gate_p, gate_m, _marker: std::marker::PhantomData })
    }

    pub fn parts(&self) -> FusionParts {
        FusionParts { temporal: self.ct_p.is_some(), spatial: self.gate_p.is_some() }
    }

    /// Fuses the two streams; outputs keep the input shapes and order.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        f_p: Var,
        f_m: Var,
    ) -> Result<(Var, Var), TensorError> {
        let shape = g.shape(f_p).to_vec();
        if g.shape(f_m) != shape.as_slice() {
            return Err(TensorError::shape(
                "bcsf_forward",
                format!("stream shapes differ: {:?} vs {:?}", shape, g.shape(f_m)),
            ));
        }
        if shape.len() != 4 || shape[1] != self.c || shape[3] != self.n {
            return Err(TensorError::shape(
                "bcsf_forward",
                format!("expected [B, {}, T, {}], got {shape:?}", self.c, self.n),
            ));
        }
        if self.ct_p.is_none() && self.gate_p.is_none() {
            return Ok((f_p, f_m));
        }
        let (b, t, n) = (shape[0], shape[2], shape[3]);

        let to_tokens = |g: &mut Graph<E>, x: Var| -> Result<Var, TensorError> {
            let x = g.permute(x, &[0, 3, 2, 1])?;
            g.reshape(x, vec![b * n, t, self.c])
        };
        let tok_p = to_tokens(g, f_p)?;
        let tok_m = to_tokens(g, f_m)?;

        let ct_p = match &self.ct_p {
            Some(ct) => ct.apply(g, store, tok_p, tok_m, self.heads)?,
            None => tok_p,
        };
        let ct_m = match &self.ct_m {
            Some(ct) => ct.apply(g, store, tok_m, tok_p, self.heads)?,
            None => tok_m,
        };

        let fused_p = match &self.gate_p {
            Some(gate) => {
                let w = gate.weights(g, store, ct_m, b, n)?;
                let scaled = g.mul(ct_m, w)?;
                g.add(scaled, ct_p)?
            }
            None => ct_p,
        };
        let fused_m = match &self.gate_m {
            Some(gate) => {
                let w = gate.weights(g, store, ct_p, b, n)?;
                let scaled = g.mul(ct_p, w)?;
                g.add(scaled, ct_m)?
            }
            None => ct_m,
        };

        let to_features = |g: &mut Graph<E>, x: Var| -> Result<Var, TensorError> {
            let x = g.reshape(x, vec![b, n, t, self.c])?;
            g.permute(x, &[0, 3, 2, 1])
        };
        Ok((to_features(g, fused_p)?, to_features(g, fused_m)?))
    }
}
