//! Per-joint temporal attention.
//!
//! Features `[B, C, T, N]` are regrouped so every joint contributes an
//! independent track of T tokens, attended over time by multi-head
//! self-attention, then passed through the usual post-norm residual pair
//! (attention, feed-forward) and a trailing pointwise convolution that
//! optionally halves the frame rate. A plain strided temporal convolution
//! is available as a drop-in alternative for baseline configurations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{uniform_fan_in, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Which temporal unit a block uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemporalKind {
    /// Multi-head self-attention over frames.
    Attention,
    /// Strided temporal convolution with ReLU.
    Tcn { kernel: usize },
}

/// Multi-head self-attention over the middle axis of `[M, T, C_in]`.
pub struct Mhsa<E: Scalar> {
    pub c_in: usize,
    pub c_out: usize,
    pub heads: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Scalar> Mhsa<E> {
    /// Registers the four projection matrices. The attention width equals
    /// `c_out` and must be divisible by `heads`.
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if heads == 0 || c_out % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention width {c_out} is not divisible by {heads} heads"
            )));
        }
        let w_q = store.register(&format!("{prefix}.wq"), uniform_fan_in(vec![c_in, c_out], c_in, rng))?;
        let w_k = store.register(&format!("{prefix}.wk"), uniform_fan_in(vec![c_in, c_out], c_in, rng))?;
        let w_v = store.register(&format!("{prefix}.wv"), uniform_fan_in(vec![c_in, c_out], c_in, rng))?;
        let w_o =
            store.register(&format!("{prefix}.wo"), uniform_fan_in(vec![c_out, c_out], c_out, rng))?;
        Ok(Mhsa { c_in, c_out, heads, w_q, w_k, w_v, w_o, _marker: std::marker::PhantomData })
    }

    /// Scaled dot-product attention per head, concatenated and projected.
    pub fn forward(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.c_in {
            return Err(TensorError::shape(
                "mhsa",
                format!("expected [M, T, {}], got {:?}", self.c_in, shape),
            ));
        }
        let (m, t) = (shape[0], shape[1]);
        let (h, d) = (self.heads, self.c_out / self.heads);
        let split = |g: &mut Graph<E>, v: Var| -> Result<Var, TensorError> {
            let v = g.reshape(v, vec![m, t, h, d])?;
            g.permute(v, &[0, 2, 1, 3])
        };
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let q = split(g, q)?;
        let k = split(g, k)?;
        let v = split(g, v)?;
        let ctx = g.scaled_dot_attention(q, k, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![m, t, self.c_out])?;
        let wo = g.param(store, self.w_o);
        g.matmul(ctx, wo)
    }
}

/// Transformer unit over `[B, C_in, T, N]`: positional embedding, per-joint
/// MHSA and FFN with post-norm residuals, then a strided pointwise conv.
pub struct TransformerLayer<E: Scalar> {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub stride: usize,
    mhsa: Mhsa<E>,
    /// Projects the residual when the unit changes channel width.
    shortcut: Option<ParamId>,
    pos_embed: Option<ParamId>,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    down_w: ParamId,
    down_b: ParamId,
}

impl<E: Scalar> TransformerLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        t_in: usize,
        stride: usize,
        heads: usize,
        positional: bool,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let mhsa = Mhsa::register(store, &format!("{prefix}.attn"), c_in, c_out, heads, rng)?;
        let shortcut = if c_in == c_out {
            None
        } else {
            Some(store.register(
                &format!("{prefix}.shortcut"),
                uniform_fan_in(vec![c_in, c_out], c_in, rng),
            )?)
        };
        let pos_embed = if positional {
            Some(store.register(&format!("{prefix}.pos"), Tensor::zeros(vec![t_in, c_in]))?)
        } else {
            None
        };
        let d_ff = 2 * c_out;
        Ok(TransformerLayer {
            c_in,
            c_out,
            t_in,
            stride,
            mhsa,
            shortcut,
            pos_embed,
            ln1_gamma: store.register(&format!("{prefix}.ln1.g"), Tensor::filled(vec![c_out], E::one()))?,
            ln1_beta: store.register(&format!("{prefix}.ln1.b"), Tensor::zeros(vec![c_out]))?,
            ln2_gamma: store.register(&format!("{prefix}.ln2.g"), Tensor::filled(vec![c_out], E::one()))?,
            ln2_beta: store.register(&format!("{prefix}.ln2.b"), Tensor::zeros(vec![c_out]))?,
            ffn_w1: store
                .register(&format!("{prefix}.ffn.w1"), uniform_fan_in(vec![c_out, d_ff], c_out, rng))?,
            ffn_b1: store.register(&format!("{prefix}.ffn.b1"), Tensor::zeros(vec![d_ff]))?,
            ffn_w2: store
                .register(&format!("{prefix}.ffn.w2"), uniform_fan_in(vec![d_ff, c_out], d_ff, rng))?,
            ffn_b2: store.register(&format!("{prefix}.ffn.b2"), Tensor::zeros(vec![c_out]))?,
            down_w: store
                .register(&format!("{prefix}.down.w"), uniform_fan_in(vec![c_out, c_out], c_out, rng))?,
            down_b: store.register(&format!("{prefix}.down.b"), Tensor::zeros(vec![c_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(TensorError::shape(
                "transformer_forward",
                format!("expected [B, {}, T, N], got {:?}", self.c_in, shape),
            ));
        }
        let (b, t, n) = (shape[0], shape[2], shape[3]);
        let tokens = g.permute(x, &[0, 3, 2, 1])?;
        let mut tokens = g.reshape(tokens, vec![b * n, t, self.c_in])?;
        if let Some(pe) = self.pos_embed {
            let pe = g.param(store, pe);
            tokens = g.add(tokens, pe)?;
        }

        let attended = self.mhsa.forward(g, store, tokens)?;
        let residual = match self.shortcut {
            Some(w) => {
                let w = g.param(store, w);
                g.matmul(tokens, w)?
            }
            None => tokens,
        };
        let summed = g.add(attended, residual)?;
        let g1 = g.param(store, self.ln1_gamma);
        let b1 = g.param(store, self.ln1_beta);
        let f_att = g.layer_norm(summed, g1, b1, 2, LN_EPS)?;

        let w1 = g.param(store, self.ffn_w1);
        let bias1 = g.param(store, self.ffn_b1);
        let hidden = g.matmul(f_att, w1)?;
        let hidden = g.add(hidden, bias1)?;
        let hidden = g.relu(hidden);
        let w2 = g.param(store, self.ffn_w2);
        let bias2 = g.param(store, self.ffn_b2);
        let ffn = g.matmul(hidden, w2)?;
        let ffn = g.add(ffn, bias2)?;
        let summed = g.add(ffn, f_att)?;
        let g2 = g.param(store, self.ln2_gamma);
        let b2 = g.param(store, self.ln2_beta);
        let f_trans = g.layer_norm(summed, g2, b2, 2, LN_EPS)?;

        let back = g.reshape(f_trans, vec![b, n, t, self.c_out])?;
        let back = g.permute(back, &[0, 3, 2, 1])?;
        let w = g.param(store, self.down_w);
        let bias = g.param(store, self.down_b);
        g.pointwise_conv(back, w, Some(bias), self.stride)
    }
}

/// Temporal convolution unit: ReLU after a strided odd-kernel convolution.
pub struct TcnLayer<E: Scalar> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    w: ParamId,
    b: ParamId,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Scalar> TcnLayer<E> {
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if kernel % 2 == 0 {
            return Err(TensorError::Invalid(format!("temporal kernel {kernel} must be odd")));
        }
        let w = store.register(
            &format!("{prefix}.w"),
            uniform_fan_in(vec![c_out, c_in, kernel], c_in * kernel, rng),
        )?;
        let b = store.register(&format!("{prefix}.b"), Tensor::zeros(vec![c_out]))?;
        Ok(TcnLayer { c_in, c_out, kernel, stride, w, b, _marker: std::marker::PhantomData })
    }

    pub fn forward(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.temporal_conv(x, w, Some(b), self.stride)?;
        Ok(g.relu(y))
    }
}

/// A block's temporal unit, chosen by configuration.
pub enum TemporalLayer<E: Scalar> {
    Attention(TransformerLayer<E>),
    Conv(TcnLayer<E>),
}

impl<E: Scalar> TemporalLayer<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        kind: &TemporalKind,
        c_in: usize,
        c_out: usize,
        t_in: usize,
        stride: usize,
        heads: usize,
        positional: bool,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(match kind {
            TemporalKind::Attention => TemporalLayer::Attention(TransformerLayer::register(
                store, prefix, c_in, c_out, t_in, stride, heads, positional, rng,
            )?),
            TemporalKind::Tcn { kernel } => TemporalLayer::Conv(TcnLayer::register(
                store, prefix, c_in, c_out, *kernel, stride, rng,
            )?),
        })
    }

    pub fn forward(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var, TensorError> {
        match self {
            TemporalLayer::Attention(l) => l.forward(g, store, x),
            TemporalLayer::Conv(l) => l.forward(g, store, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, "attention-test", 0);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    /// Plain single-head attention: softmax(Q Kᵀ / sqrt(C)) V, projected.
    fn direct_single_head(x: &[f64], t: usize, c: usize, store: &ParamStore<f64>) -> Vec<f64> {
        let w = |name: &str| store.get(store.id_of(name).unwrap()).data().to_vec();
        let q = matmul_2d(x, &w("a.wq"), t, c, c);
        let k = matmul_2d(x, &w("a.wk"), t, c, c);
        let v = matmul_2d(x, &w("a.wv"), t, c, c);
        let mut ctx = vec![0.0; t * c];
        for i in 0..t {
            let mut scores: Vec<f64> = (0..t)
                .map(|j| {
                    (0..c).map(|l| q[i * c + l] * k[j * c + l]).sum::<f64>() / (c as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in &mut scores {
                *s = (*s - max).exp();
                z += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                for l in 0..c {
                    ctx[i * c + l] += s / z * v[j * c + l];
                }
            }
        }
        matmul_2d(&ctx, &w("a.wo"), t, c, c)
    }

    #[test]
    fn single_head_matches_direct_evaluation() {
        let (t, c) = (5, 4);
        for trial in 0..10u64 {
            let mut store = ParamStore::new();
            let mut rng = stream_rng(trial, "mhsa-oracle", 1);
            let mhsa = Mhsa::register(&mut store, "a", c, c, 1, &mut rng).unwrap();
            let x = random_tensor(vec![2, t, c], trial + 100);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = mhsa.forward(&mut g, &store, xv).unwrap();
            for m in 0..2 {
                let rows = &x.data()[m * t * c..(m + 1) * t * c];
                let want = direct_single_head(rows, t, c, &store);
                let got = &g.data(out)[m * t * c..(m + 1) * t * c];
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-6, "trial {trial}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn output_shape_matches_input_tokens() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, "mhsa-shape", 0);
        let mhsa = Mhsa::register(&mut store, "a", 64, 64, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_tensor(vec![16, 48, 64], 0));
        let out = mhsa.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(out), &[16, 48, 64]);
    }

    #[test]
    fn constant_keys_average_the_values() {
        let (m, t, c) = (3, 6, 4);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(2, "mhsa-uniform", 0);
        let mhsa = Mhsa::register(&mut store, "a", c, c, 2, &mut rng).unwrap();
        let wk = store.id_of("a.wk").unwrap();
        for v in store.get_mut(wk).data_mut() {
            *v = 0.0;
        }
        let x = random_tensor(vec![m, t, c], 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = mhsa.forward(&mut g, &store, xv).unwrap();

        let wv = store.get(store.id_of("a.wv").unwrap()).data();
        let wo = store.get(store.id_of("a.wo").unwrap()).data();
        for mi in 0..m {
            let rows = &x.data()[mi * t * c..(mi + 1) * t * c];
            let v = matmul_2d(rows, wv, t, c, c);
            let mut mean = vec![0.0; c];
            for ti in 0..t {
                for l in 0..c {
                    mean[l] += v[ti * c + l] / t as f64;
                }
            }
            let want = matmul_2d(&mean, wo, 1, c, c);
            for ti in 0..t {
                let got = &g.data(out)[(mi * t + ti) * c..(mi * t + ti + 1) * c];
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_head_count_not_dividing_width() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, "mhsa-heads", 0);
        assert!(Mhsa::<f64>::register(&mut store, "a", 6, 6, 4, &mut rng).is_err());
    }

    fn permute_frames(x: &Tensor<f64>, t_axis_len: usize, perm: &[usize], c: usize) -> Tensor<f64> {
        let shape = x.shape().to_vec();
        let m = shape[0];
        let mut out = vec![0.0; x.data().len()];
        for mi in 0..m {
            for ti in 0..t_axis_len {
                let src = (mi * t_axis_len + perm[ti]) * c;
                let dst = (mi * t_axis_len + ti) * c;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
        Tensor::new(shape, out).unwrap()
    }

    #[test]
    fn attention_commutes_with_frame_permutation() {
        let (m, t, c) = (2, 7, 8);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(4, "mhsa-equivariance", 0);
        let mhsa = Mhsa::register(&mut store, "a", c, c, 4, &mut rng).unwrap();
        let perm = vec![3, 0, 6, 1, 5, 2, 4];
        let x = random_tensor(vec![m, t, c], 9);
        let xp = permute_frames(&x, t, &perm, c);

        let mut g = Graph::new();
        let xv = g.constant(x);
        let base = mhsa.forward(&mut g, &store, xv).unwrap();
        let base_permuted = permute_frames(&g.to_tensor(base), t, &perm, c);
        let xpv = g.constant(xp);
        let out = mhsa.forward(&mut g, &store, xpv).unwrap();
        assert!(g.to_tensor(out).max_abs_diff(&base_permuted) < 1e-6);
    }

    fn build_layer(
        c_in: usize,
        c_out: usize,
        t_in: usize,
        stride: usize,
        heads: usize,
        positional: bool,
        seed: u64,
    ) -> (ParamStore<f64>, TransformerLayer<f64>) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "layer-init", 0);
        let layer = TransformerLayer::register(
            &mut store, "t", c_in, c_out, t_in, stride, heads, positional, &mut rng,
        )
        .unwrap();
        (store, layer)
    }

    #[test]
    fn layer_without_positions_commutes_with_frame_permutation() {
        let (store, layer) = build_layer(6, 6, 5, 1, 2, false, 11);
        let perm = vec![4, 2, 0, 3, 1];
        let x = random_tensor(vec![2, 6, 5, 4], 12);

        // Permute along the frame axis of [B, C, T, N].
        let mut xp = x.clone();
        for b in 0..2 {
            for c in 0..6 {
                for t in 0..5 {
                    for n in 0..4 {
                        let src = ((b * 6 + c) * 5 + perm[t]) * 4 + n;
                        let dst = ((b * 6 + c) * 5 + t) * 4 + n;
                        xp.data_mut()[dst] = x.data()[src];
                    }
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let base = layer.forward(&mut g, &store, xv).unwrap();
        let base = g.to_tensor(base);
        let mut want = base.clone();
        for b in 0..2 {
            for c in 0..6 {
                for t in 0..5 {
                    for n in 0..4 {
                        let src = ((b * 6 + c) * 5 + perm[t]) * 4 + n;
                        let dst = ((b * 6 + c) * 5 + t) * 4 + n;
                        want.data_mut()[dst] = base.data()[src];
                    }
                }
            }
        }
        let xpv = g.constant(xp);
        let out = layer.forward(&mut g, &store, xpv).unwrap();
        assert!(g.to_tensor(out).max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn positional_embedding_breaks_order_blindness() {
        let (mut store, layer) = build_layer(6, 6, 5, 1, 2, true, 13);
        let pe = store.id_of("t.pos").unwrap();
        let mut rng = stream_rng(13, "layer-pe", 0);
        for v in store.get_mut(pe).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let x = random_tensor(vec![1, 6, 5, 4], 14);
        let mut reversed = x.clone();
        for c in 0..6 {
            for t in 0..5 {
                for n in 0..4 {
                    reversed.data_mut()[(c * 5 + t) * 4 + n] = x.data()[(c * 5 + (4 - t)) * 4 + n];
                }
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let base = layer.forward(&mut g, &store, xv).unwrap();
        let base = g.to_tensor(base);
        let mut want = base.clone();
        for c in 0..6 {
            for t in 0..5 {
                for n in 0..4 {
                    want.data_mut()[(c * 5 + t) * 4 + n] = base.data()[(c * 5 + (4 - t)) * 4 + n];
                }
            }
        }
        let rv = g.constant(reversed);
        let out = layer.forward(&mut g, &store, rv).unwrap();
        assert!(
            g.to_tensor(out).max_abs_diff(&want) > 1e-3,
            "positions should make reversal visible"
        );
    }

    #[test]
    fn stride_two_halves_frames() {
        let (store, layer) = build_layer(8, 8, 24, 2, 2, true, 15);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(vec![2, 8, 24, 16], 15));
        let out = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(out), &[2, 8, 12, 16]);

        let (store1, layer1) = build_layer(8, 8, 24, 1, 2, true, 16);
        let x = g.constant(random_tensor(vec![2, 8, 24, 16], 16));
        let out = layer1.forward(&mut g, &store1, x).unwrap();
        assert_eq!(g.shape(out), &[2, 8, 24, 16]);
    }

    #[test]
    fn zeroed_projections_collapse_to_normalized_passthrough() {
        let (mut store, layer) = build_layer(4, 4, 6, 2, 2, false, 17);
        // Randomize the LN affines so the oracle exercises them.
        let mut rng = stream_rng(17, "layer-collapse", 0);
        for name in ["t.ln1.g", "t.ln1.b", "t.ln2.g", "t.ln2.b"] {
            let id = store.id_of(name).unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
        for name in ["t.attn.wo", "t.ffn.w2"] {
            let id = store.id_of(name).unwrap();
            for v in store.get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let eye_id = store.id_of("t.down.w").unwrap();
        let w = store.get_mut(eye_id);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }

        let x = random_tensor(vec![2, 4, 6, 3], 18);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = layer.forward(&mut g, &store, xv).unwrap();

        // Oracle: tokens -> LN -> LN -> back -> stride-2 subsample.
        let tokens = g.permute(xv, &[0, 3, 2, 1]).unwrap();
        let tokens = g.reshape(tokens, vec![6, 6, 4]).unwrap();
        let g1 = g.param(&store, store.id_of("t.ln1.g").unwrap());
        let b1 = g.param(&store, store.id_of("t.ln1.b").unwrap());
        let ln1 = g.layer_norm(tokens, g1, b1, 2, LN_EPS).unwrap();
        let g2 = g.param(&store, store.id_of("t.ln2.g").unwrap());
        let b2 = g.param(&store, store.id_of("t.ln2.b").unwrap());
        let ln2 = g.layer_norm(ln1, g2, b2, 2, LN_EPS).unwrap();
        let back = g.reshape(ln2, vec![2, 3, 6, 4]).unwrap();
        let back = g.permute(back, &[0, 3, 2, 1]).unwrap();
        let want = g.downsample(back, 2, 2).unwrap();
        assert!(g.to_tensor(out).max_abs_diff(&g.to_tensor(want)) < 1e-12);
    }

    #[test]
    fn tcn_is_a_strided_relu_convolution() {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(20, "tcn", 0);
        let tcn = TcnLayer::register(&mut store, "c", 1, 1, 3, 2, &mut rng).unwrap();
        // Identity center tap passes the input through the ReLU.
        let w = store.get_mut(store.id_of("c.w").unwrap());
        w.data_mut().copy_from_slice(&[0.0, 1.0, 0.0]);

        let x = Tensor::new(vec![1, 1, 6, 1], vec![1.0, -2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = tcn.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 3, 1]);
        assert_eq!(g.data(out), &[1.0, 3.0, 5.0]);

        assert!(TcnLayer::<f64>::register(&mut store, "c2", 1, 1, 4, 1, &mut rng).is_err());
    }

    #[test]
    fn temporal_kind_serde_round_trips() {
        let a: TemporalKind = serde_json::from_str(r#"{"kind":"attention"}"#).unwrap();
        assert_eq!(a, TemporalKind::Attention);
        let t: TemporalKind = serde_json::from_str(r#"{"kind":"tcn","kernel":9}"#).unwrap();
        assert_eq!(t, TemporalKind::Tcn { kernel: 9 });
        let s = serde_json::to_string(&t).unwrap();
        let back: TemporalKind = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
