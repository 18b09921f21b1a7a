//! Spatial graph convolution over the skeleton.
//!
//! Each layer mixes per-joint features through three adjacency terms per
//! partition: a fixed physical matrix, a freely learnable offset, and a
//! data-dependent similarity matrix computed from the input itself. The
//! skeleton is partitioned ST-GCN style into self, toward-root, and
//! away-from-root neighbor sets, each with its own channel transform.
//!
//! All adjacency matrices are oriented (target row, source column): entry
//! `[i][j]` weights how much joint `j` contributes to joint `i`.

use rand::Rng;

use crate::tensor::{uniform_fan_in, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

/// Number of spatial partitions: self, toward root, away from root.
pub const PARTITIONS: usize = 3;

/// Binary partition supports for a parent-pointer tree, before
/// normalization. Entry `[i*n+j] = 1` links target `i` to source `j`.
fn partition_supports(parents: &[usize]) -> Result<[Vec<f64>; PARTITIONS], TensorError> {
    let n = parents.len();
    let mut depth = vec![usize::MAX; n];
    for start in 0..n {
        // Walk to the root, failing on cycles or out-of-range parents.
        let mut chain = Vec::new();
        let mut j = start;
        while depth[j] == usize::MAX {
            if parents[j] >= n {
                return Err(TensorError::Invalid(format!(
                    "joint {j} has parent {} outside 0..{n}",
                    parents[j]
                )));
            }
            if parents[j] == j {
                depth[j] = 0;
                break;
            }
            if chain.contains(&j) {
                return Err(TensorError::Invalid(format!("topology has a cycle through joint {j}")));
            }
            chain.push(j);
            j = parents[j];
        }
        while let Some(k) = chain.pop() {
            depth[k] = depth[parents[k]] + 1;
        }
    }
    let roots = parents.iter().enumerate().filter(|&(i, &p)| p == i).count();
    if roots != 1 {
        return Err(TensorError::Invalid(format!("topology has {roots} roots, expected 1")));
    }

    let mut identity = vec![0.0; n * n];
    let mut toward = vec![0.0; n * n];
    let mut away = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = 1.0;
        if parents[i] != i {
            // The parent is closer to the root than its child.
            toward[i * n + parents[i]] = 1.0;
            away[parents[i] * n + i] = 1.0;
        }
    }
    Ok([identity, toward, away])
}

/// Symmetric normalization `D_r^{-1/2} A D_c^{-1/2}` with row/column degree
/// vectors; entries with a zero degree stay zero.
fn normalize_support(support: &[f64], n: usize) -> Vec<f64> {
    let mut row_deg = vec![0.0; n];
    let mut col_deg = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row_deg[i] += support[i * n + j];
            col_deg[j] += support[i * n + j];
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = row_deg[i] * col_deg[j];
            if support[i * n + j] != 0.0 && d > 0.0 {
                out[i * n + j] = support[i * n + j] / d.sqrt();
            }
        }
    }
    out
}

/// The three fixed adjacency matrices for a parent-pointer tree.
pub fn physical_adjacency<E: Scalar>(parents: &[usize]) -> Result<[Tensor<E>; PARTITIONS], TensorError> {
    let n = parents.len();
    let supports = partition_supports(parents)?;
    let mut out = Vec::with_capacity(PARTITIONS);
    for s in &supports {
        out.push(Tensor::from_f64s(vec![n, n], &normalize_support(s, n))?);
    }
    Ok(out.try_into().map_err(|_| TensorError::Invalid("partition count".to_string()))?)
}

/// Embedding width used for the data-dependent adjacency.
pub fn embed_width(c_in: usize) -> usize {
    (c_in / 4).max(8)
}

struct Subset {
    adj: ParamId,
    theta_w: ParamId,
    theta_b: ParamId,
    phi_w: ParamId,
    phi_b: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
}

/// One graph convolution layer: `[B, C_in, T, N] -> [B, C_out, T, N]`.
pub struct GraphLayer<E: Scalar> {
    pub c_in: usize,
    pub c_out: usize,
    pub c_embed: usize,
    pub(crate) adjacency: [Tensor<E>; PARTITIONS],
    subsets: Vec<Subset>,
    res_w: ParamId,
    res_b: ParamId,
}

impl<E: Scalar> GraphLayer<E> {
    /// Registers all parameters under `prefix` and fixes the physical
    /// adjacency from the parent-pointer topology.
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        parents: &[usize],
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let n = parents.len();
        let c_embed = embed_width(c_in);
        let adjacency = physical_adjacency(parents)?;
        let mut subsets = Vec::with_capacity(PARTITIONS);
        for k in 0..PARTITIONS {
            let p = format!("{prefix}.sub{k}");
            subsets.push(Subset {
                adj: store.register(&format!("{p}.adj"), Tensor::zeros(vec![n, n]))?,
                theta_w: store.register(
                    &format!("{p}.theta.w"),
                    uniform_fan_in(vec![c_embed, c_in], c_in, rng),
                )?,
                theta_b: store.register(&format!("{p}.theta.b"), Tensor::zeros(vec![c_embed]))?,
                phi_w: store.register(
                    &format!("{p}.phi.w"),
                    uniform_fan_in(vec![c_embed, c_in], c_in, rng),
                )?,
                phi_b: store.register(&format!("{p}.phi.b"), Tensor::zeros(vec![c_embed]))?,
                conv_w: store.register(
                    &format!("{p}.conv.w"),
                    uniform_fan_in(vec![c_out, c_in], c_in, rng),
                )?,
                conv_b: store.register(&format!("{p}.conv.b"), Tensor::zeros(vec![c_out]))?,
            });
        }
        let res_w =
            store.register(&format!("{prefix}.res.w"), uniform_fan_in(vec![c_out, c_in], c_in, rng))?;
        let res_b = store.register(&format!("{prefix}.res.b"), Tensor::zeros(vec![c_out]))?;
        Ok(GraphLayer { c_in, c_out, c_embed, adjacency, subsets, res_w, res_b })
    }

    /// Data-dependent adjacency per partition: time-pooled per-joint
    /// embeddings compared pairwise, rows softmaxed to 1.
    pub fn adaptive_adjacency(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Vec<Var>, TensorError> {
        let shape = g.shape(x).to_vec();
        let (b, c, n) = (shape[0], shape[1], shape[3]);
        let pooled = g.reduce_mean(x, &[2])?;
        let pooled = g.reshape(pooled, vec![b, c, 1, n])?;
        let mut out = Vec::with_capacity(self.subsets.len());
        for sub in &self.subsets {
            let tw = g.param(store, sub.theta_w);
            let tb = g.param(store, sub.theta_b);
            let theta = g.pointwise_conv(pooled, tw, Some(tb), 1)?;
            let theta = g.reshape(theta, vec![b, self.c_embed, n])?;
            let theta = g.permute(theta, &[0, 2, 1])?;
            let pw = g.param(store, sub.phi_w);
            let pb = g.param(store, sub.phi_b);
            let phi = g.pointwise_conv(pooled, pw, Some(pb), 1)?;
            let phi = g.reshape(phi, vec![b, self.c_embed, n])?;
            let logits = g.matmul(theta, phi)?;
            out.push(g.softmax(logits, 2)?);
        }
        Ok(out)
    }

    /// Forward pass with the adaptive adjacency computed from `x`.
    pub fn forward(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var, TensorError> {
        let adaptive = self.adaptive_adjacency(g, store, x)?;
        self.forward_with(g, store, x, &adaptive)
    }

    /// Forward pass against externally supplied adaptive matrices, one per
    /// partition, each `[B, N, N]` or broadcastable to it.
    pub fn forward_with(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
        adaptive: &[Var],
    ) -> Result<Var, TensorError> {
        if adaptive.len() != self.subsets.len() {
            return Err(TensorError::Invalid(format!(
                "expected {} adaptive matrices, got {}",
                self.subsets.len(),
                adaptive.len()
            )));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(TensorError::shape(
                "graph_forward",
                format!("expected [B, {}, T, N], got {:?}", self.c_in, shape),
            ));
        }
        let (b, c, t, n) = (shape[0], shape[1], shape[2], shape[3]);
        let x_flat = g.reshape(x, vec![b, c * t, n])?;
        let mut acc: Option<Var> = None;
        for (k, sub) in self.subsets.iter().enumerate() {
            let fixed = g.constant(self.adjacency[k].clone());
            let learned = g.param(store, sub.adj);
            let base = g.add(fixed, learned)?;
            let m = g.add(base, adaptive[k])?;
            // Mixing contracts over sources, so the (target, source) matrix
            // is transposed to sit on the right of the feature matrix.
            let mt = if g.shape(m).len() == 2 {
                g.transpose(m)?
            } else {
                g.permute(m, &[0, 2, 1])?
            };
            let mixed = g.matmul(x_flat, mt)?;
            let mixed = g.reshape(mixed, vec![b, c, t, n])?;
            let w = g.param(store, sub.conv_w);
            let bias = g.param(store, sub.conv_b);
            let y = g.pointwise_conv(mixed, w, Some(bias), 1)?;
            acc = Some(match acc {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }
        let rw = g.param(store, self.res_w);
        let rb = g.param(store, self.res_b);
        let res = g.pointwise_conv(x, rw, Some(rb), 1)?;
        g.add(acc.expect("at least one partition"), res)
    }
}

/// Default adjacency matrices for the built-in 16-joint skeleton.
pub fn skeleton_adjacency<E: Scalar>() -> [Tensor<E>; PARTITIONS] {
    physical_adjacency(&crate::data::PARENTS).expect("built-in topology is a tree")
}
