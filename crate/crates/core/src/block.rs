//! Spatial-temporal blocks.
//!
//! Each block pairs one graph convolution with one temporal unit and adds
//! a strided pointwise shortcut of the block input. The two units can run
//! graph-then-temporal, temporal-then-graph, or side by side, with channel
//! widening and frame striding placed so every order maps
//! `[B, C_in, T, N]` to the same `[B, C_out, ceil(T / stride), N]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{TemporalKind, TemporalLayer};
use crate::graph::GraphLayer;
use crate::tensor::{uniform_fan_in, Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

/// How a block arranges its graph and temporal units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    /// Graph convolution first, then the temporal unit.
    GraphFirst,
    /// Temporal unit first, then the graph convolution.
    TransformerFirst,
    /// Both units on the block input, outputs summed.
    Parallel,
}

/// Static description of one block.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub order: BlockOrder,
    pub temporal: TemporalKind,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub stride: usize,
    pub heads: usize,
    pub positional: bool,
}

impl BlockSpec {
    pub fn t_out(&self) -> usize {
        self.t_in.div_ceil(self.stride)
    }
}

/// One block: graph unit, temporal unit, and a strided shortcut.
pub struct CgtBlock<E: Scalar> {
    pub spec: BlockSpec,
    graph: GraphLayer<E>,
    temporal: TemporalLayer<E>,
    res_w: ParamId,
    res_b: ParamId,
}

impl<E: Scalar> CgtBlock<E> {
    /// Registers the block under `prefix`. Channel widening happens in the
    /// leading unit; when the units run in parallel both widen on their own.
    pub fn register<R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        spec: BlockSpec,
        parents: &[usize],
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        if spec.stride == 0 {
            return Err(TensorError::Invalid("block stride must be positive".into()));
        }
        let (graph_in, graph_out, temporal_in) = match spec.order {
            BlockOrder::GraphFirst => (spec.c_in, spec.c_out, spec.c_out),
            BlockOrder::TransformerFirst => (spec.c_out, spec.c_out, spec.c_in),
            BlockOrder::Parallel => (spec.c_in, spec.c_out, spec.c_in),
        };
        let graph = GraphLayer::register(store, &format!("{prefix}.graph"), graph_in, graph_out, parents, rng)?;
        let temporal = TemporalLayer::register(
            store,
            &format!("{prefix}.temporal"),
            &spec.temporal,
            temporal_in,
            spec.c_out,
            spec.t_in,
            spec.stride,
            spec.heads,
            spec.positional,
            rng,
        )?;
        let res_w = store.register(
            &format!("{prefix}.res.w"),
            uniform_fan_in(vec![spec.c_out, spec.c_in], spec.c_in, rng),
        )?;
        let res_b = store.register(&format!("{prefix}.res.b"), Tensor::zeros(vec![spec.c_out]))?;
        Ok(CgtBlock { spec, graph, temporal, res_w, res_b })
    }

    pub fn forward(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Result<Var, TensorError> {
        let main = match self.spec.order {
            BlockOrder::GraphFirst => {
                let h = self.graph.forward(g, store, x)?;
                self.temporal.forward(g, store, h)?
            }
            BlockOrder::TransformerFirst => {
                let h = self.temporal.forward(g, store, x)?;
                self.graph.forward(g, store, h)?
            }
            BlockOrder::Parallel => {
                let t = self.temporal.forward(g, store, x)?;
                let s = self.graph.forward(g, store, x)?;
                let s = if self.spec.stride > 1 { g.downsample(s, 2, self.spec.stride)? } else { s };
                g.add(t, s)?
            }
        };
        let w = g.param(store, self.res_w);
        let b = g.param(store, self.res_b);
        let shortcut = g.pointwise_conv(x, w, Some(b), self.spec.stride)?;
        g.add(main, shortcut)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PARENTS;
    use crate::rng::stream_rng;
    use crate::tensor::gradcheck;

    fn spec(order: BlockOrder, c_in: usize, c_out: usize, t_in: usize, stride: usize, heads: usize) -> BlockSpec {
        BlockSpec {
            order,
            temporal: TemporalKind::Attention,
            c_in,
            c_out,
            t_in,
            stride,
            heads,
            positional: true,
        }
    }

    fn random_input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, "block-test", 0);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn build(spec_: BlockSpec, seed: u64) -> (ParamStore<f64>, CgtBlock<f64>) {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, "block-init", 0);
        let block = CgtBlock::register(&mut store, "b", spec_, &PARENTS, &mut rng).unwrap();
        (store, block)
    }

    #[test]
    fn entry_and_deep_shapes() {
        let (store, block) = build(spec(BlockOrder::GraphFirst, 3, 64, 48, 1, 8), 0);
        let mut g = Graph::new();
        let x = g.constant(random_input(vec![2, 3, 48, 16], 1));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 48, 16]);

        let (store, block) = build(spec(BlockOrder::GraphFirst, 128, 256, 24, 2, 8), 2);
        let x = g.constant(random_input(vec![1, 128, 24, 16], 3));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 256, 12, 16]);
    }

    #[test]
    fn every_order_maps_to_the_same_shape() {
        for order in [BlockOrder::GraphFirst, BlockOrder::TransformerFirst, BlockOrder::Parallel] {
            let (store, block) = build(spec(order, 8, 16, 12, 2, 2), 4);
            let mut g = Graph::new();
            let x = g.constant(random_input(vec![2, 8, 12, 16], 5));
            let y = block.forward(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[2, 16, 6, 16], "{order:?}");
            assert_eq!(block.spec.t_out(), 6);
        }
    }

    #[test]
    fn output_splits_into_main_path_plus_shortcut() {
        for order in [BlockOrder::GraphFirst, BlockOrder::TransformerFirst, BlockOrder::Parallel] {
            let (mut store, block) = build(spec(order, 4, 8, 6, 2, 2), 6);
            let x = random_input(vec![2, 4, 6, 16], 7);

            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let full = block.forward(&mut g, &store, xv).unwrap();
            let full = g.to_tensor(full);

            let res_w = store.id_of("b.res.w").unwrap();
            let saved = store.get(res_w).clone();
            for v in store.get_mut(res_w).data_mut() {
                *v = 0.0;
            }
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let main = block.forward(&mut g, &store, xv).unwrap();
            *store.get_mut(res_w) = saved;

            let w = g.param(&store, res_w);
            let b = g.param(&store, store.id_of("b.res.b").unwrap());
            let shortcut = g.pointwise_conv(xv, w, Some(b), 2).unwrap();
            let want = g.add(main, shortcut).unwrap();
            assert!(g.to_tensor(want).max_abs_diff(&full) < 1e-12, "{order:?}");
        }
    }

    #[test]
    fn tcn_variant_builds_from_the_spec_alone() {
        let mut spec_ = spec(BlockOrder::GraphFirst, 4, 8, 10, 2, 2);
        spec_.temporal = TemporalKind::Tcn { kernel: 9 };
        let (store, block) = build(spec_, 8);
        let mut g = Graph::new();
        let x = g.constant(random_input(vec![1, 4, 10, 16], 9));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 5, 16]);
        assert!(store.id_of("b.temporal.w").is_some());
        assert!(store.id_of("b.temporal.wq").is_none());
    }

    #[test]
    fn gradients_match_finite_differences_in_every_order() {
        let parents = [0usize, 0, 1, 2, 0];
        for (i, order) in
            [BlockOrder::GraphFirst, BlockOrder::TransformerFirst, BlockOrder::Parallel].iter().enumerate()
        {
            let mut store = ParamStore::new();
            let mut rng = stream_rng(10 + i as u64, "block-grad", 0);
            let block = CgtBlock::register(
                &mut store,
                "b",
                spec(*order, 3, 4, 6, 2, 2),
                &parents,
                &mut rng,
            )
            .unwrap();
            let x = random_input(vec![2, 3, 6, 5], 11 + i as u64);
            let report = gradcheck::check(&mut store, 1e-5, 4, 12, |g, store| {
                let xv = g.constant(x.clone());
                let y = block.forward(g, store, xv)?;
                let sq = g.mul(y, y)?;
                g.reduce_mean(sq, &[0, 1, 2, 3])
            })
            .unwrap();
            assert!(
                report.max_rel_err < 1e-5,
                "{order:?}: {} at {}",
                report.max_rel_err,
                report.worst_entry
            );
        }
    }
}
