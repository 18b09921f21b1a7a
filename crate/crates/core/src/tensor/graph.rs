//! The autodiff tape.
//!
//! Every operation validates shapes, computes its value eagerly, and appends
//! exactly one node to the arena. Inputs always precede their consumers, so
//! [`Graph::backward`] is a single reverse sweep. Evaluation order is fixed
//! by construction order, which keeps runs with equal seeds bit-identical.

use super::kernels::{
    col2im_add, conv_out_len, gemm, im2col, lanes, layer_norm_backward, layer_norm_forward,
    softmax_backward, softmax_forward, softmax_rows_backward_inplace, softmax_rows_inplace,
};
use super::{broadcast_shapes, broadcast_strides, strides_of, ParamId, ParamStore, Scalar, Tensor, TensorError};

/// Handle to one node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<E> {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    ClampMin(usize, f64),
    MatMul { a: usize, b: usize, dims: MatDims },
    Attention { q: usize, k: usize, v: usize, probs: Vec<E>, scale: f64 },
    PointwiseConv { x: usize, w: usize, bias: Option<usize>, stride: usize },
    TemporalConv { x: usize, w: usize, bias: Option<usize>, stride: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, axis: usize, means: Vec<E>, rstds: Vec<E> },
    ReduceSum { x: usize, axes: Vec<usize> },
    ReduceMean { x: usize, axes: Vec<usize> },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Downsample { x: usize, axis: usize, stride: usize },
    NormAxis { x: usize, axis: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<E> },
}

struct MatDims {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// Per-batch-axis element strides into each operand (0 on broadcast axes).
    sa: Vec<usize>,
    sb: Vec<usize>,
}

struct Node<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires: bool,
    op: Op<E>,
}

impl<E: Scalar> Node<E> {
    fn grad_or_zeros(&mut self) -> &mut Vec<E> {
        if self.grad.is_none() {
            self.grad = Some(vec![E::zero(); self.data.len()]);
        }
        self.grad.as_mut().expect("just filled")
    }
}

/// Reverse-mode autodiff tape over eagerly evaluated tensor ops.
pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    /// Copies a node's value out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node invariant")
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> E {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1, "scalar_value on non-scalar");
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires: bool, op: Op<E>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires, op });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Non-differentiable input value.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf { param: None })
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, Op::Leaf { param: None })
    }

    /// Binds the current value of a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf { param: Some(id) })
    }

    // ── Elementwise arithmetic ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y, BinKind::Div)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        kind: BinKind,
    ) -> Result<Var, TensorError> {
        let (sa_shape, sb_shape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shapes(name, sa_shape, sb_shape)?;
        let sa = broadcast_strides(&out_shape, sa_shape);
        let sb = broadcast_strides(&out_shape, sb_shape);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![E::zero(); numel];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        if sa_shape == &out_shape && sb_shape == &out_shape {
            for i in 0..numel {
                out[i] = f(da[i], db[i]);
            }
        } else if sa_shape == &out_shape && is_trailing_broadcast(&out_shape, sb_shape) {
            // The right operand tiles over leading axes, so it applies to
            // contiguous chunks without an odometer walk.
            let blen = db.len();
            for (co, ca) in out.chunks_mut(blen).zip(da.chunks(blen)) {
                for j in 0..blen {
                    co[j] = f(ca[j], db[j]);
                }
            }
        } else {
            for_each_mapped2(&out_shape, &sa, &sb, |li, oa, ob| {
                out[li] = f(da[oa], db[ob]);
            });
        }
        let requires = self.requires(a) || self.requires(b);
        let op = match kind {
            BinKind::Add => Op::Add(a.0, b.0),
            BinKind::Sub => Op::Sub(a.0, b.0),
            BinKind::Mul => Op::Mul(a.0, b.0),
            BinKind::Div => Op::Div(a.0, b.0),
        };
        Ok(self.push(out_shape, out, requires, op))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let node = &self.nodes[x.0];
        let factor = E::from_f64(s);
        let data = node.data.iter().map(|&v| v * factor).collect();
        let (shape, requires) = (node.shape.clone(), node.requires);
        self.push(shape, data, requires, Op::Scale(x.0, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let node = &self.nodes[x.0];
        let term = E::from_f64(s);
        let data = node.data.iter().map(|&v| v + term).collect();
        let (shape, requires) = (node.shape.clone(), node.requires);
        self.push(shape, data, requires, Op::AddScalar(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let data = node.data.iter().map(|&v| if v > E::zero() { v } else { E::zero() }).collect();
        let (shape, requires) = (node.shape.clone(), node.requires);
        self.push(shape, data, requires, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let data = node
            .data
            .iter()
            .map(|&v| {
                if v >= E::zero() {
                    E::one() / (E::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (E::one() + e)
                }
            })
            .collect();
        let (shape, requires) = (node.shape.clone(), node.requires);
        self.push(shape, data, requires, Op::Sigmoid(x.0))
    }

    /// Elementwise `max(x, c)`; gradient passes only where `x > c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let node = &self.nodes[x.0];
        let floor = E::from_f64(c);
        let data = node.data.iter().map(|&v| if v > floor { v } else { floor }).collect();
        let (shape, requires) = (node.shape.clone(), node.requires);
        self.push(shape, data, requires, Op::ClampMin(x.0, c))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Batched matrix multiply; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("operands must have rank >= 2, got {:?} and {:?}", ashape, bshape),
            ));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (k2, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", ashape, bshape),
            ));
        }
        let la = &ashape[..ashape.len() - 2];
        let lb = &bshape[..bshape.len() - 2];
        let batch = broadcast_shapes("matmul", la, lb)?;
        let sa_full = strides_of(ashape);
        let sb_full = strides_of(bshape);
        let mut sa = vec![0; batch.len()];
        let mut sb = vec![0; batch.len()];
        for i in 0..batch.len() {
            if i >= batch.len() - la.len() {
                let j = i - (batch.len() - la.len());
                sa[i] = if la[j] == 1 { 0 } else { sa_full[j] };
            }
            if i >= batch.len() - lb.len() {
                let j = i - (batch.len() - lb.len());
                sb[i] = if lb[j] == 1 { 0 } else { sb_full[j] };
            }
        }
        let nb: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![E::zero(); nb * m * n];
        {
            let (adata, bdata) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            if lb.is_empty() && la == &batch[..] {
                // Shared 2D right operand: the whole batch is one product
                // over the flattened rows of `a`.
                gemm(
                    nb * m,
                    k,
                    n,
                    E::one(),
                    adata,
                    0,
                    (k as isize, 1),
                    bdata,
                    0,
                    (n as isize, 1),
                    E::zero(),
                    &mut out,
                    0,
                    (n as isize, 1),
                );
            } else {
                let mut bi = 0;
                for_each_mapped2(&batch, &sa, &sb, |_, oa, ob| {
                    gemm(
                        m,
                        k,
                        n,
                        E::one(),
                        adata,
                        oa,
                        (k as isize, 1),
                        bdata,
                        ob,
                        (n as isize, 1),
                        E::zero(),
                        &mut out,
                        bi * m * n,
                        (n as isize, 1),
                    );
                    bi += 1;
                });
            }
        }
        let requires = self.requires(a) || self.requires(b);
        let dims = MatDims { batch, m, k, n, sa, sb };
        Ok(self.push(out_shape, out, requires, Op::MatMul { a: a.0, b: b.0, dims }))
    }

    /// Scaled dot-product attention over matching `[M, H, T, D]` operands:
    /// `softmax(Q Kᵀ / sqrt(D)) V` per `(m, h)` slice. Fusing the chain keeps
    /// the T x T score tensors off the tape; only the softmax probabilities
    /// are cached for the backward sweep.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let qshape = self.nodes[q.0].shape.clone();
        let (kshape, vshape) = (&self.nodes[k.0].shape, &self.nodes[v.0].shape);
        if qshape.len() != 4 || *kshape != qshape || *vshape != qshape {
            return Err(TensorError::shape(
                "scaled_dot_attention",
                format!("expected matching [M, H, T, D] operands, got {qshape:?}, {kshape:?}, {vshape:?}"),
            ));
        }
        let (m, h, t, d) = (qshape[0], qshape[1], qshape[2], qshape[3]);
        if t == 0 || d == 0 {
            return Err(TensorError::shape(
                "scaled_dot_attention",
                "time and head axes must be non-empty".to_string(),
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let alpha = E::from_f64(scale);
        let mut probs = vec![E::zero(); m * h * t * t];
        let mut out = vec![E::zero(); m * h * t * d];
        {
            let qd = &self.nodes[q.0].data;
            let kd = &self.nodes[k.0].data;
            let vd = &self.nodes[v.0].data;
            for s in 0..m * h {
                let xo = s * t * d;
                let po = s * t * t;
                gemm(
                    t,
                    d,
                    t,
                    alpha,
                    qd,
                    xo,
                    (d as isize, 1),
                    kd,
                    xo,
                    (1, d as isize),
                    E::zero(),
                    &mut probs,
                    po,
                    (t as isize, 1),
                );
                softmax_rows_inplace(&mut probs[po..po + t * t], t, t);
                gemm(
                    t,
                    t,
                    d,
                    E::one(),
                    &probs,
                    po,
                    (t as isize, 1),
                    vd,
                    xo,
                    (d as isize, 1),
                    E::zero(),
                    &mut out,
                    xo,
                    (d as isize, 1),
                );
            }
        }
        let requires = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(qshape, out, requires, Op::Attention { q: q.0, k: k.0, v: v.0, probs, scale }))
    }

    /// 1x1 convolution over `[B?, C, T, N]`; stride subsamples frames.
    pub fn pointwise_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        if self.nodes[w.0].shape.len() != 2 {
            return Err(TensorError::shape(
                "pointwise_conv",
                format!("weight must be [C_out, C_in], got {:?}", self.nodes[w.0].shape),
            ));
        }
        let geom = self.conv_geometry("pointwise_conv", x, w, bias, 1, stride)?;
        let ConvGeometry { batch, c_in, t, n, c_out, t_out, batched } = geom;
        let mut out = vec![E::zero(); batch * c_out * t_out * n];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let mut gathered = vec![E::zero(); c_in * t_out * n];
            for bidx in 0..batch {
                let xoff = bidx * c_in * t * n;
                let src: &[E] = if stride == 1 {
                    &xd[xoff..xoff + c_in * t * n]
                } else {
                    gather_frames(&xd[xoff..xoff + c_in * t * n], c_in, t, n, stride, &mut gathered);
                    &gathered
                };
                gemm(
                    c_out,
                    c_in,
                    t_out * n,
                    E::one(),
                    wd,
                    0,
                    (c_in as isize, 1),
                    src,
                    0,
                    ((t_out * n) as isize, 1),
                    E::zero(),
                    &mut out,
                    bidx * c_out * t_out * n,
                    ((t_out * n) as isize, 1),
                );
            }
            if let Some(bv) = bias {
                add_channel_bias(&mut out, &self.nodes[bv.0].data, batch, c_out, t_out * n);
            }
        }
        let out_shape = conv_out_shape(batched, batch, c_out, t_out, n);
        let requires =
            self.requires(x) || self.requires(w) || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            out_shape,
            out,
            requires,
            Op::PointwiseConv { x: x.0, w: w.0, bias: bias.map(|b| b.0), stride },
        ))
    }

    /// Temporal convolution with odd kernel `K` over `[B?, C, T, N]`,
    /// symmetric zero padding `(K-1)/2`, and frame stride.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let wshape = self.nodes[w.0].shape.clone();
        if wshape.len() != 3 {
            return Err(TensorError::shape(
                "temporal_conv",
                format!("weight must be [C_out, C_in, K], got {:?}", wshape),
            ));
        }
        let kernel = wshape[2];
        if kernel % 2 == 0 {
            return Err(TensorError::shape("temporal_conv", format!("kernel {kernel} must be odd")));
        }
        let geom = self.conv_geometry("temporal_conv", x, w, bias, kernel, stride)?;
        let ConvGeometry { batch, c_in, t, n, c_out, t_out, batched } = geom;
        let mut out = vec![E::zero(); batch * c_out * t_out * n];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let mut cols = vec![E::zero(); c_in * kernel * t_out * n];
            for bidx in 0..batch {
                let xoff = bidx * c_in * t * n;
                im2col(&xd[xoff..xoff + c_in * t * n], c_in, t, n, kernel, stride, &mut cols);
                gemm(
                    c_out,
                    c_in * kernel,
                    t_out * n,
                    E::one(),
                    wd,
                    0,
                    ((c_in * kernel) as isize, 1),
                    &cols,
                    0,
                    ((t_out * n) as isize, 1),
                    E::zero(),
                    &mut out,
                    bidx * c_out * t_out * n,
                    ((t_out * n) as isize, 1),
                );
            }
            if let Some(bv) = bias {
                add_channel_bias(&mut out, &self.nodes[bv.0].data, batch, c_out, t_out * n);
            }
        }
        let out_shape = conv_out_shape(batched, batch, c_out, t_out, n);
        let requires =
            self.requires(x) || self.requires(w) || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            out_shape,
            out,
            requires,
            Op::TemporalConv { x: x.0, w: w.0, bias: bias.map(|b| b.0), stride },
        ))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
    ) -> Result<ConvGeometry, TensorError> {
        if stride == 0 {
            return Err(TensorError::shape(op, "stride must be positive".to_string()));
        }
        let xshape = &self.nodes[x.0].shape;
        let wshape = &self.nodes[w.0].shape;
        let (batched, batch, c_in, t, n) = match xshape.len() {
            3 => (false, 1, xshape[0], xshape[1], xshape[2]),
            4 => (true, xshape[0], xshape[1], xshape[2], xshape[3]),
            _ => {
                return Err(TensorError::shape(
                    op,
                    format!("input must be [C,T,N] or [B,C,T,N], got {:?}", xshape),
                ))
            }
        };
        if wshape[1] != c_in {
            return Err(TensorError::shape(
                op,
                format!("weight {:?} does not accept {} input channels", wshape, c_in),
            ));
        }
        let c_out = wshape[0];
        if let Some(bv) = bias {
            let bshape = &self.nodes[bv.0].shape;
            if bshape != &[c_out] {
                return Err(TensorError::shape(
                    op,
                    format!("bias {:?} must be [{}]", bshape, c_out),
                ));
            }
        }
        if t == 0 {
            return Err(TensorError::shape(op, "empty time axis".to_string()));
        }
        let t_out = conv_out_len(t, kernel, stride);
        Ok(ConvGeometry { batch, c_in, t, n, c_out, t_out, batched })
    }

    // ── Normalization and reductions ────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let mut out = vec![E::zero(); self.nodes[x.0].data.len()];
        softmax_forward(&self.nodes[x.0].data, outer, len, inner, &mut out);
        let requires = self.requires(x);
        Ok(self.push(shape, out, requires, Op::Softmax { x: x.0, axis }))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "layer_norm", axis, rank: shape.len() });
        }
        let len = shape[axis];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape != [len] {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("{name} shape {:?} must be [{len}]", self.nodes[v.0].shape),
                ));
            }
        }
        let (outer, lenl, inner) = lanes(&shape, axis);
        let mut out = vec![E::zero(); self.nodes[x.0].data.len()];
        let (means, rstds) = layer_norm_forward(
            &self.nodes[x.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            outer,
            lenl,
            inner,
            E::from_f64(eps),
            &mut out,
        );
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            shape,
            out,
            requires,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, axis, means, rstds },
        ))
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(x, axes, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(x, axes, true)
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let op_name: &'static str = if mean { "reduce_mean" } else { "reduce_sum" };
        let mut seen = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(TensorError::Axis { op: op_name, axis: ax, rank: shape.len() });
            }
            if seen[ax] {
                return Err(TensorError::shape(op_name, format!("axis {ax} repeated")));
            }
            seen[ax] = true;
        }
        let out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| !seen[*i]).map(|(_, &d)| d).collect();
        let map = reduce_strides(&shape, &seen, &out_shape);
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![E::zero(); out_numel];
        let xd = &self.nodes[x.0].data;
        for_each_mapped(&shape, &map, |li, oo| {
            out[oo] += xd[li];
        });
        let count: usize = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| seen[*i])
            .map(|(_, &d)| d)
            .product();
        if mean {
            let inv = E::one() / E::from_f64(count as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let requires = self.requires(x);
        let axes = axes.to_vec();
        let op = if mean { Op::ReduceMean { x: x.0, axes } } else { Op::ReduceSum { x: x.0, axes } };
        Ok(self.push(out_shape, out, requires, op))
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if !is_permutation(perm, shape.len()) {
            return Err(TensorError::shape(
                "permute",
                format!("{:?} is not a permutation of 0..{}", perm, shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let map = permute_strides(&shape, perm, &out_shape);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); xd.len()];
        let rank = shape.len();
        if rank > 1 && perm[rank - 1] == rank - 1 {
            // The innermost axis stays innermost, so rows move as blocks.
            let run = shape[rank - 1];
            for_each_mapped(&shape[..rank - 1], &map[..rank - 1], |row, oo| {
                out[oo..oo + run].copy_from_slice(&xd[row * run..(row + 1) * run]);
            });
        } else if rank > 1 {
            // Walk with the output-contiguous axis innermost: strided reads,
            // contiguous writes, no per-element odometer.
            let p = perm[rank - 1];
            let (rshape, istr, istep, len) = drop_axis(&shape, &map, p);
            for_each_mapped2(&rshape, &istr.0, &istr.1, |_, ia, oa| {
                for j in 0..len {
                    out[oa + j] = xd[ia + j * istep];
                }
            });
        } else {
            for_each_mapped(&shape, &map, |li, oo| {
                out[oo] = xd[li];
            });
        }
        let requires = self.requires(x);
        Ok(self.push(out_shape, out, requires, Op::Permute { x: x.0, perm: perm.to_vec() }))
    }

    /// Transposes the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let rank = self.nodes[x.0].shape.len();
        if rank < 2 {
            return Err(TensorError::shape("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.nodes[x.0].shape, shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let requires = self.requires(x);
        Ok(self.push(shape, data, requires, Op::Reshape { x: x.0 }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::shape("concat", "no operands".to_string()));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::Axis { op: "concat", axis, rank: first.len() });
        }
        let mut total = 0;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::shape(
                    "concat",
                    format!("shape {:?} incompatible with {:?} along axis {axis}", s, first),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut out = vec![E::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for &v in xs {
            let len_i = self.nodes[v.0].shape[axis];
            let xd = &self.nodes[v.0].data;
            for o in 0..outer {
                let src = o * len_i * inner;
                let dst = (o * total + offset) * inner;
                out[dst..dst + len_i * inner].copy_from_slice(&xd[src..src + len_i * inner]);
            }
            offset += len_i;
        }
        let requires = xs.iter().any(|&v| self.requires(v));
        Ok(self.push(out_shape, out, requires, Op::Concat { xs: xs.iter().map(|v| v.0).collect(), axis }))
    }

    /// Keeps every `stride`-th index along an axis, starting at 0.
    pub fn downsample(&mut self, x: Var, axis: usize, stride: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "downsample", axis, rank: shape.len() });
        }
        if stride == 0 {
            return Err(TensorError::shape("downsample", "stride must be positive".to_string()));
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let out_len = (len + stride - 1) / stride;
        let mut out_shape = shape.clone();
        out_shape[axis] = out_len;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); outer * out_len * inner];
        for o in 0..outer {
            for j in 0..out_len {
                let src = (o * len + j * stride) * inner;
                let dst = (o * out_len + j) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let requires = self.requires(x);
        Ok(self.push(out_shape, out, requires, Op::Downsample { x: x.0, axis, stride }))
    }

    /// Euclidean norm along an axis; the axis is kept with extent 1.
    pub fn norm_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "norm_axis", axis, rank: shape.len() });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut sq = E::zero();
                for j in 0..len {
                    let v = xd[base + j * inner];
                    sq += v * v;
                }
                out[o * inner + i] = sq.sqrt();
            }
        }
        let requires = self.requires(x);
        Ok(self.push(out_shape, out, requires, Op::NormAxis { x: x.0, axis }))
    }

    /// Mean cross-entropy from logits `[B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits must be [B, C], got {:?}", shape),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{} labels for batch of {}", labels.len(), b),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::shape("cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![E::zero(); b * c];
        softmax_forward(xd, b, c, 1, &mut probs);
        let mut loss = E::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().fold(row[0], |m, &v| if v > m { v } else { m });
            let lse = row.iter().map(|&v| (v - max).exp()).fold(E::zero(), |s, e| s + e).ln() + max;
            loss += lse - row[y];
        }
        loss = loss / E::from_f64(b as f64);
        let requires = self.requires(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            requires,
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar `root` into every differentiable
    /// node that feeds it.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.nodes[root.0].shape),
            ));
        }
        if !self.nodes[root.0].requires {
            return Err(TensorError::Invalid(
                "backward: root does not depend on any differentiable leaf".to_string(),
            ));
        }
        self.nodes[root.0].grad = Some(vec![E::one()]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.is_none() || !node.requires {
                continue;
            }
            let grad = node.grad.as_ref().expect("checked above");
            step_backward(node, grad, before);
        }
        Ok(())
    }

    /// Adds `scale` times each bound parameter's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<E>, scale: E) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &node.grad {
                    let dst = store.grad_mut(id).data_mut();
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s * scale;
                    }
                }
            }
        }
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    t: usize,
    n: usize,
    c_out: usize,
    t_out: usize,
    batched: bool,
}

fn conv_out_shape(batched: bool, batch: usize, c_out: usize, t_out: usize, n: usize) -> Vec<usize> {
    if batched {
        vec![batch, c_out, t_out, n]
    } else {
        vec![c_out, t_out, n]
    }
}

/// Copies every `stride`-th frame of `[C, T, N]` into `out`.
fn gather_frames<'a, E: Scalar>(
    x: &[E],
    c: usize,
    t: usize,
    n: usize,
    stride: usize,
    out: &'a mut [E],
) -> &'a [E] {
    let t_out = conv_out_len(t, 1, stride);
    for ci in 0..c {
        for to in 0..t_out {
            let src = (ci * t + to * stride) * n;
            let dst = (ci * t_out + to) * n;
            out[dst..dst + n].copy_from_slice(&x[src..src + n]);
        }
    }
    out
}

fn scatter_frames_add<E: Scalar>(
    dgathered: &[E],
    c: usize,
    t: usize,
    n: usize,
    stride: usize,
    dx: &mut [E],
) {
    let t_out = conv_out_len(t, 1, stride);
    for ci in 0..c {
        for to in 0..t_out {
            let src = (ci * t_out + to) * n;
            let dst = (ci * t + to * stride) * n;
            for j in 0..n {
                dx[dst + j] += dgathered[src + j];
            }
        }
    }
}

fn add_channel_bias<E: Scalar>(out: &mut [E], bias: &[E], batch: usize, c_out: usize, cols: usize) {
    for b in 0..batch {
        for c in 0..c_out {
            let base = (b * c_out + c) * cols;
            let bv = bias[c];
            for v in &mut out[base..base + cols] {
                *v += bv;
            }
        }
    }
}

/// Removes axis `p` from a permute walk, returning the remaining shape, the
/// (input, output) stride maps over it, the input step of the dropped axis,
/// and its length. The dropped axis has output stride 1 by construction.
fn drop_axis(
    shape: &[usize],
    map: &[usize],
    p: usize,
) -> (Vec<usize>, (Vec<usize>, Vec<usize>), usize, usize) {
    let in_str = strides_of(shape);
    let mut rshape = Vec::with_capacity(shape.len() - 1);
    let mut ri = Vec::with_capacity(shape.len() - 1);
    let mut ro = Vec::with_capacity(shape.len() - 1);
    for ax in 0..shape.len() {
        if ax != p {
            rshape.push(shape[ax]);
            ri.push(in_str[ax]);
            ro.push(map[ax]);
        }
    }
    (rshape, (ri, ro), in_str[p], shape[p])
}

/// True when `b_shape` (leading 1s ignored) equals the tail of `out_shape`,
/// so the operand repeats over whole leading chunks.
fn is_trailing_broadcast(out_shape: &[usize], b_shape: &[usize]) -> bool {
    let trimmed = {
        let first = b_shape.iter().position(|&d| d != 1).unwrap_or(b_shape.len());
        &b_shape[first..]
    };
    if trimmed.len() > out_shape.len() || trimmed.iter().product::<usize>() == 0 {
        return false;
    }
    out_shape[out_shape.len() - trimmed.len()..] == *trimmed
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Output offsets per input axis for a reduction (0 on reduced axes).
fn reduce_strides(shape: &[usize], reduced: &[bool], out_shape: &[usize]) -> Vec<usize> {
    let out_str = strides_of(out_shape);
    let mut map = vec![0; shape.len()];
    let mut oi = 0;
    for (i, &r) in reduced.iter().enumerate() {
        if !r {
            map[i] = out_str[oi];
            oi += 1;
        }
    }
    map
}

/// Output offsets per input axis for a permutation.
fn permute_strides(shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_str = strides_of(out_shape);
    let mut map = vec![0; shape.len()];
    for (out_axis, &in_axis) in perm.iter().enumerate() {
        map[in_axis] = out_str[out_axis];
    }
    map
}

/// Walks a shape in row-major order, tracking one mapped offset.
fn for_each_mapped(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for li in 0..numel {
        f(li, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= strides[ax] * shape[ax];
        }
    }
}

/// Walks a shape in row-major order, tracking two mapped offsets.
fn for_each_mapped2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for li in 0..numel {
        f(li, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
}

/// Propagates one node's gradient into its inputs (all at lower indices).
fn step_backward<E: Scalar>(node: &Node<E>, grad: &[E], before: &mut [Node<E>]) {
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            bin_backward(node, grad, before, *a, *b, |_, _, dy| (dy, dy));
        }
        Op::Sub(a, b) => {
            bin_backward(node, grad, before, *a, *b, |_, _, dy| (dy, E::zero() - dy));
        }
        Op::Mul(a, b) => {
            bin_backward(node, grad, before, *a, *b, |av, bv, dy| (dy * bv, dy * av));
        }
        Op::Div(a, b) => {
            bin_backward(node, grad, before, *a, *b, |av, bv, dy| {
                (dy / bv, E::zero() - dy * av / (bv * bv))
            });
        }
        Op::Scale(x, s) => {
            if before[*x].requires {
                let factor = E::from_f64(*s);
                let dx = before[*x].grad_or_zeros();
                for (d, &g) in dx.iter_mut().zip(grad) {
                    *d += g * factor;
                }
            }
        }
        Op::AddScalar(x) => {
            if before[*x].requires {
                let dx = before[*x].grad_or_zeros();
                for (d, &g) in dx.iter_mut().zip(grad) {
                    *d += g;
                }
            }
        }
        Op::Relu(x) => {
            if before[*x].requires {
                let xn = &mut before[*x];
                if xn.grad.is_none() {
                    xn.grad = Some(vec![E::zero(); xn.data.len()]);
                }
                let data = &xn.data;
                let dx = xn.grad.as_mut().expect("just filled");
                for i in 0..data.len() {
                    if data[i] > E::zero() {
                        dx[i] += grad[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if before[*x].requires {
                let y = &node.data;
                let dx = before[*x].grad_or_zeros();
                for i in 0..y.len() {
                    dx[i] += grad[i] * y[i] * (E::one() - y[i]);
                }
            }
        }
        Op::ClampMin(x, c) => {
            if before[*x].requires {
                let floor = E::from_f64(*c);
                let xn = &mut before[*x];
                if xn.grad.is_none() {
                    xn.grad = Some(vec![E::zero(); xn.data.len()]);
                }
                let data = &xn.data;
                let dx = xn.grad.as_mut().expect("just filled");
                for i in 0..data.len() {
                    if data[i] > floor {
                        dx[i] += grad[i];
                    }
                }
            }
        }
        Op::MatMul { a, b, dims } => {
            let MatDims { batch, m, k, n, sa, sb } = dims;
            let (m, k, n) = (*m, *k, *n);
            let need_a = before[*a].requires;
            let need_b = before[*b].requires;
            // A rank-2 right operand is shared by every batch row, so both
            // gradients collapse to single products over the flattened rows.
            let shared_b = before[*b].shape.len() == 2;
            let nb: usize = batch.iter().product();
            if need_a {
                let bdata: *const E = before[*b].data.as_ptr();
                let blen = before[*b].data.len();
                let bslice = unsafe { std::slice::from_raw_parts(bdata, blen) };
                let da = before[*a].grad_or_zeros() as *mut Vec<E>;
                let da = unsafe { &mut *da };
                if shared_b {
                    // dA = dY * B^T
                    gemm(
                        nb * m,
                        n,
                        k,
                        E::one(),
                        grad,
                        0,
                        (n as isize, 1),
                        bslice,
                        0,
                        (1, n as isize),
                        E::one(),
                        da,
                        0,
                        (k as isize, 1),
                    );
                } else {
                    let mut bi = 0;
                    for_each_mapped2(batch, sa, sb, |_, oa, ob| {
                        gemm(
                            m,
                            n,
                            k,
                            E::one(),
                            grad,
                            bi * m * n,
                            (n as isize, 1),
                            bslice,
                            ob,
                            (1, n as isize),
                            E::one(),
                            da,
                            oa,
                            (k as isize, 1),
                        );
                        bi += 1;
                    });
                }
            }
            if need_b {
                let adata: *const E = before[*a].data.as_ptr();
                let alen = before[*a].data.len();
                let aslice = unsafe { std::slice::from_raw_parts(adata, alen) };
                let db = before[*b].grad_or_zeros() as *mut Vec<E>;
                let db = unsafe { &mut *db };
                if shared_b {
                    // dB = A^T * dY
                    gemm(
                        k,
                        nb * m,
                        n,
                        E::one(),
                        aslice,
                        0,
                        (1, k as isize),
                        grad,
                        0,
                        (n as isize, 1),
                        E::one(),
                        db,
                        0,
                        (n as isize, 1),
                    );
                } else {
                    let mut bi = 0;
                    for_each_mapped2(batch, sa, sb, |_, oa, ob| {
                        gemm(
                            k,
                            m,
                            n,
                            E::one(),
                            aslice,
                            oa,
                            (1, k as isize),
                            grad,
                            bi * m * n,
                            (n as isize, 1),
                            E::one(),
                            db,
                            ob,
                            (n as isize, 1),
                        );
                        bi += 1;
                    });
                }
            }
        }
        Op::Attention { q, k, v, probs, scale } => {
            let shape = &before[*q].shape;
            let (m, h, t, d) = (shape[0], shape[1], shape[2], shape[3]);
            let alpha = E::from_f64(*scale);
            let need_q = before[*q].requires;
            let need_k = before[*k].requires;
            let need_v = before[*v].requires;
            // Operands may alias; grads accumulate through raw pointers with
            // strictly sequential writes, matching the MatMul arm.
            let len = before[*q].data.len();
            let qd = unsafe { std::slice::from_raw_parts(before[*q].data.as_ptr(), len) };
            let kd = unsafe { std::slice::from_raw_parts(before[*k].data.as_ptr(), len) };
            let vd = unsafe { std::slice::from_raw_parts(before[*v].data.as_ptr(), len) };
            let dq: *mut Vec<E> =
                if need_q { before[*q].grad_or_zeros() as *mut _ } else { std::ptr::null_mut() };
            let dk: *mut Vec<E> =
                if need_k { before[*k].grad_or_zeros() as *mut _ } else { std::ptr::null_mut() };
            let dv: *mut Vec<E> =
                if need_v { before[*v].grad_or_zeros() as *mut _ } else { std::ptr::null_mut() };
            let mut ds = vec![E::zero(); t * t];
            for s in 0..m * h {
                let xo = s * t * d;
                let po = s * t * t;
                if need_q || need_k {
                    // dS = softmax'(P, dY Vᵀ), then dQ = alpha dS K and dK = alpha dSᵀ Q.
                    gemm(
                        t,
                        d,
                        t,
                        E::one(),
                        grad,
                        xo,
                        (d as isize, 1),
                        vd,
                        xo,
                        (1, d as isize),
                        E::zero(),
                        &mut ds,
                        0,
                        (t as isize, 1),
                    );
                    softmax_rows_backward_inplace(&probs[po..po + t * t], &mut ds, t, t);
                    if need_q {
                        let dq = unsafe { &mut *dq };
                        gemm(
                            t,
                            t,
                            d,
                            alpha,
                            &ds,
                            0,
                            (t as isize, 1),
                            kd,
                            xo,
                            (d as isize, 1),
                            E::one(),
                            dq,
                            xo,
                            (d as isize, 1),
                        );
                    }
                    if need_k {
                        let dk = unsafe { &mut *dk };
                        gemm(
                            t,
                            t,
                            d,
                            alpha,
                            &ds,
                            0,
                            (1, t as isize),
                            qd,
                            xo,
                            (d as isize, 1),
                            E::one(),
                            dk,
                            xo,
                            (d as isize, 1),
                        );
                    }
                }
                if need_v {
                    let dv = unsafe { &mut *dv };
                    gemm(
                        t,
                        t,
                        d,
                        E::one(),
                        probs,
                        po,
                        (1, t as isize),
                        grad,
                        xo,
                        (d as isize, 1),
                        E::one(),
                        dv,
                        xo,
                        (d as isize, 1),
                    );
                }
            }
        }
        Op::PointwiseConv { x, w, bias, stride } => {
            conv_backward(node, grad, before, *x, *w, *bias, 1, *stride);
        }
        Op::TemporalConv { x, w, bias, stride } => {
            let kernel = before[*w].shape[2];
            conv_backward(node, grad, before, *x, *w, *bias, kernel, *stride);
        }
        Op::Softmax { x, axis } => {
            if before[*x].requires {
                let (outer, len, inner) = lanes(&node.shape, *axis);
                let y = &node.data;
                let dx = before[*x].grad_or_zeros();
                softmax_backward(y, grad, outer, len, inner, dx);
            }
        }
        Op::LayerNorm { x, gamma, beta, axis, means, rstds } => {
            let (outer, len, inner) = lanes(&node.shape, *axis);
            // Gradients for x and gamma/beta all need x's value; compute into
            // scratch buffers first, then add into whichever inputs train.
            let mut dx = vec![E::zero(); before[*x].data.len()];
            let mut dgamma = vec![E::zero(); len];
            let mut dbeta = vec![E::zero(); len];
            layer_norm_backward(
                &before[*x].data,
                &before[*gamma].data,
                means,
                rstds,
                grad,
                outer,
                len,
                inner,
                &mut dx,
                &mut dgamma,
                &mut dbeta,
            );
            if before[*x].requires {
                let dst = before[*x].grad_or_zeros();
                for (d, s) in dst.iter_mut().zip(dx) {
                    *d += s;
                }
            }
            if before[*gamma].requires {
                let dst = before[*gamma].grad_or_zeros();
                for (d, s) in dst.iter_mut().zip(dgamma) {
                    *d += s;
                }
            }
            if before[*beta].requires {
                let dst = before[*beta].grad_or_zeros();
                for (d, s) in dst.iter_mut().zip(dbeta) {
                    *d += s;
                }
            }
        }
        Op::ReduceSum { x, axes } | Op::ReduceMean { x, axes } => {
            if before[*x].requires {
                let in_shape = before[*x].shape.clone();
                let mut reduced = vec![false; in_shape.len()];
                for &ax in axes {
                    reduced[ax] = true;
                }
                let map = reduce_strides(&in_shape, &reduced, &node.shape);
                let count: usize = in_shape
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| reduced[*i])
                    .map(|(_, &d)| d)
                    .product();
                let factor = if matches!(node.op, Op::ReduceMean { .. }) {
                    E::one() / E::from_f64(count as f64)
                } else {
                    E::one()
                };
                let dx = before[*x].grad_or_zeros();
                if node.data.len() == 1 {
                    let g = grad[0] * factor;
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                } else {
                    for_each_mapped(&in_shape, &map, |li, oo| {
                        dx[li] += grad[oo] * factor;
                    });
                }
            }
        }
        Op::Permute { x, perm } => {
            if before[*x].requires {
                let in_shape = before[*x].shape.clone();
                let map = permute_strides(&in_shape, perm, &node.shape);
                let dx = before[*x].grad_or_zeros();
                let rank = in_shape.len();
                if rank > 1 && perm[rank - 1] == rank - 1 {
                    let run = in_shape[rank - 1];
                    for_each_mapped(&in_shape[..rank - 1], &map[..rank - 1], |row, oo| {
                        let base = row * run;
                        for j in 0..run {
                            dx[base + j] += grad[oo + j];
                        }
                    });
                } else if rank > 1 {
                    let p = perm[rank - 1];
                    let (rshape, istr, istep, len) = drop_axis(&in_shape, &map, p);
                    for_each_mapped2(&rshape, &istr.0, &istr.1, |_, ia, oa| {
                        for j in 0..len {
                            dx[ia + j * istep] += grad[oa + j];
                        }
                    });
                } else {
                    for_each_mapped(&in_shape, &map, |li, oo| {
                        dx[li] += grad[oo];
                    });
                }
            }
        }
        Op::Reshape { x } => {
            if before[*x].requires {
                let dx = before[*x].grad_or_zeros();
                for (d, &g) in dx.iter_mut().zip(grad) {
                    *d += g;
                }
            }
        }
        Op::Concat { xs, axis } => {
            let total = node.shape[*axis];
            let (outer, _, inner) = lanes(&node.shape, *axis);
            let mut offset = 0;
            for &xi in xs {
                let len_i = before[xi].shape[*axis];
                if before[xi].requires {
                    let dx = before[xi].grad_or_zeros();
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len_i * inner;
                        for j in 0..len_i * inner {
                            dx[dst + j] += grad[src + j];
                        }
                    }
                }
                offset += len_i;
            }
        }
        Op::Downsample { x, axis, stride } => {
            if before[*x].requires {
                let in_shape = before[*x].shape.clone();
                let (outer, len, inner) = lanes(&in_shape, *axis);
                let out_len = node.shape[*axis];
                let dx = before[*x].grad_or_zeros();
                for o in 0..outer {
                    for j in 0..out_len {
                        let src = (o * out_len + j) * inner;
                        let dst = (o * len + j * stride) * inner;
                        for t in 0..inner {
                            dx[dst + t] += grad[src + t];
                        }
                    }
                }
            }
        }
        Op::NormAxis { x, axis } => {
            if before[*x].requires {
                let y = &node.data;
                let xn = &mut before[*x];
                let (outer, len, inner) = lanes(&xn.shape, *axis);
                if xn.grad.is_none() {
                    xn.grad = Some(vec![E::zero(); xn.data.len()]);
                }
                let data = &xn.data;
                let dx = xn.grad.as_mut().expect("just filled");
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = y[o * inner + i];
                        if norm <= E::zero() {
                            continue;
                        }
                        let g = grad[o * inner + i] / norm;
                        let base = o * len * inner + i;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] += g * data[idx];
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if before[*logits].requires {
                let b = labels.len();
                let c = before[*logits].shape[1];
                let scale = grad[0] / E::from_f64(b as f64);
                let dl = before[*logits].grad_or_zeros();
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let p = probs[i * c + j];
                        let target = if j == y { E::one() } else { E::zero() };
                        dl[i * c + j] += scale * (p - target);
                    }
                }
            }
        }
    }
}

/// Shared backward for the broadcastable binary ops.
fn bin_backward<E: Scalar>(
    node: &Node<E>,
    grad: &[E],
    before: &mut [Node<E>],
    a: usize,
    b: usize,
    f: impl Fn(E, E, E) -> (E, E),
) {
    let out_shape = &node.shape;
    let sa = broadcast_strides(out_shape, &before[a].shape);
    let sb = broadcast_strides(out_shape, &before[b].shape);
    let need_a = before[a].requires;
    let need_b = before[b].requires;
    // The two inputs may alias (x * x), so gradients accumulate via raw
    // pointers after bounds are fixed; iteration order stays deterministic.
    let pa = before[a].data.as_ptr();
    let pb = before[b].data.as_ptr();
    if need_a {
        before[a].grad_or_zeros();
    }
    if need_b {
        before[b].grad_or_zeros();
    }
    let ga: *mut E = if need_a {
        before[a].grad.as_mut().expect("filled").as_mut_ptr()
    } else {
        std::ptr::null_mut()
    };
    let gb: *mut E = if need_b {
        before[b].grad.as_mut().expect("filled").as_mut_ptr()
    } else {
        std::ptr::null_mut()
    };
    let blen = before[b].data.len();
    if before[a].shape == *out_shape && is_trailing_broadcast(out_shape, &before[b].shape) {
        for (ci, cg) in grad.chunks(blen).enumerate() {
            let ao = ci * blen;
            for (j, &gv) in cg.iter().enumerate() {
                let av = unsafe { *pa.add(ao + j) };
                let bv = unsafe { *pb.add(j) };
                let (da, db) = f(av, bv, gv);
                if !ga.is_null() {
                    unsafe { *ga.add(ao + j) += da };
                }
                if !gb.is_null() {
                    unsafe { *gb.add(j) += db };
                }
            }
        }
        return;
    }
    for_each_mapped2(out_shape, &sa, &sb, |li, oa, ob| {
        let av = unsafe { *pa.add(oa) };
        let bv = unsafe { *pb.add(ob) };
        let (da, db) = f(av, bv, grad[li]);
        if !ga.is_null() {
            unsafe { *ga.add(oa) += da };
        }
        if !gb.is_null() {
            unsafe { *gb.add(ob) += db };
        }
    });
}

/// Shared backward for pointwise (`kernel == 1`) and temporal convolutions.
#[allow(clippy::too_many_arguments)]
fn conv_backward<E: Scalar>(
    node: &Node<E>,
    grad: &[E],
    before: &mut [Node<E>],
    x: usize,
    w: usize,
    bias: Option<usize>,
    kernel: usize,
    stride: usize,
) {
    let (c_out, t_out, n, batch) = match node.shape.len() {
        4 => (node.shape[1], node.shape[2], node.shape[3], node.shape[0]),
        _ => (node.shape[0], node.shape[1], node.shape[2], 1),
    };
    let xshape = &before[x].shape;
    let (c_in, t) = match xshape.len() {
        4 => (xshape[1], xshape[2]),
        _ => (xshape[0], xshape[1]),
    };
    let cols_rows = c_in * kernel;
    let need_x = before[x].requires;
    let need_w = before[w].requires;
    let xd_ptr = before[x].data.as_ptr();
    let xd = unsafe { std::slice::from_raw_parts(xd_ptr, before[x].data.len()) };
    let wd_ptr = before[w].data.as_ptr();
    let wd = unsafe { std::slice::from_raw_parts(wd_ptr, before[w].data.len()) };

    let mut cols = vec![E::zero(); cols_rows * t_out * n];
    let mut dcols = vec![E::zero(); cols_rows * t_out * n];
    for bidx in 0..batch {
        let xoff = bidx * c_in * t * n;
        let yoff = bidx * c_out * t_out * n;
        let sample = &xd[xoff..xoff + c_in * t * n];
        if need_w {
            if kernel == 1 && stride == 1 {
                cols[..c_in * t * n].copy_from_slice(sample);
            } else if kernel == 1 {
                gather_frames(sample, c_in, t, n, stride, &mut cols);
            } else {
                im2col(sample, c_in, t, n, kernel, stride, &mut cols);
            }
            // dW += dY * cols^T
            let dwv = before[w].grad_or_zeros() as *mut Vec<E>;
            let dwv = unsafe { &mut *dwv };
            gemm(
                c_out,
                t_out * n,
                cols_rows,
                E::one(),
                grad,
                yoff,
                ((t_out * n) as isize, 1),
                &cols,
                0,
                (1, (t_out * n) as isize),
                E::one(),
                dwv,
                0,
                (cols_rows as isize, 1),
            );
        }
        if need_x {
            // dcols = W^T * dY, then fold back onto frames.
            dcols.iter_mut().for_each(|v| *v = E::zero());
            gemm(
                cols_rows,
                c_out,
                t_out * n,
                E::one(),
                wd,
                0,
                (1, cols_rows as isize),
                grad,
                yoff,
                ((t_out * n) as isize, 1),
                E::zero(),
                &mut dcols,
                0,
                ((t_out * n) as isize, 1),
            );
            let dxv = before[x].grad_or_zeros() as *mut Vec<E>;
            let dxv = unsafe { &mut *dxv };
            let dx_sample = &mut dxv[xoff..xoff + c_in * t * n];
            if kernel == 1 && stride == 1 {
                for (d, &s) in dx_sample.iter_mut().zip(dcols.iter()) {
                    *d += s;
                }
            } else if kernel == 1 {
                scatter_frames_add(&dcols, c_in, t, n, stride, dx_sample);
            } else {
                col2im_add(&dcols, c_in, t, n, kernel, stride, dx_sample);
            }
        }
    }
    if let Some(bi) = bias {
        if before[bi].requires {
            let db = before[bi].grad_or_zeros();
            for bidx in 0..batch {
                for c in 0..c_out {
                    let base = (bidx * c_out + c) * t_out * n;
                    let mut s = E::zero();
                    for &g in &grad[base..base + t_out * n] {
                        s += g;
                    }
                    db[c] += s;
                }
            }
        }
    }
}
