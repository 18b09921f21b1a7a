//! Finite-difference verification of tape gradients.
//!
//! A closure builds the loss from scratch on every call, so central
//! differences probe exactly the computation the tape differentiated.

use rand::Rng;

use super::{Graph, ParamStore, Scalar, TensorError, Var};
use crate::rng::stream_rng;

/// Summary of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst_entry: String,
}

/// Compares tape gradients against central differences on sampled entries.
///
/// For each parameter, up to `samples_per_param` entries are perturbed by
/// `eps` in both directions and the numeric slope is compared to the
/// analytic gradient as `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check<E, F>(
    store: &mut ParamStore<E>,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport, TensorError>
where
    E: Scalar,
    F: Fn(&mut Graph<E>, &ParamStore<E>) -> Result<Var, TensorError>,
{
    let ids: Vec<_> = store.ids().collect();
    check_ids(store, &ids, eps, samples_per_param, seed, loss_fn)
}

/// Like [`check`], but probes only `n_params` randomly chosen parameter
/// tensors; for models too large to sweep exhaustively.
pub fn check_sampled<E, F>(
    store: &mut ParamStore<E>,
    n_params: usize,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport, TensorError>
where
    E: Scalar,
    F: Fn(&mut Graph<E>, &ParamStore<E>) -> Result<Var, TensorError>,
{
    let mut ids: Vec<_> = store.ids().collect();
    let mut rng = stream_rng(seed, "gradcheck-sample", 0);
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    ids.truncate(n_params);
    check_ids(store, &ids, eps, samples_per_param, seed, loss_fn)
}

fn check_ids<E, F>(
    store: &mut ParamStore<E>,
    ids: &[super::ParamId],
    eps: f64,
    samples_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport, TensorError>
where
    E: Scalar,
    F: Fn(&mut Graph<E>, &ParamStore<E>) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(TensorError::Invalid(format!(
            "grad check eps {eps} outside [1e-6, 1e-4]"
        )));
    }
    store.zero_grads();
    {
        let mut graph = Graph::new();
        let loss = loss_fn(&mut graph, store)?;
        graph.backward(loss)?;
        graph.accumulate_param_grads(store, E::one());
    }

    let mut rng = stream_rng(seed, "gradcheck", 0);
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut checked = 0usize;
    let mut worst = String::from("(none)");
    for &id in ids {
        let numel = store.get(id).numel();
        if numel == 0 {
            continue;
        }
        let samples = samples_per_param.min(numel);
        for _ in 0..samples {
            let idx = rng.random_range(0..numel);
            let analytic = store.grad(id).data()[idx].to_f64();
            let original = store.get(id).data()[idx];
            let step = E::from_f64(eps);

            store.get_mut(id).data_mut()[idx] = original + step;
            let plus = eval_loss(store, &loss_fn)?;
            store.get_mut(id).data_mut()[idx] = original - step;
            let minus = eval_loss(store, &loss_fn)?;
            store.get_mut(id).data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            // Both slopes at the cancellation noise floor: agreement, not
            // error, regardless of their ratio.
            if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
                checked += 1;
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", store.name(id), idx);
            }
            sum_rel += rel;
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        entries_checked: checked,
        max_rel_err: max_rel,
        mean_rel_err: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
        worst_entry: worst,
    })
}

fn eval_loss<E, F>(store: &ParamStore<E>, loss_fn: &F) -> Result<f64, TensorError>
where
    E: Scalar,
    F: Fn(&mut Graph<E>, &ParamStore<E>) -> Result<Var, TensorError>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, store)?;
    Ok(graph.scalar_value(loss).to_f64())
}

/// Random tensor with entries in `±[margin, 1]`, for probing away from kinks.
fn probe_tensor<E: Scalar>(
    shape: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
    margin: f64,
) -> crate::tensor::Tensor<E> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = rng.random_range(margin..1.0);
            let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
            E::from_f64(sign * mag)
        })
        .collect();
    crate::tensor::Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Runs a finite-difference check over every graph operation.
///
/// Each case multiplies the op output elementwise by a fixed random
/// cotangent before summing, so transposed or misrouted gradients cannot
/// cancel out. Returns one report per case, tagged by op name.
pub fn op_suite<E: Scalar>(
    eps: f64,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>, TensorError> {
    let mut rng = stream_rng(seed, "opsuite", 0);
    let mut out = Vec::new();

    // Unary and binary elementwise ops over broadcast shapes.
    type BuildFn<E> = Box<dyn Fn(&mut Graph<E>, Var, Var) -> Result<Var, TensorError>>;
    let binary_cases: Vec<(&str, BuildFn<E>)> = vec![
        ("add", Box::new(|g, a, b| g.add(a, b))),
        ("sub", Box::new(|g, a, b| g.sub(a, b))),
        ("mul", Box::new(|g, a, b| g.mul(a, b))),
        ("div", Box::new(|g, a, b| g.div(a, b))),
    ];
    for (name, build) in binary_cases {
        let a = probe_tensor::<E>(&[2, 3, 4], &mut rng, 0.2);
        let b = probe_tensor::<E>(&[3, 1], &mut rng, 0.2);
        let cot = probe_tensor::<E>(&[2, 3, 4], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ia = store.register("a", a)?;
        let ib = store.register("b", b)?;
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let va = g.param(s, ia);
            let vb = g.param(s, ib);
            let y = build(g, va, vb)?;
            let c = g.constant(cot.clone());
            let w = g.mul(y, c)?;
            g.reduce_sum(w, &[0, 1, 2])
        })?;
        out.push((format!("{name} (broadcast)"), report));
    }

    type UnaryFn<E> = Box<dyn Fn(&mut Graph<E>, Var) -> Result<Var, TensorError>>;
    let unary_cases: Vec<(&str, f64, UnaryFn<E>)> = vec![
        ("scale", 0.05, Box::new(|g, x| Ok(g.scale(x, -1.7)))),
        ("add_scalar", 0.05, Box::new(|g, x| Ok(g.add_scalar(x, 0.4)))),
        ("relu", 0.2, Box::new(|g, x| Ok(g.relu(x)))),
        ("sigmoid", 0.05, Box::new(|g, x| Ok(g.sigmoid(x)))),
        ("clamp_min", 0.2, Box::new(|g, x| Ok(g.clamp_min(x, 0.0)))),
        ("softmax", 0.05, Box::new(|g, x| g.softmax(x, 1))),
        ("reduce_sum", 0.05, Box::new(|g, x| g.reduce_sum(x, &[1]))),
        ("reduce_mean", 0.05, Box::new(|g, x| g.reduce_mean(x, &[0]))),
        ("permute", 0.05, Box::new(|g, x| g.permute(x, &[2, 0, 1]))),
        ("reshape", 0.05, Box::new(|g, x| g.reshape(x, vec![4, 6]))),
        ("downsample", 0.05, Box::new(|g, x| g.downsample(x, 1, 2))),
        ("norm_axis", 0.1, Box::new(|g, x| g.norm_axis(x, 2))),
    ];
    for (name, margin, build) in unary_cases {
        let x = probe_tensor::<E>(&[2, 3, 4], &mut rng, margin);
        let mut store = ParamStore::new();
        let ix = store.register("x", x)?;
        let out_shape = {
            let mut g = Graph::new();
            let vx = g.param(&store, ix);
            let y = build(&mut g, vx)?;
            g.shape(y).to_vec()
        };
        let cot = probe_tensor::<E>(&out_shape, &mut rng, 0.05);
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let vx = g.param(s, ix);
            let y = build(g, vx)?;
            let c = g.constant(cot.clone());
            let w = g.mul(y, c)?;
            let axes: Vec<usize> = (0..g.shape(w).len()).collect();
            g.reduce_sum(w, &axes)
        })?;
        out.push((name.to_string(), report));
    }

    // Matmul, plain and with broadcast batching.
    {
        let a = probe_tensor::<E>(&[3, 4], &mut rng, 0.1);
        let b = probe_tensor::<E>(&[4, 2], &mut rng, 0.1);
        let cot = probe_tensor::<E>(&[3, 2], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ia = store.register("a", a)?;
        let ib = store.register("b", b)?;
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let va = g.param(s, ia);
            let vb = g.param(s, ib);
            let y = g.matmul(va, vb)?;
            let c = g.constant(cot.clone());
            let w = g.mul(y, c)?;
            g.reduce_sum(w, &[0, 1])
        })?;
        out.push(("matmul".to_string(), report));
    }
    {
        let a = probe_tensor::<E>(&[2, 2, 3, 4], &mut rng, 0.1);
        let b = probe_tensor::<E>(&[2, 1, 4, 2], &mut rng, 0.1);
        let cot = probe_tensor::<E>(&[2, 2, 3, 2], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ia = store.register("a", a)?;
        let ib = store.register("b", b)?;
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let va = g.param(s, ia);
            let vb = g.param(s, ib);
            let y = g.matmul(va, vb)?;
            let c = g.constant(cot.clone());
            let w = g.mul(y, c)?;
            g.reduce_sum(w, &[0, 1, 2, 3])
        })?;
        out.push(("matmul (batched broadcast)".to_string(), report));
    }

    // Convolutions over [B, C, T, N] with and without stride.
    for stride in [1usize, 2] {
        let x = probe_tensor::<E>(&[2, 3, 8, 4], &mut rng, 0.1);
        let w = probe_tensor::<E>(&[5, 3], &mut rng, 0.1);
        let bias = probe_tensor::<E>(&[5], &mut rng, 0.1);
        let t_out = super::conv_out_len(8, 1, stride);
        let cot = probe_tensor::<E>(&[2, 5, t_out, 4], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ix = store.register("x", x)?;
        let iw = store.register("w", w)?;
        let ib = store.register("b", bias)?;
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let vx = g.param(s, ix);
            let vw = g.param(s, iw);
            let vb = g.param(s, ib);
            let y = g.pointwise_conv(vx, vw, Some(vb), stride)?;
            let c = g.constant(cot.clone());
            let w2 = g.mul(y, c)?;
            g.reduce_sum(w2, &[0, 1, 2, 3])
        })?;
        out.push((format!("pointwise_conv (stride {stride})"), report));
    }
    for stride in [1usize, 2] {
        let x = probe_tensor::<E>(&[2, 3, 10, 4], &mut rng, 0.1);
        let w = probe_tensor::<E>(&[5, 3, 9], &mut rng, 0.1);
        let bias = probe_tensor::<E>(&[5], &mut rng, 0.1);
        let t_out = super::conv_out_len(10, 9, stride);
        let cot = probe_tensor::<E>(&[2, 5, t_out, 4], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ix = store.register("x", x)?;
        let iw = store.register("w", w)?;
        let ib = store.register("b", bias)?;
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let vx = g.param(s, ix);
            let vw = g.param(s, iw);
            let vb = g.param(s, ib);
            let y = g.temporal_conv(vx, vw, Some(vb), stride)?;
            let c = g.constant(cot.clone());
            let w2 = g.mul(y, c)?;
            g.reduce_sum(w2, &[0, 1, 2, 3])
        })?;
        out.push((format!("temporal_conv (kernel 9, stride {stride})"), report));
    }

    // Layer norm trains x, gamma, and beta at once.
    {
        let x = probe_tensor::<E>(&[3, 5, 4], &mut rng, 0.1);
        let gamma = probe_tensor::<E>(&[5], &mut rng, 0.3);
        let beta = probe_tensor::<E>(&[5], &mut rng, 0.1);
        let cot = probe_tensor::<E>(&[3, 5, 4], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ix = store.register("x", x)?;
        let ig = store.register("gamma", gamma)?;
        let ib = store.register("beta", beta)?;
        let report = check(&mut store, eps, 8, seed, |g, s| {
            let vx = g.param(s, ix);
            let vg = g.param(s, ig);
            let vb = g.param(s, ib);
            let y = g.layer_norm(vx, vg, vb, 1, 1e-5)?;
            let c = g.constant(cot.clone());
            let w = g.mul(y, c)?;
            g.reduce_sum(w, &[0, 1, 2])
        })?;
        out.push(("layer_norm".to_string(), report));
    }

    // Concat routes gradients to each operand slice.
    {
        let a = probe_tensor::<E>(&[2, 3], &mut rng, 0.1);
        let b = probe_tensor::<E>(&[2, 2], &mut rng, 0.1);
        let cot = probe_tensor::<E>(&[2, 5], &mut rng, 0.05);
        let mut store = ParamStore::new();
        let ia = store.register("a", a)?;
        let ib = store.register("b", b)?;
        let report = check(&mut store, eps, 6, seed, |g, s| {
            let va = g.param(s, ia);
            let vb = g.param(s, ib);
            let y = g.concat(&[va, vb], 1)?;
            let c = g.constant(cot.clone());
            let w = g.mul(y, c)?;
            g.reduce_sum(w, &[0, 1])
        })?;
        out.push(("concat".to_string(), report));
    }

    // Fused softmax cross-entropy from logits.
    {
        let logits = probe_tensor::<E>(&[4, 5], &mut rng, 0.05);
        let labels = vec![0usize, 2, 4, 1];
        let mut store = ParamStore::new();
        let il = store.register("logits", logits)?;
        let report = check(&mut store, eps, 12, seed, move |g, s| {
            let vl = g.param(s, il);
            g.cross_entropy(vl, &labels)
        })?;
        out.push(("cross_entropy".to_string(), report));
    }

    Ok(out)
}
