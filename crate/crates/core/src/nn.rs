//! Layer building blocks shared by the encoder, prompt encoders, memory attention
//! and decoder. Weights are `[in, out]`, activations channels-last.

use std::f64::consts::PI;

use crate::autodiff::Var;
use crate::params::{ParamStore, Scope};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

pub fn linear<'t>(s: &Scope<'_, '_, 't>, x: &Var<'t>) -> Var<'t> {
    let w = s.var("weight");
    let b = s.var("bias");
    let shape = x.shape();
    let fan_in = *shape.last().expect("linear on scalar");
    let fan_out = w.shape()[1];
    let rows = shape.iter().product::<usize>() / fan_in.max(1);
    let y = x.reshape(&[rows, fan_in]).matmul(&w).add_bcast(&b);
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    y.reshape(&out_shape)
}

pub fn layer_norm<'t>(s: &Scope<'_, '_, 't>, x: &Var<'t>) -> Var<'t> {
    x.layer_norm(&s.var("weight"), &s.var("bias"), LN_EPS)
}

/// Two-layer MLP with GELU.
pub fn mlp<'t>(s: &Scope<'_, '_, 't>, x: &Var<'t>) -> Var<'t> {
    let h = linear(&s.sub("fc1"), x).gelu();
    linear(&s.sub("fc2"), &h)
}

pub fn init_mlp(store: &mut ParamStore, seed: u64, name: &str, dim: usize, hidden: usize, out: usize) {
    store.init_linear(seed, &format!("{name}.fc1"), dim, hidden);
    store.init_linear(seed, &format!("{name}.fc2"), hidden, out);
}

/// Registers the q/k/v/out projections of a multi-head attention layer.
///
/// `internal` is the attention width; `out` projects back to `out_dim`. With
/// `zero_out` the output projection starts at zero, so the layer initially adds
/// nothing to its residual stream.
#[allow(clippy::too_many_arguments)]
pub fn init_attention(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    q_dim: usize,
    kv_dim: usize,
    internal: usize,
    out_dim: usize,
    zero_out: bool,
) {
    store.init_linear(seed, &format!("{name}.q"), q_dim, internal);
    store.init_linear(seed, &format!("{name}.k"), kv_dim, internal);
    store.init_linear(seed, &format!("{name}.v"), kv_dim, internal);
    if zero_out {
        store.init_linear_zero(&format!("{name}.out"), internal, out_dim);
    } else {
        store.init_linear(seed, &format!("{name}.out"), internal, out_dim);
    }
}

/// Multi-head attention over batched sequences.
///
/// `q_in`: `[B, Tq, Cq]`, `k_in`/`v_in`: `[B, Tk, Ck]`; optional additive `bias`
/// of shape `[H, Tq, Tk]` shared across the batch (B must be 1 when given).
/// Returns `[B, Tq, out_dim]`.
pub fn attention<'t>(
    s: &Scope<'_, '_, 't>,
    q_in: &Var<'t>,
    k_in: &Var<'t>,
    v_in: &Var<'t>,
    heads: usize,
    bias: Option<&Var<'t>>,
) -> Var<'t> {
    let qs = q_in.shape();
    let ks = k_in.shape();
    let (b, tq, tk) = (qs[0], qs[1], ks[1]);
    let q = linear(&s.sub("q"), q_in);
    let k = linear(&s.sub("k"), k_in);
    let v = linear(&s.sub("v"), v_in);
    let d = q.shape()[2];
    assert_eq!(d % heads, 0, "attention width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let split = |x: &Var<'t>, t: usize| {
        x.reshape(&[b, t, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, t, dh])
    };
    let (q, k, v) = (split(&q, tq), split(&k, tk), split(&v, tk));
    let mut scores = q.bmm(&k, false, true).scale(1.0 / (dh as f64).sqrt());
    if let Some(bias) = bias {
        assert_eq!(b, 1, "attention bias only supported for a single batch");
        scores = scores.add_bcast(bias);
    }
    let probs = scores.softmax_last();
    let o = probs
        .bmm(&v, false, false)
        .reshape(&[b, heads, tq, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, tq, d]);
    linear(&s.sub("out"), &o)
}

/// Unbatched convenience wrapper: `[Tq, Cq]` x `[Tk, Ck]` -> `[Tq, out]`.
pub fn attention2<'t>(
    s: &Scope<'_, '_, 't>,
    q_in: &Var<'t>,
    k_in: &Var<'t>,
    v_in: &Var<'t>,
    heads: usize,
    bias: Option<&Var<'t>>,
) -> Var<'t> {
    let add_batch = |x: &Var<'t>| {
        let sh = x.shape();
        x.reshape(&[1, sh[0], sh[1]])
    };
    let o = attention(s, &add_batch(q_in), &add_batch(k_in), &add_batch(v_in), heads, bias);
    let sh = o.shape();
    o.reshape(&[sh[1], sh[2]])
}

/// `[D*H*W, c]` -> `[(D/f)(H/f)(W/f), f³·c]`: gathers each non-overlapping `f³` cell
/// into one row, so a stride-`f`, kernel-`f` convolution becomes a matrix product.
pub fn space_to_depth<'t>(x: &Var<'t>, dims: [usize; 3], f: usize) -> Var<'t> {
    let c = x.shape()[1];
    let [d, h, w] = dims;
    x.reshape(&[d / f, f, h / f, f, w / f, f, c])
        .permute(&[0, 2, 4, 1, 3, 5, 6])
        .reshape(&[(d / f) * (h / f) * (w / f), f * f * f * c])
}

/// Inverse layout of [`space_to_depth`]: `[d*h*w, f³·c]` -> `[(df)(hf)(wf), c]`.
pub fn depth_to_space<'t>(x: &Var<'t>, dims: [usize; 3], f: usize) -> Var<'t> {
    let [d, h, w] = dims;
    let c = x.shape()[1] / (f * f * f);
    x.reshape(&[d, h, w, f, f, f, c])
        .permute(&[0, 3, 1, 4, 2, 5, 6])
        .reshape(&[d * f * h * f * w * f, c])
}

/// Random Fourier features of points in `[0,1]³`: `[sin(2π·x'G), cos(2π·x'G)]`
/// with `x' = 2x − 1` and `G` the `[3, C/2]` Gaussian buffer.
pub fn fourier_features(gaussian: &Tensor, coords: &[[f64; 3]]) -> Tensor {
    let half = gaussian.shape()[1];
    let g = gaussian.data();
    let mut out = Vec::with_capacity(coords.len() * 2 * half);
    for c in coords {
        let x = [2.0 * c[0] - 1.0, 2.0 * c[1] - 1.0, 2.0 * c[2] - 1.0];
        let proj: Vec<f64> = (0..half)
            .map(|j| 2.0 * PI * (x[0] * g[j] + x[1] * g[half + j] + x[2] * g[2 * half + j]))
            .collect();
        out.extend(proj.iter().map(|p| p.sin()));
        out.extend(proj.iter().map(|p| p.cos()));
    }
    Tensor::from_parts(vec![coords.len(), 2 * half], out)
}

/// Normalized centres of every cell of a `dims` grid, z-major.
pub fn grid_centres(dims: [usize; 3]) -> Vec<[f64; 3]> {
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push([
                    (z as f64 + 0.5) / d as f64,
                    (y as f64 + 0.5) / h as f64,
                    (x as f64 + 0.5) / w as f64,
                ]);
            }
        }
    }
    out
}
