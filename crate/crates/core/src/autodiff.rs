//! Reverse-mode automatic differentiation on a per-graph tape.
//!
//! Values are computed eagerly; a backward closure is recorded only when at least
//! one input requires a gradient, so inference on constant inputs stores no
//! closures at all.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{gemm, numel, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of the leaves that required them, keyed by node id.
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.remove(&var.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        let node = Node {
            value: Rc::new(value),
            parents: if requires_grad { parents.iter().map(|p| p.id).collect() } else { Vec::new() },
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        };
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let shape = output.value().shape().to_vec();
        assert_eq!(numel(&shape), 1, "backward() needs a scalar, got {shape:?}");
        self.backward_with(output, Tensor::full(&shape, 1.0))
    }

    /// Backpropagates an explicit output cotangent.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.id + 1, || None);
        grads[output.id] = Some(seed);
        let mut out = Gradients::default();
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    out.grads.insert(id, g);
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        out
    }
}

/// Sums a gradient of shape `full` down to a trailing-suffix shape `suffix`.
fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    let inner = numel(suffix);
    let mut out = vec![0.0; inner];
    if inner > 0 {
        for chunk in g.data().chunks_exact(inner) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
    }
    Tensor::from_parts(suffix.to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf_rc(self.value(), false)
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.push(out, &[*self, *other], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape
            .push(out, &[*self, *other], |g| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push(out, &[*self, *other], move |g| {
            vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]
        })
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x / y);
        self.tape.push(out, &[*self, *other], move |g| {
            let ga = g.zip_map(&b, |g, y| g / y);
            let mut gb = g.zip_map(&a, |g, x| -g * x);
            for (v, y) in gb.data_mut().iter_mut().zip(b.data()) {
                *v /= y * y;
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.tape.push(out, &[*self], move |g| vec![Some(g.map(|x| x * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.tape.push(out, &[*self], |g| vec![Some(g.clone())])
    }

    /// `self + other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn add_bcast(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let bs = b.shape().to_vec();
        assert!(a.shape().ends_with(&bs), "add_bcast {:?} + {:?}", a.shape(), bs);
        let inner = b.numel();
        let mut out = (*a).clone();
        if inner > 0 {
            for chunk in out.data_mut().chunks_exact_mut(inner) {
                for (o, y) in chunk.iter_mut().zip(b.data()) {
                    *o += y;
                }
            }
        }
        self.tape.push(out, &[*self, *other], move |g| {
            vec![Some(g.clone()), Some(reduce_to_suffix(g, &bs))]
        })
    }

    /// `self * other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn mul_bcast(&self, other: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let bs = b.shape().to_vec();
        assert!(a.shape().ends_with(&bs), "mul_bcast {:?} * {:?}", a.shape(), bs);
        let inner = b.numel();
        let mut out = (*a).clone();
        if inner > 0 {
            for chunk in out.data_mut().chunks_exact_mut(inner) {
                for (o, y) in chunk.iter_mut().zip(b.data()) {
                    *o *= y;
                }
            }
        }
        self.tape.push(out, &[*self, *other], move |g| {
            let mut ga = g.clone();
            let mut gb = vec![0.0; inner];
            if inner > 0 {
                for (gc, ac) in ga.data_mut().chunks_exact_mut(inner).zip(a.data().chunks_exact(inner)) {
                    for i in 0..inner {
                        gb[i] += gc[i] * ac[i];
                        gc[i] *= b.data()[i];
                    }
                }
            }
            vec![Some(ga), Some(Tensor::from_parts(bs.clone(), gb))]
        })
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let a3 = self.reshape(&[1, sa[0], sa[1]]);
        let b3 = other.reshape(&[1, sb[0], sb[1]]);
        let c = a3.bmm(&b3, false, false);
        c.reshape(&[sa[0], sb[1]])
    }

    /// Batched matrix product of 3-D operands `[B, M, K] x [B, K, N]`, with optional
    /// per-operand transposes of the two trailing axes.
    pub fn bmm(&self, other: &Var<'t>, trans_a: bool, trans_b: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm {sa:?} x {sb:?}");
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} x {sb:?} (ta={trans_a}, tb={trans_b})");
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                trans_a,
                &b.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::from_parts(vec![batch, m, n], out);
        self.tape.push(out, &[*self, *other], move |g| {
            let gd = g.data();
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                if trans_a {
                    gemm(k, n, m, bi, trans_b, gi, true, ga_i, false);
                } else {
                    gemm(m, n, k, gi, false, bi, !trans_b, ga_i, false);
                }
                let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(n, m, k, gi, true, ai, trans_a, gb_i, false);
                } else {
                    gemm(k, m, n, ai, !trans_a, gi, false, gb_i, false);
                }
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                Some(Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let orig = v.shape().to_vec();
        let out = (*v).clone().reshape(shape);
        self.tape.push(out, &[*self], move |g| vec![Some(g.clone().reshape(&orig))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t> {
        let out = self.value().permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push(out, &[*self], move |g| vec![Some(g.permute(&inverse))])
    }

    /// Transpose of a 2-D value.
    pub fn t(&self) -> Var<'t> {
        self.permute(&[1, 0])
    }

    pub fn softmax_last(&self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("softmax on scalar");
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(y);
        let yc = y.clone();
        self.tape.push((*y).clone(), &[*self], move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_exact_mut(n).zip(yc.data().chunks_exact(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[C]`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let c = *x.shape().last().expect("layer_norm on scalar");
        assert_eq!(gm.shape(), &[c]);
        assert_eq!(bt.shape(), &[c]);
        let rows = x.numel() / c.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let shape = x.shape().to_vec();
        self.tape.push(out, &[*self, *gamma, *beta], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for r in 0..rows {
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..c {
                    let i = r * c + j;
                    gg[j] += gd[i] * xhat[i];
                    gb[j] += gd[i];
                    let dh = gd[i] * gm.data()[j];
                    mean_dh += dh;
                    mean_dh_h += dh * xhat[i];
                }
                mean_dh /= c as f64;
                mean_dh_h /= c as f64;
                for j in 0..c {
                    let i = r * c + j;
                    let dh = gd[i] * gm.data()[j];
                    gx[i] = inv_std[r] * (dh - mean_dh - xhat[i] * mean_dh_h);
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), gx)),
                Some(Tensor::from_parts(vec![c], gg)),
                Some(Tensor::from_parts(vec![c], gb)),
            ]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let x = self.value();
        let out = x.map(gelu_scalar);
        self.tape
            .push(out, &[*self], move |g| vec![Some(g.zip_map(&x, |g, x| g * gelu_grad_scalar(x)))])
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = Rc::new(self.value().map(sigmoid_scalar));
        let yc = y.clone();
        self.tape.push((*y).clone(), &[*self], move |g| {
            vec![Some(g.zip_map(&yc, |g, y| g * y * (1.0 - y)))]
        })
    }

    pub fn sum_all(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.push(out, &[*self], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.narrow0(start, len);
        self.tape.push(out, &[*self], move |g| {
            let row: usize = shape[1..].iter().product();
            let mut full = Tensor::zeros(&shape);
            full.data_mut()[start * row..(start + len) * row].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        assert_eq!(indices.len(), numel(shape), "gather index count");
        let src_shape = x.shape().to_vec();
        let data: Vec<f64> = indices.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.tape.push(out, &[*self], move |g| {
            let mut gx = Tensor::zeros(&src_shape);
            let gxd = gx.data_mut();
            for (&i, gv) in indices.iter().zip(g.data()) {
                gxd[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along axis 0.
    pub fn concat0(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat0(&refs);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        tape.push(out, parts, move |g| {
            let mut start = 0;
            lens.iter()
                .map(|&l| {
                    let piece = g.narrow0(start, l);
                    start += l;
                    Some(piece)
                })
                .collect()
        })
    }
}
