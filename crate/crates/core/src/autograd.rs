//! A small reverse-mode autodiff tape over [`Tensor`].
//!
//! Every op records a closure that maps the output gradient to gradients of
//! its parents. Nodes whose inputs are all constants record nothing, so
//! frozen feature extraction on targets costs no tape memory.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::{self, ConvGeom, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
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

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one scalar output w.r.t. the tape's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
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

    fn push_node(&self, value: Tensor, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf (network parameter or probed input).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, true, vec![], None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, false, vec![], None)
    }

    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if requires {
            let ids = parents.iter().map(|p| p.id).collect();
            self.push_node(value, true, ids, Some(Box::new(backward)))
        } else {
            self.push_node(value, false, vec![], None)
        }
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        assert_eq!(out.value.numel(), 1, "backward from non-scalar {:?}", out.value.shape());
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                for (&pid, pg) in node.parents.iter().zip(bw(&g)) {
                    let Some(pg) = pg else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.record(out, parts, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = tensor::narrow(g, axis, start, len);
                    start += len;
                    Some(part)
                })
                .collect()
        })
    }
}

fn expand(g: &Tensor, shape: &[usize]) -> Tensor {
    tensor::broadcast_zip(&Tensor::zeros(shape), g, |_, b| b)
}

impl<'t> Var<'t> {
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

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.record((*y).clone(), &[self], move |g| {
            let d = tensor::broadcast_zip(&tensor::broadcast_zip(&x, &yc, &df), g, |a, b| a * b);
            vec![Some(d)]
        })
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = tensor::broadcast_zip(&a, &b, f);
        self.tape.record(out, &[self, other], move |g| {
            let out_shape = g.shape().to_vec();
            let ae = if a.shape() == out_shape.as_slice() { (*a).clone() } else { expand(&a, &out_shape) };
            let be = if b.shape() == out_shape.as_slice() { (*b).clone() } else { expand(&b, &out_shape) };
            let mut ga = Vec::with_capacity(g.numel());
            let mut gb = Vec::with_capacity(g.numel());
            for ((&gv, &x), &y) in g.data().iter().zip(ae.data()).zip(be.data()) {
                ga.push(da(x, y, gv));
                gb.push(db(x, y, gv));
            }
            let ga = Tensor::new(out_shape.clone(), ga);
            let gb = Tensor::new(out_shape, gb);
            vec![
                Some(tensor::reduce_to_shape(&ga, a.shape())),
                Some(tensor::reduce_to_shape(&gb, b.shape())),
            ]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a / b, |_, b, g| g / b, |a, b, g| -g * a / (b * b))
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            f64::max,
            |a, b, g| if a >= b { g } else { 0.0 },
            |a, b, g| if a >= b { 0.0 } else { g },
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(move |x| x + k, |_, _| 1.0)
    }

    /// `k - self`
    pub fn rsub_scalar(self, k: f64) -> Var<'t> {
        self.unary(move |x| k - x, |_, _| -1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Square root whose derivative at 0 is taken as 0 (the subgradient
    /// used for norms of identical tensors).
    pub fn sqrt(self) -> Var<'t> {
        self.unary(|x| x.max(0.0).sqrt(), |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `max(self, floor)`; gradient passes only where the input is above the floor.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(move |x| x.max(floor), move |x, _| if x >= floor { 1.0 } else { 0.0 })
    }

    pub fn sum(self) -> Var<'t> {
        let shape = self.shape();
        let total = self.value().sum();
        self.tape
            .record(Tensor::scalar(total), &[self], move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = tensor::reduce_to_shape(&x, &tensor::reduced_shape(&shape, axes));
        self.tape.record(out, &[self], move |g| vec![Some(expand(g, &shape))])
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    /// Max over `axes`, keeping them as size-1 dims.
    pub fn max_axes(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (out, arg) = tensor::max_axes(&x, axes);
        self.tape.record(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (gv, &i) in g.data().iter().zip(&arg) {
                gx.data_mut()[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let old = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.tape
            .record(out, &[self], move |g| vec![Some(g.clone().reshape(&old))])
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let out = tensor::permute(&self.value(), perm);
        let inv = tensor::inverse_permutation(perm);
        self.tape
            .record(out, &[self], move |g| vec![Some(tensor::permute(g, &inv))])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let shape = self.shape();
        let out = tensor::narrow(&self.value(), axis, start, len);
        self.tape.record(out, &[self], move |g| {
            vec![Some(tensor::unnarrow(g, &shape, axis, start))]
        })
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out = tensor::batched_matmul(&a, &b, false, false);
        self.tape.record(out, &[self, other], move |g| {
            vec![
                Some(tensor::batched_matmul(g, &b, false, true)),
                Some(tensor::batched_matmul(&a, g, true, false)),
            ]
        })
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeom) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let bval = bias.map(|b| b.value());
        let out = tensor::conv2d(&x, &w, bval.as_deref(), geom);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        let has_bias = bias.is_some();
        self.tape.record(out, &parents, move |g| {
            let (gx, gw) = tensor::conv2d_backward(&x, &w, g, geom, need_x, need_w);
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(tensor::conv2d_bias_grad(g)));
            }
            grads
        })
    }

    /// Convolution with frozen, shared weights that never enter the tape.
    pub fn conv2d_fixed(self, weight: &Arc<Tensor>, bias: Option<&Arc<Tensor>>, geom: ConvGeom) -> Var<'t> {
        let x = self.value();
        let out = tensor::conv2d(&x, weight, bias.map(|b| b.as_ref()), geom);
        let w = Arc::clone(weight);
        self.tape.record(out, &[self], move |g| {
            vec![tensor::conv2d_backward(&x, &w, g, geom, true, false).0]
        })
    }

    pub fn max_pool2x2(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (out, arg) = tensor::max_pool2x2(&x);
        self.tape.record(out, &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (gv, &i) in g.data().iter().zip(&arg) {
                gx.data_mut()[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    pub fn avg_pool(self, k: usize) -> Var<'t> {
        if k == 1 {
            return self;
        }
        let shape = self.shape();
        let out = tensor::avg_pool(&self.value(), k);
        self.tape
            .record(out, &[self], move |g| vec![Some(tensor::avg_pool_backward(g, &shape, k))])
    }

    pub fn upsample2x(self) -> Var<'t> {
        let out = tensor::upsample_nearest2x(&self.value());
        self.tape
            .record(out, &[self], |g| vec![Some(tensor::upsample_nearest2x_backward(g))])
    }

    pub fn pad_replicate(self, p: usize) -> Var<'t> {
        let out = tensor::pad_replicate(&self.value(), p);
        self.tape
            .record(out, &[self], move |g| vec![Some(tensor::pad_replicate_backward(g, p))])
    }

    pub fn softmax_last(self) -> Var<'t> {
        let y = Rc::new(tensor::softmax_last(&self.value()));
        let yc = y.clone();
        self.tape.record((*y).clone(), &[self], move |g| {
            vec![Some(tensor::softmax_last_backward(&yc, g))]
        })
    }

    /// `softmax(q kᵀ) v` for `q: [B,N,d]`, `k: [B,M,d]`, `v: [B,M,e]`,
    /// evaluated in query chunks so the `N x M` map is never held whole.
    pub fn attention(self, k: Var<'t>, v: Var<'t>) -> Var<'t> {
        let (q, kk, vv) = (self.value(), k.value(), v.value());
        let out = attention_forward(&q, &kk, &vv);
        self.tape.record(out, &[self, k, v], move |g| {
            let (gq, gk, gv) = attention_backward(&q, &kk, &vv, g);
            vec![Some(gq), Some(gk), Some(gv)]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const ATTN_CHUNK: usize = 512;

fn attn_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> (usize, usize, usize, usize, usize) {
    let (b, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (m, e) = (k.shape()[1], v.shape()[2]);
    assert_eq!(k.shape(), &[b, m, d], "attention key shape");
    assert_eq!(v.shape()[..2], [b, m], "attention value shape");
    (b, n, m, d, e)
}

/// Row-softmaxed scores for queries `rows` of batch item `bi`.
fn attn_probs(q: &Tensor, k: &Tensor, bi: usize, rows: std::ops::Range<usize>, dims: (usize, usize, usize)) -> Vec<f64> {
    let (n, m, d) = dims;
    let r = rows.len();
    let mut p = vec![0.0; r * m];
    let qs = &q.data()[(bi * n + rows.start) * d..][..r * d];
    let ks = &k.data()[bi * m * d..][..m * d];
    tensor::gemm(r, d, m, qs, false, ks, true, &mut p, 0.0);
    let probs = tensor::softmax_last(&Tensor::new(vec![r, m], p));
    probs.into_data()
}

pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (b, n, m, d, e) = attn_dims(q, k, v);
    let mut out = vec![0.0; b * n * e];
    for bi in 0..b {
        let vs = &v.data()[bi * m * e..][..m * e];
        for start in (0..n).step_by(ATTN_CHUNK) {
            let rows = start..(start + ATTN_CHUNK).min(n);
            let r = rows.len();
            let p = attn_probs(q, k, bi, rows, (n, m, d));
            tensor::gemm(r, m, e, &p, false, vs, false, &mut out[(bi * n + start) * e..][..r * e], 0.0);
        }
    }
    Tensor::new(vec![b, n, e], out)
}

pub fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, n, m, d, e) = attn_dims(q, k, v);
    let mut gq = vec![0.0; b * n * d];
    let mut gk = vec![0.0; b * m * d];
    let mut gv = vec![0.0; b * m * e];
    for bi in 0..b {
        let ks = &k.data()[bi * m * d..][..m * d];
        let vs = &v.data()[bi * m * e..][..m * e];
        for start in (0..n).step_by(ATTN_CHUNK) {
            let rows = start..(start + ATTN_CHUNK).min(n);
            let r = rows.len();
            let p = attn_probs(q, k, bi, rows, (n, m, d));
            let go = &g.data()[(bi * n + start) * e..][..r * e];
            // dV += Pᵀ dO
            tensor::gemm(m, r, e, &p, true, go, false, &mut gv[bi * m * e..][..m * e], 1.0);
            // dP = dO Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut dp = vec![0.0; r * m];
            tensor::gemm(r, e, m, go, false, vs, true, &mut dp, 0.0);
            for (prow, drow) in p.chunks(m).zip(dp.chunks_mut(m)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (pv, dv) in prow.iter().zip(drow.iter_mut()) {
                    *dv = pv * (*dv - dot);
                }
            }
            let qs = &q.data()[(bi * n + start) * d..][..r * d];
            tensor::gemm(r, m, d, &dp, false, ks, false, &mut gq[(bi * n + start) * d..][..r * d], 0.0);
            tensor::gemm(m, r, d, &dp, true, qs, false, &mut gk[bi * m * d..][..m * d], 1.0);
        }
    }
    (
        Tensor::new(q.shape().to_vec(), gq),
        Tensor::new(k.shape().to_vec(), gk),
        Tensor::new(v.shape().to_vec(), gv),
    )
}
