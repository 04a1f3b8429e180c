//! Named parameter storage and the handful of layers the fusion network
//! is assembled from.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::tensor::{ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), both kept in registration order under unique names.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(init_seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|(n, _)| *n != name), "duplicate parameter {name}");
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn add_fan_in(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push((name.into(), value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace every parameter and buffer with same-named, same-shaped
    /// tensors from `other`.
    pub fn load_from(&mut self, params: &[(String, Tensor)], buffers: &[(String, Tensor)]) -> Result<(), String> {
        fn copy(dst: &mut [(String, Tensor)], src: &[(String, Tensor)], what: &str) -> Result<(), String> {
            if dst.len() != src.len() {
                return Err(format!("{what} count {} != expected {}", src.len(), dst.len()));
            }
            for ((dn, dt), (sn, st)) in dst.iter_mut().zip(src) {
                if dn != sn || dt.shape() != st.shape() {
                    return Err(format!("{what} {sn}{:?} does not match {dn}{:?}", st.shape(), dt.shape()));
                }
                *dt = st.clone();
            }
            Ok(())
        }
        copy(&mut self.params, params, "parameter")?;
        copy(&mut self.buffers, buffers, "buffer")
    }

    /// Put every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|(_, t)| tape.var(t.clone())).collect()
    }

    /// Put every parameter on `tape` as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are collected.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Everything a forward pass needs: the tape, bound parameters, buffers and mode.
pub struct Ctx<'a, 't> {
    pub tape: &'t Tape,
    pub params: &'a [Var<'t>],
    pub store: &'a ParamStore,
    pub mode: Mode,
    bn_stats: RefCell<Vec<(BufferId, Tensor)>>,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn new(tape: &'t Tape, params: &'a [Var<'t>], store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            params,
            store,
            mode,
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    /// Running statistics updated by this pass, to be committed after the
    /// optimizer step.
    pub fn take_bn_updates(&self) -> Vec<(BufferId, Tensor)> {
        self.bn_stats.take()
    }
}

/// Commit batch-norm running statistics gathered during a training pass.
pub fn apply_bn_updates(store: &mut ParamStore, updates: Vec<(BufferId, Tensor)>) {
    for (id, t) in updates {
        *store.buffer_mut(id) = t;
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    geom: ConvGeom,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, geom: ConvGeom, bias: bool) -> Self {
        let cin_g = cin / geom.groups;
        let weight = store.add_fan_in(format!("{name}.weight"), &[cout, cin_g, k, k], cin_g * k * k);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, geom }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.geom)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }
}

/// Fully connected layer on the last axis; weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add_fan_in(format!("{name}.weight"), &[fan_out, fan_in], fan_in);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    /// `x: [.., in] -> [.., out]`
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        assert_eq!(*shape.last().unwrap(), self.fan_in, "linear input width");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = ctx.p(self.weight).reshape(&[1, self.fan_out, self.fan_in]).permute(&[0, 2, 1]);
        let mut y = x.reshape(&[1, rows, self.fan_in]).matmul(w);
        if let Some(b) = self.bias {
            y = y.add(ctx.p(b).reshape(&[1, 1, self.fan_out]));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        y.reshape(&out_shape)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        let c = self.channels;
        let (b, _, h, w) = x.value().dims4();
        let gamma = ctx.p(self.gamma).reshape(&[1, c, 1, 1]);
        let beta = ctx.p(self.beta).reshape(&[1, c, 1, 1]);
        let (mean, var) = match ctx.mode {
            Mode::Train => {
                let mean = x.mean_axes(&[0, 2, 3]);
                let var = x.sub(mean).square().mean_axes(&[0, 2, 3]);
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let store = ctx.store;
                let blend = |old: &Tensor, batch: &Tensor, scale: f64| {
                    old.zip_map(&batch.clone().reshape(&[c]), |o, v| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * scale)
                };
                let mut stats = ctx.bn_stats.borrow_mut();
                stats.push((self.running_mean, blend(store.buffer(self.running_mean), &mean.value(), 1.0)));
                stats.push((self.running_var, blend(store.buffer(self.running_var), &var.value(), unbiased)));
                (mean, var)
            }
            Mode::Eval => (
                ctx.tape.constant(ctx.store.buffer(self.running_mean).clone().reshape(&[1, c, 1, 1])),
                ctx.tape.constant(ctx.store.buffer(self.running_var).clone().reshape(&[1, c, 1, 1])),
            ),
        };
        x.sub(mean).div(var.add_scalar(BN_EPS).sqrt()).mul(gamma).add(beta)
    }
}

/// 3x3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvUnit {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, ConvGeom::same3x3(), false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Var<'t> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)).relu()
    }
}
