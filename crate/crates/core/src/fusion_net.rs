//! The feature interaction fusion network: two 4-level encoders, one fusion
//! block per level, and a skip-connected upsampling decoder.
//!
//! A fusion block (FIFB) takes the level features `φ_vi, φ_ir` and runs
//!
//! 1. channel attention: pooled descriptors of both modalities through a
//!    two-layer MLP and a sigmoid, giving weights `C_vi, C_ir` and
//!    `ϱ = C ⊙ φ`;
//! 2. cross attention over spatial tokens: `φ_cross_ir = softmax(Q_vi K_irᵀ) V_ir`
//!    and symmetrically for `φ_cross_vi`;
//! 3. spatial enhancement: `υ = φ ⊙ softmax_HW(conv(relu(conv(φ))))`;
//! 4. per-modality streams `BN(φ + E(Cat(φ_cross, υ)))`, where `E` is a 1x1
//!    embedding back to `C` channels, concatenated into `υ_f`;
//! 5. `φ_f = BN(conv(relu(dwconv(conv(υ_f)))) + conv(υ_f))`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::check_dims;
use crate::nn::{BatchNorm2d, Conv2d, ConvUnit, Ctx, Linear, Mode, ParamStore};
use crate::tensor::{self, ConvGeom, Tensor};

pub const LEVELS: usize = 4;
/// Input height and width must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Channels at level 1, doubling per level.
    pub base_channels: usize,
    pub levels: usize,
    /// Average-pool factor applied to key/value tokens at level 1, halved at
    /// each deeper level (never below 1).
    pub attention_token_downsample: usize,
    /// Hidden width of the channel-attention MLP; `C/2` when unset.
    pub mlp_hidden: Option<usize>,
    /// Query/key projection width; `C` when unset.
    pub attention_dim: Option<usize>,
    pub spatial_enhancement: bool,
    pub channel_attention: bool,
    pub cross_attention: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            levels: LEVELS,
            attention_token_downsample: 1,
            mlp_hidden: None,
            attention_dim: None,
            spatial_enhancement: true,
            channel_attention: true,
            cross_attention: true,
        }
    }
}

impl NetConfig {
    pub fn with_base_channels(base_channels: usize) -> Self {
        Self {
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.base_channels < 4 {
            return fail(format!("base_channels must be >= 4, got {}", self.base_channels));
        }
        if self.levels != LEVELS {
            return fail(format!("levels is fixed at {LEVELS}, got {}", self.levels));
        }
        let r = self.attention_token_downsample;
        if r == 0 || !r.is_power_of_two() || r > SIZE_MULTIPLE {
            return fail(format!("attention_token_downsample must be a power of two in 1..=16, got {r}"));
        }
        if self.mlp_hidden == Some(0) || self.attention_dim == Some(0) {
            return fail("mlp_hidden and attention_dim must be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Key/value pooling factor at `level` (1-based).
    pub fn token_downsample(&self, level: usize) -> usize {
        (self.attention_token_downsample >> (level - 1)).max(1)
    }
}

/// Both modalities' features at one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelFeatures<'t> {
    pub phi_vi: Var<'t>,
    pub phi_ir: Var<'t>,
}

fn flat_tokens(x: Var<'_>) -> Var<'_> {
    let (b, c, h, w) = x.value().dims4();
    x.reshape(&[b, c, h * w]).permute(&[0, 2, 1])
}

fn unflatten_tokens(t: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let s = t.shape();
    t.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}

/// Pool-concat-MLP-sigmoid channel weighting of both modalities.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), 4 * channels, hidden, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, 2 * channels, true),
            channels,
        }
    }

    /// Returns `(C_vi, C_ir, ϱ_vi, ϱ_ir)` with weights shaped `[B, C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, lv: LevelFeatures<'t>) -> (Var<'t>, Var<'t>, Var<'t>, Var<'t>) {
        let c = self.channels;
        let b = lv.phi_vi.shape()[0];
        let pool = |x: Var<'t>| (x.max_axes(&[2, 3]).reshape(&[b, c]), x.mean_axes(&[2, 3]).reshape(&[b, c]));
        let (max_vi, avg_vi) = pool(lv.phi_vi);
        let (max_ir, avg_ir) = pool(lv.phi_ir);
        let desc = ctx.tape.concat(&[max_vi, avg_vi, max_ir, avg_ir], 1);
        let weights = self.fc2.forward(ctx, self.fc1.forward(ctx, desc).relu()).sigmoid();
        let cw_vi = weights.narrow(1, 0, c);
        let cw_ir = weights.narrow(1, c, c);
        let rho_vi = lv.phi_vi.mul(cw_vi.reshape(&[b, c, 1, 1]));
        let rho_ir = lv.phi_ir.mul(cw_ir.reshape(&[b, c, 1, 1]));
        (cw_vi, cw_ir, rho_vi, rho_ir)
    }
}

/// Independent query/key/value projections per modality.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q_vi: Linear,
    pub k_vi: Linear,
    pub v_vi: Linear,
    pub q_ir: Linear,
    pub k_ir: Linear,
    pub v_ir: Linear,
    downsample: usize,
}

/// Projected tokens kept for inspecting the attention maps.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace<'t> {
    pub q_vi: Var<'t>,
    pub k_vi: Var<'t>,
    pub q_ir: Var<'t>,
    pub k_ir: Var<'t>,
}

impl AttentionTrace<'_> {
    /// `softmax(Q_vi K_irᵀ)`, `[B, N, M]`.
    pub fn vi_to_ir(&self) -> Tensor {
        attention_map(&self.q_vi.value(), &self.k_ir.value())
    }

    /// `softmax(Q_ir K_viᵀ)`, `[B, N, M]`.
    pub fn ir_to_vi(&self) -> Tensor {
        attention_map(&self.q_ir.value(), &self.k_vi.value())
    }
}

pub fn attention_map(q: &Tensor, k: &Tensor) -> Tensor {
    tensor::softmax_last(&tensor::batched_matmul(q, k, false, true))
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dim: usize, downsample: usize) -> Self {
        let mut lin = |n: &str, out: usize| Linear::new(store, &format!("{name}.{n}"), channels, out, false);
        Self {
            q_vi: lin("q_vi", dim),
            k_vi: lin("k_vi", dim),
            v_vi: lin("v_vi", channels),
            q_ir: lin("q_ir", dim),
            k_ir: lin("k_ir", dim),
            v_ir: lin("v_ir", channels),
            downsample,
        }
    }

    /// Returns `(φ_cross_vi, φ_cross_ir, trace)`.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, rho_vi: Var<'t>, rho_ir: Var<'t>) -> (Var<'t>, Var<'t>, AttentionTrace<'t>) {
        let (_, _, h, w) = rho_vi.value().dims4();
        let (tok_vi, tok_ir) = (flat_tokens(rho_vi), flat_tokens(rho_ir));
        let (kv_vi, kv_ir) = if self.downsample > 1 {
            (
                flat_tokens(rho_vi.avg_pool(self.downsample)),
                flat_tokens(rho_ir.avg_pool(self.downsample)),
            )
        } else {
            (tok_vi, tok_ir)
        };
        let trace = AttentionTrace {
            q_vi: self.q_vi.forward(ctx, tok_vi),
            k_vi: self.k_vi.forward(ctx, kv_vi),
            q_ir: self.q_ir.forward(ctx, tok_ir),
            k_ir: self.k_ir.forward(ctx, kv_ir),
        };
        let v_vi = self.v_vi.forward(ctx, kv_vi);
        let v_ir = self.v_ir.forward(ctx, kv_ir);
        let cross_ir = trace.q_vi.attention(trace.k_ir, v_ir);
        let cross_vi = trace.q_ir.attention(trace.k_vi, v_vi);
        (unflatten_tokens(cross_vi, h, w), unflatten_tokens(cross_ir, h, w), trace)
    }
}

/// `υ = φ ⊙ softmax_HW(conv1x1(relu(conv1x1(φ))))`.
#[derive(Clone, Debug)]
pub struct SpatialEnhancement {
    pub reduce: Conv2d,
    pub score: Conv2d,
}

impl SpatialEnhancement {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mid = (channels / 2).max(1);
        let g = ConvGeom::pointwise();
        Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), channels, mid, 1, g, true),
            score: Conv2d::new(store, &format!("{name}.score"), mid, 1, 1, g, true),
        }
    }

    /// Returns `(υ, map)` with `map: [B,1,H,W]` summing to 1 per item.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, phi: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (b, _, h, w) = phi.value().dims4();
        let s = self.score.forward(ctx, self.reduce.forward(ctx, phi).relu());
        let map = s.reshape(&[b, 1, h * w]).softmax_last().reshape(&[b, 1, h, w]);
        (phi.mul(map), map)
    }
}

/// Every intermediate of one fusion block; disabled parts are `None`.
#[derive(Clone, Copy, Debug)]
pub struct FifbTrace<'t> {
    pub channel_weights: Option<(Var<'t>, Var<'t>)>,
    pub rho: (Var<'t>, Var<'t>),
    pub attention: Option<AttentionTrace<'t>>,
    pub cross: (Var<'t>, Var<'t>),
    pub spatial_maps: Option<(Var<'t>, Var<'t>)>,
    pub upsilon: (Var<'t>, Var<'t>),
    pub upsilon_f: Var<'t>,
    pub phi_f: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Fifb {
    pub channel: Option<ChannelAttention>,
    pub cross: Option<CrossAttention>,
    pub spatial_vi: Option<SpatialEnhancement>,
    pub spatial_ir: Option<SpatialEnhancement>,
    pub embed_vi: Conv2d,
    pub embed_ir: Conv2d,
    pub bn_vi: BatchNorm2d,
    pub bn_ir: BatchNorm2d,
    pub expand: Conv2d,
    pub depthwise: Conv2d,
    pub project: Conv2d,
    pub shortcut: Conv2d,
    pub bn_out: BatchNorm2d,
}

impl Fifb {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig, level: usize) -> Self {
        let c = cfg.channels(level);
        let g = ConvGeom::pointwise();
        let n = |s: &str| format!("{name}.{s}");
        Self {
            channel: cfg
                .channel_attention
                .then(|| ChannelAttention::new(store, &n("channel"), c, cfg.mlp_hidden.unwrap_or((c / 2).max(1)))),
            cross: cfg.cross_attention.then(|| {
                CrossAttention::new(store, &n("cross"), c, cfg.attention_dim.unwrap_or(c), cfg.token_downsample(level))
            }),
            spatial_vi: cfg.spatial_enhancement.then(|| SpatialEnhancement::new(store, &n("spatial_vi"), c)),
            spatial_ir: cfg.spatial_enhancement.then(|| SpatialEnhancement::new(store, &n("spatial_ir"), c)),
            embed_vi: Conv2d::new(store, &n("embed_vi"), 2 * c, c, 1, g, false),
            embed_ir: Conv2d::new(store, &n("embed_ir"), 2 * c, c, 1, g, false),
            bn_vi: BatchNorm2d::new(store, &n("bn_vi"), c),
            bn_ir: BatchNorm2d::new(store, &n("bn_ir"), c),
            expand: Conv2d::new(store, &n("expand"), 2 * c, c, 1, g, false),
            depthwise: Conv2d::new(
                store,
                &n("depthwise"),
                c,
                c,
                3,
                ConvGeom {
                    stride: 1,
                    padding: 1,
                    groups: c,
                },
                false,
            ),
            project: Conv2d::new(store, &n("project"), c, c, 1, g, false),
            shortcut: Conv2d::new(store, &n("shortcut"), 2 * c, c, 1, g, false),
            bn_out: BatchNorm2d::new(store, &n("bn_out"), c),
        }
    }

    /// Residual streams concatenated into `υ_f`, then the depthwise mixer.
    pub fn combine<'t>(&self, ctx: &Ctx<'_, 't>, lv: LevelFeatures<'t>, cross: (Var<'t>, Var<'t>), upsilon: (Var<'t>, Var<'t>)) -> (Var<'t>, Var<'t>) {
        let tape = ctx.tape;
        let stream_vi = self
            .bn_vi
            .forward(ctx, lv.phi_vi.add(self.embed_vi.forward(ctx, tape.concat(&[cross.0, upsilon.0], 1))));
        let stream_ir = self
            .bn_ir
            .forward(ctx, lv.phi_ir.add(self.embed_ir.forward(ctx, tape.concat(&[cross.1, upsilon.1], 1))));
        let upsilon_f = tape.concat(&[stream_vi, stream_ir], 1);
        let branch = self
            .project
            .forward(ctx, self.depthwise.forward(ctx, self.expand.forward(ctx, upsilon_f)).relu());
        let phi_f = self.bn_out.forward(ctx, branch.add(self.shortcut.forward(ctx, upsilon_f)));
        (upsilon_f, phi_f)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, lv: LevelFeatures<'t>) -> FifbTrace<'t> {
        let (channel_weights, rho) = match &self.channel {
            Some(ca) => {
                let (cv, ci, rv, ri) = ca.forward(ctx, lv);
                (Some((cv, ci)), (rv, ri))
            }
            None => (None, (lv.phi_vi, lv.phi_ir)),
        };
        let (attention, cross) = match &self.cross {
            Some(xa) => {
                let (cv, ci, trace) = xa.forward(ctx, rho.0, rho.1);
                (Some(trace), (cv, ci))
            }
            None => (None, rho),
        };
        let (spatial_maps, upsilon) = match (&self.spatial_vi, &self.spatial_ir) {
            (Some(sv), Some(si)) => {
                let (uv, mv) = sv.forward(ctx, lv.phi_vi);
                let (ui, mi) = si.forward(ctx, lv.phi_ir);
                (Some((mv, mi)), (uv, ui))
            }
            _ => (None, (lv.phi_vi, lv.phi_ir)),
        };
        let (upsilon_f, phi_f) = self.combine(ctx, lv, cross, upsilon);
        FifbTrace {
            channel_weights,
            rho,
            attention,
            cross,
            spatial_maps,
            upsilon,
            upsilon_f,
            phi_f,
        }
    }
}

/// Four conv blocks of two conv units each; the level feature is taken
/// before the block's max pool.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<(ConvUnit, ConvUnit)>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig) -> Self {
        let mut cin = 1;
        let blocks = (1..=LEVELS)
            .map(|l| {
                let c = cfg.channels(l);
                let b = (
                    ConvUnit::new(store, &format!("{name}.block{l}.unit1"), cin, c),
                    ConvUnit::new(store, &format!("{name}.block{l}.unit2"), c, c),
                );
                cin = c;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: Var<'t>) -> Vec<Var<'t>> {
        let mut h = x;
        let mut levels = Vec::with_capacity(LEVELS);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2x2();
            }
            h = b.forward(ctx, a.forward(ctx, h));
            levels.push(h);
        }
        levels
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<(ConvUnit, ConvUnit)>,
    head_unit: ConvUnit,
    head: Conv2d,
    base: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &NetConfig) -> Self {
        let c = cfg.base_channels;
        // (input, output) channels of the three upconv blocks
        let plan = [(8 * c, 4 * c), (8 * c, 2 * c), (4 * c, c)];
        let ups = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                (
                    ConvUnit::new(store, &format!("{name}.up{}.unit1", i + 1), cin, cout),
                    ConvUnit::new(store, &format!("{name}.up{}.unit2", i + 1), cout, cout),
                )
            })
            .collect();
        Self {
            ups,
            head_unit: ConvUnit::new(store, &format!("{name}.head.unit"), 2 * c, c),
            head: Conv2d::new(store, &format!("{name}.head.out"), c, 1, 1, ConvGeom::pointwise(), true),
            base: c,
        }
    }

    /// `fused[l]` must be `[B, base·2^l, H/2^l, W/2^l]` for `l = 0..4`.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, fused: &[Var<'t>]) -> Result<Var<'t>> {
        if fused.len() != LEVELS {
            return Err(Error::ShapeSchedule(format!("expected {LEVELS} fused levels, got {}", fused.len())));
        }
        let s0 = fused[0].shape();
        for (l, f) in fused.iter().enumerate() {
            let expect = [s0[0], self.base << l, s0[2] >> l, s0[3] >> l];
            if f.shape() != expect || (s0[2] >> l) << l != s0[2] || (s0[3] >> l) << l != s0[3] {
                return Err(Error::ShapeSchedule(format!(
                    "level {} has shape {:?}, expected {:?}",
                    l + 1,
                    f.shape(),
                    expect
                )));
            }
        }
        let mut h = fused[LEVELS - 1];
        for (i, (a, b)) in self.ups.iter().enumerate() {
            if i > 0 {
                h = ctx.tape.concat(&[h, fused[LEVELS - 1 - i]], 1);
            }
            h = b.forward(ctx, a.forward(ctx, h)).upsample2x();
        }
        let h = self.head_unit.forward(ctx, ctx.tape.concat(&[h, fused[0]], 1));
        Ok(self.head.forward(ctx, h).sigmoid())
    }
}

/// Parameters and structure of the whole network.
#[derive(Clone, Debug)]
pub struct FusionNet {
    cfg: NetConfig,
    store: ParamStore,
    enc_vi: Encoder,
    enc_ir: Encoder,
    fifbs: Vec<Fifb>,
    decoder: Decoder,
}

impl FusionNet {
    pub fn new(cfg: NetConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(init_seed);
        let enc_vi = Encoder::new(&mut store, "enc_vi", &cfg);
        let enc_ir = Encoder::new(&mut store, "enc_ir", &cfg);
        let fifbs = (1..=LEVELS).map(|l| Fifb::new(&mut store, &format!("fifb{l}"), &cfg, l)).collect();
        let decoder = Decoder::new(&mut store, "dec", &cfg);
        Ok(Self {
            cfg,
            store,
            enc_vi,
            enc_ir,
            fifbs,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fifb(&self, level: usize) -> &Fifb {
        &self.fifbs[level - 1]
    }

    pub fn check_input(&self, vi: (usize, usize), ir: (usize, usize)) -> Result<()> {
        check_dims("fusion input pair", vi, ir)?;
        let (height, width) = vi;
        if height == 0 || width == 0 || height % SIZE_MULTIPLE != 0 || width % SIZE_MULTIPLE != 0 {
            return Err(Error::ShapeNotDivisible {
                height,
                width,
                divisor: SIZE_MULTIPLE,
            });
        }
        Ok(())
    }

    /// Level features of both encoders for `[B,1,H,W]` inputs.
    pub fn encode<'t>(&self, ctx: &Ctx<'_, 't>, vi: Var<'t>, ir: Var<'t>) -> Result<Vec<LevelFeatures<'t>>> {
        let (sv, si) = (vi.shape(), ir.shape());
        if sv.len() != 4 || sv[1] != 1 || sv[0] != si[0] {
            return Err(Error::ShapeSchedule(format!("expected two [B,1,H,W] inputs, got {sv:?} and {si:?}")));
        }
        self.check_input((sv[2], sv[3]), (si[2], si[3]))?;
        let fv = self.enc_vi.forward(ctx, vi);
        let fi = self.enc_ir.forward(ctx, ir);
        Ok(fv
            .into_iter()
            .zip(fi)
            .map(|(phi_vi, phi_ir)| LevelFeatures { phi_vi, phi_ir })
            .collect())
    }

    pub fn decode<'t>(&self, ctx: &Ctx<'_, 't>, fused: &[Var<'t>]) -> Result<Var<'t>> {
        self.decoder.forward(ctx, fused)
    }

    /// Fused `[B,1,H,W]` output plus every block's intermediates.
    pub fn forward_traced<'t>(&self, ctx: &Ctx<'_, 't>, vi: Var<'t>, ir: Var<'t>) -> Result<(Var<'t>, Vec<FifbTrace<'t>>)> {
        let levels = self.encode(ctx, vi, ir)?;
        let traces: Vec<FifbTrace<'t>> = self.fifbs.iter().zip(levels).map(|(f, lv)| f.forward(ctx, lv)).collect();
        let fused: Vec<Var<'t>> = traces.iter().map(|t| t.phi_f).collect();
        Ok((self.decode(ctx, &fused)?, traces))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, vi: Var<'t>, ir: Var<'t>) -> Result<Var<'t>> {
        self.forward_traced(ctx, vi, ir).map(|(f, _)| f)
    }

    /// Evaluation-mode fusion of batched `[B,1,H,W]` tensors, no gradients.
    pub fn fuse_tensors(&self, vi: &Tensor, ir: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.store.bind_frozen(&tape);
        let ctx = Ctx::new(&tape, &params, &self.store, Mode::Eval);
        let out = self.forward(&ctx, tape.constant(vi.clone()), tape.constant(ir.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn fuse(&self, vi: &Image, ir: &Image) -> Result<Image> {
        self.check_input(vi.dims(), ir.dims())?;
        Ok(Image::from_tensor(&self.fuse_tensors(&vi.to_tensor(), &ir.to_tensor())?))
    }
}
