//! The contextual space: feature maps compared as sets of feature points.
//!
//! For feature points `Γ` (anchor) and `Ψ` (target), centred on `μ_Ψ`:
//!
//! ```text
//! S_ij = 1 - cos(Γ_i - μ_Ψ, Ψ_j - μ_Ψ)
//! s_i  = max_k softmax_k(1 - S_i·)
//! s    = mean_i s_i
//! CS   = -ln(s + λ·‖φ1 - φ2‖₂ + ε)
//! ```
//!
//! Distances sum CS over the deep backbone levels, the background distance
//! is the Euclidean norm at level 1, and the contrastive loss is a sum of
//! positive/negative distance ratios over the four semantic filters.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, LEVELS};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{Filter, MaskPartition};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

thread_local! {
    static CS_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of (batched) CS evaluations on this thread so far.
pub fn cs_call_count() -> usize {
    CS_CALLS.with(Cell::get)
}

/// Feature points of one map: `n` rows of dimension `dim`, row-major over
/// spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub dim: usize,
    pub points: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.len(), self.dim], self.points.clone())
    }
}

/// One `dim`-vector per spatial location of a `[C,H,W]` or `[1,C,H,W]` map.
pub fn to_point_set(feature: &Tensor) -> PointSet {
    let s = feature.shape();
    let (c, h, w) = match *s {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => panic!("to_point_set expects a single [C,H,W] map, got {s:?}"),
    };
    let d = feature.data();
    let mut points = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        points.extend((0..c).map(|ch| d[ch * h * w + p]));
    }
    PointSet { dim: c, points }
}

/// `[B,C,H,W] -> [B, H·W, C]`.
pub fn points_var(x: Var<'_>) -> Var<'_> {
    let (b, c, h, w) = x.value().dims4();
    x.reshape(&[b, c, h * w]).permute(&[0, 2, 1])
}

/// `S = 1 - cos` between every pair of centred points, `[B,N,M]`.
pub fn similarity_var<'t>(gamma: Var<'t>, psi: Var<'t>, eps: f64) -> Var<'t> {
    let mu = psi.mean_axes(&[1]);
    let gc = gamma.sub(mu);
    let pc = psi.sub(mu);
    let ng = gc.square().sum_axes(&[2]).sqrt();
    let np = pc.square().sum_axes(&[2]).sqrt();
    let dots = gc.matmul(pc.permute(&[0, 2, 1]));
    let norms = ng.matmul(np.permute(&[0, 2, 1])).add_scalar(eps);
    dots.div(norms).rsub_scalar(1.0)
}

/// Per-item `s(φ1, φ2)` of `[B,C,H,W]` maps, `[B]`.
///
/// A fused tape op: only the two inputs are retained and the `N x M`
/// matrices are rebuilt in the backward pass, so full-resolution levels fit
/// in memory.
pub fn feature_similarity_var<'t>(phi1: Var<'t>, phi2: Var<'t>, eps: f64) -> Var<'t> {
    let (x, y) = (phi1.value(), phi2.value());
    let (b, c, h1, w1) = x.dims4();
    let (b2, c2, h2, w2) = y.dims4();
    assert!(b == b2 && c == c2, "feature maps {:?} and {:?} differ in batch or channels", x.shape(), y.shape());
    let dims = PairDims { c, n: h1 * w1, m: h2 * w2 };
    let out: Vec<f64> = (0..b).map(|i| PairGeometry::new(&x, &y, i, dims, eps).similarity().0).collect();
    phi1.tape().record(Tensor::new(vec![b], out), &[phi1, phi2], move |g| {
        let mut gx = vec![0.0; x.numel()];
        let mut gy = vec![0.0; y.numel()];
        for i in 0..b {
            let (ga, gb) = PairGeometry::new(&x, &y, i, dims, eps).backward(g.data()[i]);
            scatter_points(&ga, dims.c, dims.n, &mut gx[i * c * dims.n..][..c * dims.n]);
            scatter_points(&gb, dims.c, dims.m, &mut gy[i * c * dims.m..][..c * dims.m]);
        }
        vec![Some(Tensor::new(x.shape().to_vec(), gx)), Some(Tensor::new(y.shape().to_vec(), gy))]
    })
}

#[derive(Clone, Copy)]
struct PairDims {
    c: usize,
    n: usize,
    m: usize,
}

/// Centred points of one batch item and their cosine matrix.
struct PairGeometry {
    dims: PairDims,
    eps: f64,
    /// `Γ_i - μ_Ψ`, `n x c`.
    a: Vec<f64>,
    /// `Ψ_j - μ_Ψ`, `m x c`.
    b: Vec<f64>,
    na: Vec<f64>,
    nb: Vec<f64>,
    /// `a_i · b_j`, `n x m`.
    dots: Vec<f64>,
}

/// `[C, HW]` channel-major plane block to `HW x C` points.
fn gather_points(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    out
}

fn scatter_points(points: &[f64], c: usize, hw: usize, out: &mut [f64]) {
    for ch in 0..c {
        for p in 0..hw {
            out[ch * hw + p] = points[p * c + ch];
        }
    }
}

impl PairGeometry {
    fn new(x: &Tensor, y: &Tensor, item: usize, dims: PairDims, eps: f64) -> Self {
        let PairDims { c, n, m } = dims;
        let mut a = gather_points(&x.data()[item * c * n..][..c * n], c, n);
        let mut b = gather_points(&y.data()[item * c * m..][..c * m], c, m);
        let mu: Vec<f64> = (0..c).map(|ch| b.iter().skip(ch).step_by(c).sum::<f64>() / m as f64).collect();
        for row in a.chunks_mut(c).chain(b.chunks_mut(c)) {
            row.iter_mut().zip(&mu).for_each(|(v, u)| *v -= u);
        }
        let norms = |p: &[f64]| p.chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect::<Vec<f64>>();
        let (na, nb) = (norms(&a), norms(&b));
        let mut dots = vec![0.0; n * m];
        crate::tensor::gemm(n, c, m, &a, false, &b, true, &mut dots, 0.0);
        Self { dims, eps, a, b, na, nb, dots }
    }

    fn denom(&self, i: usize, j: usize) -> f64 {
        self.na[i] * self.nb[j] + self.eps
    }

    /// `s` plus, per row, the arg-max column and the row's softmax sum
    /// relative to its maximum.
    fn similarity(&self) -> (f64, Vec<(usize, f64)>) {
        let m = self.dims.m;
        let mut total = 0.0;
        let mut rows = Vec::with_capacity(self.dims.n);
        for (i, d) in self.dots.chunks(m).enumerate() {
            let logit = |j: usize| d[j] / self.denom(i, j);
            let (best, top) = (0..m).fold((0, f64::NEG_INFINITY), |(bj, bv), j| if logit(j) > bv { (j, logit(j)) } else { (bj, bv) });
            let z: f64 = (0..m).map(|j| (logit(j) - top).exp()).sum();
            total += 1.0 / z;
            rows.push((best, z));
        }
        (total / self.dims.n as f64, rows)
    }

    /// Gradients of `upstream · s` w.r.t. the raw points of both maps.
    fn backward(&self, upstream: f64) -> (Vec<f64>, Vec<f64>) {
        let PairDims { c, n, m } = self.dims;
        let (_, rows) = self.similarity();
        // W = G / D and the norm-path weights V = G · d / D², where
        // G_ij = ∂s/∂logit_ij = s_i (δ_j,j* - p_ij) / N
        let mut w = vec![0.0; n * m];
        let mut ra = vec![0.0; n];
        let mut rb = vec![0.0; m];
        for (i, &(best, z)) in rows.iter().enumerate() {
            let d = &self.dots[i * m..][..m];
            let si = 1.0 / z;
            let top = d[best] / self.denom(i, best);
            for j in 0..m {
                let den = self.denom(i, j);
                let p = (d[j] / den - top).exp() / z;
                let gij = upstream * si * ((j == best) as u8 as f64 - p) / n as f64;
                w[i * m + j] = gij / den;
                let v = gij * d[j] / (den * den);
                ra[i] += v * self.nb[j];
                rb[j] += v * self.na[i];
            }
        }
        let mut ga = vec![0.0; n * c];
        let mut gb = vec![0.0; m * c];
        crate::tensor::gemm(n, m, c, &w, false, &self.b, false, &mut ga, 0.0);
        crate::tensor::gemm(m, n, c, &w, true, &self.a, false, &mut gb, 0.0);
        // ∂‖x‖/∂x = x/‖x‖, taken as 0 at the origin
        for (rows, pts, norms, r) in [(&mut ga, &self.a, &self.na, &ra), (&mut gb, &self.b, &self.nb, &rb)] {
            for (k, (gr, pr)) in rows.chunks_mut(c).zip(pts.chunks(c)).enumerate() {
                if norms[k] > 0.0 {
                    let f = r[k] / norms[k];
                    gr.iter_mut().zip(pr).for_each(|(g, p)| *g -= f * p);
                }
            }
        }
        // μ_Ψ enters every centred point with weight -1/M
        let mut shift = vec![0.0; c];
        for row in ga.chunks(c).chain(gb.chunks(c)) {
            shift.iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        for row in gb.chunks_mut(c) {
            row.iter_mut().zip(&shift).for_each(|(g, s)| *g -= s / m as f64);
        }
        (ga, gb)
    }
}

/// Per-item `‖φ1 - φ2‖₂` over all channels and positions, `[B]`.
pub fn euclidean_var<'t>(phi1: Var<'t>, phi2: Var<'t>) -> Var<'t> {
    let b = phi1.shape()[0];
    phi1.sub(phi2).square().sum_axes(&[1, 2, 3]).reshape(&[b]).sqrt()
}

/// Per-item `CS = -ln(max(s + λe + ε, ε))`, `[B]`.
pub fn cs_var<'t>(phi1: Var<'t>, phi2: Var<'t>, lambda_cs: f64, eps: f64) -> Var<'t> {
    CS_CALLS.with(|c| c.set(c.get() + 1));
    let mut arg = feature_similarity_var(phi1, phi2, eps);
    if lambda_cs != 0.0 {
        arg = arg.add(euclidean_var(phi1, phi2).scale(lambda_cs));
    }
    arg.add_scalar(eps).clamp_min(eps).ln().neg()
}

fn single(t: &Tensor) -> Tensor {
    match t.rank() {
        3 => t.clone().reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]]),
        4 => t.clone(),
        _ => panic!("expected [C,H,W] or [1,C,H,W], got {:?}", t.shape()),
    }
}

/// `N x M` matrix of `S_ij`.
pub fn similarity_matrix(gamma: &PointSet, psi: &PointSet, eps: f64) -> Tensor {
    assert_eq!(gamma.dim, psi.dim, "point dimensions differ");
    let tape = Tape::new();
    let s = similarity_var(tape.constant(gamma.to_tensor()), tape.constant(psi.to_tensor()), eps);
    (*s.value()).clone().reshape(&[gamma.len(), psi.len()])
}

/// `s_i = max_k exp(1 - S_ik) / Σ_j exp(1 - S_ij)`, stabilised by the row max.
pub fn point_similarity(row: &[f64]) -> f64 {
    let best = row.iter().map(|s| 1.0 - s).fold(f64::NEG_INFINITY, f64::max);
    1.0 / row.iter().map(|s| (1.0 - s - best).exp()).sum::<f64>()
}

pub fn contextual_feature_similarity(phi1: &Tensor, phi2: &Tensor, eps: f64) -> f64 {
    let tape = Tape::new();
    feature_similarity_var(tape.constant(single(phi1)), tape.constant(single(phi2)), eps).item()
}

pub fn contextual_cs(phi1: &Tensor, phi2: &Tensor, lambda_cs: f64, eps: f64) -> f64 {
    let tape = Tape::new();
    cs_var(tape.constant(single(phi1)), tape.constant(single(phi2)), lambda_cs, eps).item()
}

/// How deep-layer distances compare features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Contextual,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub lambda_cs: f64,
    /// 1-based backbone levels summed by `D`.
    pub deep_layers: Vec<usize>,
    pub distance: DistanceKind,
    pub epsilon: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            omega1: 0.5,
            omega2: 0.5,
            lambda_cs: 0.5,
            deep_layers: vec![4, 5],
            distance: DistanceKind::Contextual,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if (self.omega1 + self.omega2 - 1.0).abs() > 1e-9 || self.omega1 < 0.0 || self.omega2 < 0.0 {
            return fail(format!("omega1 + omega2 must be 1, got {} + {}", self.omega1, self.omega2));
        }
        if !(self.lambda_cs >= 0.0) {
            return fail(format!("lambda_cs must be >= 0, got {}", self.lambda_cs));
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.deep_layers.is_empty() || self.deep_layers.iter().any(|&l| l == 0 || l > LEVELS) {
            return fail(format!("deep_layers must be non-empty within 1..={LEVELS}, got {:?}", self.deep_layers));
        }
        Ok(())
    }

    /// Deepest backbone level any distance needs.
    pub fn max_level(&self) -> usize {
        self.deep_layers.iter().copied().max().unwrap_or(1)
    }
}

/// Per-item `D = Σ_l CS(a_l, b_l)` (or Euclidean), over pyramids whose
/// index 0 is level 1.
pub fn distance_d<'t>(fa: &[Var<'t>], fb: &[Var<'t>], cfg: &ContrastiveConfig) -> Var<'t> {
    cfg.deep_layers
        .iter()
        .map(|&l| match cfg.distance {
            DistanceKind::Contextual => cs_var(fa[l - 1], fb[l - 1], cfg.lambda_cs, cfg.epsilon),
            DistanceKind::Euclidean => euclidean_var(fa[l - 1], fb[l - 1]),
        })
        .reduce(|a, b| a.add(b))
        .expect("at least one layer")
}

/// Per-item `D_bg = ‖vgg_1(a) - vgg_1(b)‖₂`.
pub fn distance_dbg<'t>(fa: &[Var<'t>], fb: &[Var<'t>]) -> Var<'t> {
    euclidean_var(fa[0], fb[0])
}

fn image_pair_features<'t>(tape: &'t Tape, a: &Image, b: &Image, backbone: &Backbone, levels: usize) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
    crate::mask::check_dims("distance", a.dims(), b.dims())?;
    Ok((
        backbone.extract(tape.constant(a.to_tensor()), levels)?,
        backbone.extract(tape.constant(b.to_tensor()), levels)?,
    ))
}

pub fn distance_d_images(a: &Image, b: &Image, backbone: &Backbone, cfg: &ContrastiveConfig) -> Result<f64> {
    let tape = Tape::new();
    let (fa, fb) = image_pair_features(&tape, a, b, backbone, cfg.max_level())?;
    Ok(distance_d(&fa, &fb, cfg).item())
}

pub fn distance_dbg_images(a: &Image, b: &Image, backbone: &Backbone) -> Result<f64> {
    let tape = Tape::new();
    let (fa, fb) = image_pair_features(&tape, a, b, backbone, 1)?;
    Ok(distance_dbg(&fa, &fb).item())
}

/// One positive/negatives comparison against a filter's anchor.
#[derive(Clone, Debug)]
pub struct Orientation {
    pub weight: f64,
    /// `[n,1,H,W]` masked source of group 1.
    pub positive: Tensor,
    /// `b` tensors `[n,1,H,W]`, one per group.
    pub negatives: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct FilterSamples<'t> {
    pub filter: Filter,
    /// `f ⊙ mask` over group 1, `[n,1,H,W]`.
    pub anchor: Var<'t>,
    /// Group-1 items whose anchor mask is non-empty.
    pub active: Vec<bool>,
    pub orientations: Vec<Orientation>,
}

impl FilterSamples<'_> {
    pub fn is_empty(&self) -> bool {
        !self.active.iter().any(|&a| a)
    }
}

/// Anchors, positives and negatives for every filter of one batch.
#[derive(Clone, Debug)]
pub struct ContrastiveSampleSet<'t> {
    pub group_n: usize,
    pub groups: usize,
    pub filters: Vec<FilterSamples<'t>>,
}

impl<'t> ContrastiveSampleSet<'t> {
    pub fn get(&self, filter: Filter) -> &FilterSamples<'t> {
        self.filters.iter().find(|f| f.filter == filter).expect("all filters present")
    }
}

/// Stack the masks of `items` for one filter as `[len,1,H,W]`.
fn stack_masks(partitions: &[MaskPartition], items: std::ops::Range<usize>, filter: Filter) -> Tensor {
    let planes: Vec<Tensor> = items.map(|i| partitions[i].get(filter).to_tensor()).collect();
    let refs: Vec<&Tensor> = planes.iter().collect();
    crate::tensor::concat(&refs, 0)
}

/// Build the per-filter samples. `fused`, `vi`, `ir` are `[B,1,H,W]`;
/// `partitions[k]` belongs to batch item `k`. Group `j` is items
/// `j·n .. (j+1)·n`; group 1 supplies anchors and positives, every group
/// supplies negatives `source_j ⊙ mask_j`.
pub fn build_sample_set<'t>(
    fused: Var<'t>,
    vi: &Tensor,
    ir: &Tensor,
    partitions: &[MaskPartition],
    group_n: usize,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveSampleSet<'t>> {
    let (batch, _, h, w) = vi.dims4();
    if group_n == 0 || batch % group_n != 0 {
        return Err(Error::BatchNotDivisible { batch, group: group_n });
    }
    if partitions.len() != batch || fused.shape() != [batch, 1, h, w] || ir.shape() != vi.shape() {
        return Err(Error::DimensionMismatch {
            context: "build_sample_set",
            expected: (batch, h * w),
            got: (partitions.len(), fused.shape().iter().skip(2).product()),
        });
    }
    for p in partitions {
        crate::mask::check_dims("build_sample_set mask", (h, w), p.dims())?;
    }
    let n = group_n;
    let groups = batch / n;
    let tape = fused.tape();
    let group = |t: &Tensor, j: usize| crate::tensor::narrow(t, 0, j * n, n);
    let masked = |src: &Tensor, j: usize, filter: Filter| {
        group(src, j).zip_map(&stack_masks(partitions, j * n..(j + 1) * n, filter), |a, m| a * m)
    };
    let anchor_src = fused.narrow(0, 0, n);
    let orient = |weight: f64, pos: &Tensor, neg: &Tensor, filter: Filter| Orientation {
        weight,
        positive: masked(pos, 0, filter),
        negatives: (0..groups).map(|j| masked(neg, j, filter)).collect(),
    };
    let filters = Filter::ALL
        .iter()
        .map(|&filter| {
            let mask = stack_masks(partitions, 0..n, filter);
            let active = (0..n).map(|k| !partitions[k].get(filter).is_empty()).collect();
            let orientations = match filter {
                Filter::UniqueVi => vec![orient(1.0, vi, ir, filter)],
                Filter::UniqueIr => vec![orient(1.0, ir, vi, filter)],
                Filter::Shared => vec![orient(cfg.omega1, vi, ir, filter), orient(cfg.omega2, ir, vi, filter)],
                Filter::Background => vec![orient(1.0, vi, ir, filter)],
            };
            FilterSamples {
                filter,
                anchor: anchor_src.mul(tape.constant(mask)),
                active,
                orientations,
            }
        })
        .collect();
    Ok(ContrastiveSampleSet { group_n: n, groups, filters })
}

/// Contrastive components; each `Var` is a scalar on the caller's tape.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms<'t> {
    pub unique: Var<'t>,
    pub share: Var<'t>,
    pub bg: Var<'t>,
    pub total: Var<'t>,
}

/// Mean of a per-item `[n]` distance over the active items.
fn active_mean<'t>(d: Var<'t>, active: &[bool]) -> Var<'t> {
    let k = active.iter().filter(|&&a| a).count() as f64;
    let w = Tensor::new(vec![active.len()], active.iter().map(|&a| if a { 1.0 / k } else { 0.0 }).collect());
    d.mul(d.tape().constant(w)).sum()
}

/// `L_con = L_unique + L_share + L_bg`, each a ratio
/// `D(anchor, positive) / (Σ_j D(anchor, negative_j) + ε)`; filters whose
/// group-1 masks are all empty contribute zero.
pub fn contrastive_loss<'t>(samples: &ContrastiveSampleSet<'t>, cfg: &ContrastiveConfig, backbone: &Backbone) -> Result<ContrastiveTerms<'t>> {
    let tape = samples.filters[0].anchor.tape();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let mut parts = [zero(), zero(), zero()];
    for fs in &samples.filters {
        if fs.is_empty() {
            continue;
        }
        let bg = fs.filter == Filter::Background;
        let levels = if bg { 1 } else { cfg.max_level() };
        let fa = backbone.extract(fs.anchor, levels)?;
        let dist = |t: &Tensor| -> Result<Var<'t>> {
            let fb = backbone.extract(tape.constant(t.clone()), levels)?;
            let d = if bg { distance_dbg(&fa, &fb) } else { distance_d(&fa, &fb, cfg) };
            Ok(active_mean(d, &fs.active))
        };
        for o in &fs.orientations {
            let pos = dist(&o.positive)?;
            let mut neg = dist(&o.negatives[0])?;
            for t in &o.negatives[1..] {
                neg = neg.add(dist(t)?);
            }
            let ratio = pos.div(neg.add_scalar(cfg.epsilon)).scale(o.weight);
            let slot = match fs.filter {
                Filter::UniqueVi | Filter::UniqueIr => 0,
                Filter::Shared => 1,
                Filter::Background => 2,
            };
            parts[slot] = parts[slot].add(ratio);
        }
    }
    let [unique, share, bg] = parts;
    Ok(ContrastiveTerms {
        unique,
        share,
        bg,
        total: unique.add(share).add(bg),
    })
}
