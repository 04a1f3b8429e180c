//! Pixel-level objectives on `[B,1,H,W]` luminance batches. Every loss is
//! the mean of its per-item value over the batch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::Backbone;
use crate::contextual::{contrastive_loss, ContrastiveConfig, ContrastiveSampleSet};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskPartition};
use crate::tensor::{concat, ConvGeom, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_int: f64,
    pub lambda_tex: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_int: 10.0,
            lambda_tex: 1.0,
            lambda_con: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_int", self.lambda_int), ("lambda_tex", self.lambda_tex), ("lambda_con", self.lambda_con)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which source the infrared-unique term of the mask ablation loss compares
/// against. `Visible` is the formula exactly as printed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationIrTarget {
    #[default]
    Infrared,
    Visible,
}

/// Every component of one evaluation of the objective. Absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ssim: f64,
    pub int: f64,
    pub texture: f64,
    pub pixel: f64,
    pub unique: f64,
    pub share: f64,
    pub bg: f64,
    pub con: f64,
    pub abl: f64,
    pub total: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [self.ssim, self.int, self.texture, self.pixel, self.unique, self.share, self.bg, self.con, self.abl, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_triple(f: &[usize], vi: &Tensor, ir: &Tensor, min: usize) -> Result<()> {
    let (b, c, h, w) = vi.dims4();
    if c != 1 || f != vi.shape() || ir.shape() != vi.shape() {
        return Err(Error::DimensionMismatch {
            context: "pixel loss",
            expected: (b, h * w),
            got: (f.first().copied().unwrap_or(0), f.iter().skip(2).product()),
        });
    }
    if h < min || w < min {
        return Err(Error::ImageTooSmall { min, height: h, width: w });
    }
    Ok(())
}

/// Normalised 11x11 Gaussian, `[1,1,11,11]`.
pub fn gaussian_window() -> Tensor {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let z: f64 = g.iter().sum();
    Tensor::from_fn(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], |k| g[k / SSIM_WINDOW] * g[k % SSIM_WINDOW] / (z * z))
}

/// Per-item mean SSIM over all valid window positions, `[B]`.
fn ssim_items<'t>(x: Var<'t>, y: Var<'t>, window: &Arc<Tensor>) -> Var<'t> {
    let b = x.shape()[0];
    let geom = ConvGeom { stride: 1, padding: 0, groups: 1 };
    let blur = |v: Var<'t>| v.conv2d_fixed(window, None, geom);
    let (mx, my) = (blur(x), blur(y));
    let (mx2, my2, mxy) = (mx.square(), my.square(), mx.mul(my));
    let sx = blur(x.square()).sub(mx2);
    let sy = blur(y.square()).sub(my2);
    let sxy = blur(x.mul(y)).sub(mxy);
    let num = mxy.scale(2.0).add_scalar(SSIM_C1).mul(sxy.scale(2.0).add_scalar(SSIM_C2));
    let den = mx2.add(my2).add_scalar(SSIM_C1).mul(sx.add(sy).add_scalar(SSIM_C2));
    num.div(den).mean_axes(&[1, 2, 3]).reshape(&[b])
}

/// Mean SSIM of each batch item.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    check_triple(x.shape(), y, y, SSIM_WINDOW)?;
    let tape = crate::autograd::Tape::new();
    let s = ssim_items(tape.constant(x.clone()), tape.constant(y.clone()), &Arc::new(gaussian_window()));
    Ok(s.value().data().to_vec())
}

/// `2 - SSIM(f, vi) - SSIM(f, ir)`.
pub fn ssim_loss<'t>(f: Var<'t>, vi: &Tensor, ir: &Tensor) -> Result<Var<'t>> {
    check_triple(&f.shape(), vi, ir, SSIM_WINDOW)?;
    let tape = f.tape();
    let w = Arc::new(gaussian_window());
    let a = ssim_items(f, tape.constant(vi.clone()), &w);
    let b = ssim_items(f, tape.constant(ir.clone()), &w);
    Ok(a.add(b).rsub_scalar(2.0).mean())
}

/// `M = 1` where the infrared pixel is strictly brighter.
pub fn saliency_mask(vi: &Tensor, ir: &Tensor) -> Result<Tensor> {
    check_triple(vi.shape(), vi, ir, 1)?;
    Ok(ir.zip_map(vi, |i, v| if i > v { 1.0 } else { 0.0 }))
}

/// `(1/HW) Σ [(f - vi)² + M |f - ir|]`.
pub fn intensity_loss<'t>(f: Var<'t>, vi: &Tensor, ir: &Tensor, m: &Tensor) -> Result<Var<'t>> {
    check_triple(&f.shape(), vi, ir, 1)?;
    let tape = f.tape();
    let sq = f.sub(tape.constant(vi.clone())).square();
    let l1 = f.sub(tape.constant(ir.clone())).abs().mul(tape.constant(m.clone()));
    Ok(sq.add(l1).mean())
}

/// `[2,1,3,3]` Sobel pair `(Gx, Gy)`.
pub fn sobel_kernels() -> Tensor {
    Tensor::new(
        vec![2, 1, 3, 3],
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    )
}

fn gradient_magnitude_var<'t>(x: Var<'t>, sobel: &Arc<Tensor>) -> Var<'t> {
    let geom = ConvGeom { stride: 1, padding: 0, groups: 1 };
    x.pad_replicate(1).conv2d_fixed(sobel, None, geom).abs().sum_axes(&[1])
}

/// `|Gx * x| + |Gy * x|` with replicate padding, same shape as `x`.
pub fn gradient_magnitude(x: &Tensor) -> Tensor {
    let tape = crate::autograd::Tape::new();
    (*gradient_magnitude_var(tape.constant(x.clone()), &Arc::new(sobel_kernels())).value()).clone()
}

/// `(1/HW) ‖ |∇f| - max(|∇vi|, |∇ir|) ‖₁`.
pub fn texture_loss<'t>(f: Var<'t>, vi: &Tensor, ir: &Tensor) -> Result<Var<'t>> {
    check_triple(&f.shape(), vi, ir, 3)?;
    let sobel = Arc::new(sobel_kernels());
    let target = gradient_magnitude(vi).zip_map(&gradient_magnitude(ir), f64::max);
    let gf = gradient_magnitude_var(f, &sobel);
    Ok(gf.sub(f.tape().constant(target)).abs().mean())
}

#[derive(Clone, Copy, Debug)]
pub struct PixelTerms<'t> {
    pub ssim: Var<'t>,
    pub int: Var<'t>,
    pub texture: Var<'t>,
    pub pixel: Var<'t>,
}

/// `L_pixel = L_ssim + λ_int L_int + λ_tex L_texture`.
pub fn pixel_loss<'t>(f: Var<'t>, vi: &Tensor, ir: &Tensor, w: &LossWeights) -> Result<PixelTerms<'t>> {
    let ssim = ssim_loss(f, vi, ir)?;
    let int = intensity_loss(f, vi, ir, &saliency_mask(vi, ir)?)?;
    let texture = texture_loss(f, vi, ir)?;
    let pixel = ssim.add(int.scale(w.lambda_int)).add(texture.scale(w.lambda_tex));
    Ok(PixelTerms { ssim, int, texture, pixel })
}

/// `L_total = L_pixel + λ_con L_con`.
pub fn total_loss<'t>(
    f: Var<'t>,
    vi: &Tensor,
    ir: &Tensor,
    samples: &ContrastiveSampleSet<'t>,
    ccfg: &ContrastiveConfig,
    w: &LossWeights,
    backbone: &Backbone,
) -> Result<(Var<'t>, LossReport)> {
    let p = pixel_loss(f, vi, ir, w)?;
    let c = contrastive_loss(samples, ccfg, backbone)?;
    let total = p.pixel.add(c.total.scale(w.lambda_con));
    let report = LossReport {
        ssim: p.ssim.item(),
        int: p.int.item(),
        texture: p.texture.item(),
        pixel: p.pixel.item(),
        unique: c.unique.item(),
        share: c.share.item(),
        bg: c.bg.item(),
        con: c.total.item(),
        abl: 0.0,
        total: total.item(),
    };
    Ok((total, report))
}

fn stack_masks(partitions: &[MaskPartition], pick: impl Fn(&MaskPartition) -> &BinaryMask) -> Tensor {
    let planes: Vec<Tensor> = partitions.iter().map(|p| pick(p).to_tensor()).collect();
    concat(&planes.iter().collect::<Vec<_>>(), 0)
}

/// Mask-gated intensity loss used when the contrastive and intensity terms
/// are ablated: `ω1‖(f - vi)⊙u_vi‖₂ + ω2‖(f - t)⊙u_ir‖₂ + ‖(f - vi)⊙bg‖₂`
/// per item, with `t` chosen by `ir_target`.
pub fn ablation_mask_loss<'t>(
    f: Var<'t>,
    vi: &Tensor,
    ir: &Tensor,
    partitions: &[MaskPartition],
    omega: (f64, f64),
    ir_target: AblationIrTarget,
) -> Result<Var<'t>> {
    check_triple(&f.shape(), vi, ir, 1)?;
    let (b, _, h, w) = vi.dims4();
    if partitions.len() != b {
        return Err(Error::DimensionMismatch {
            context: "ablation masks",
            expected: (b, h * w),
            got: (partitions.len(), h * w),
        });
    }
    for p in partitions {
        crate::mask::check_dims("ablation masks", (h, w), p.dims())?;
    }
    let tape = f.tape();
    let norm = |src: &Tensor, mask: Tensor| {
        f.sub(tape.constant(src.clone()))
            .mul(tape.constant(mask))
            .square()
            .sum_axes(&[1, 2, 3])
            .sqrt()
            .mean()
    };
    let t = match ir_target {
        AblationIrTarget::Infrared => ir,
        AblationIrTarget::Visible => vi,
    };
    let uvi = norm(vi, stack_masks(partitions, |p| &p.unique_vi)).scale(omega.0);
    let uir = norm(t, stack_masks(partitions, |p| &p.unique_ir)).scale(omega.1);
    let bg = norm(vi, stack_masks(partitions, |p| &p.background));
    Ok(uvi.add(uir).add(bg))
}

/// Objective of the mask ablation: `L_ssim + λ_tex L_texture + L_abl`.
pub fn ablation_total_loss<'t>(
    f: Var<'t>,
    vi: &Tensor,
    ir: &Tensor,
    partitions: &[MaskPartition],
    ccfg: &ContrastiveConfig,
    w: &LossWeights,
    ir_target: AblationIrTarget,
) -> Result<(Var<'t>, LossReport)> {
    let ssim = ssim_loss(f, vi, ir)?;
    let texture = texture_loss(f, vi, ir)?;
    let abl = ablation_mask_loss(f, vi, ir, partitions, (ccfg.omega1, ccfg.omega2), ir_target)?;
    let pixel = ssim.add(texture.scale(w.lambda_tex));
    let total = pixel.add(abl);
    let report = LossReport {
        ssim: ssim.item(),
        texture: texture.item(),
        pixel: pixel.item(),
        abl: abl.item(),
        total: total.item(),
        ..Default::default()
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::contextual::build_sample_set;
    use crate::gradcheck::{check_input_gradient, lcg_tensor};
    use crate::mask::decompose_masks;

    fn t(b: usize, n: usize, seed: u64) -> Tensor {
        lcg_tensor(&[b, 1, n, n], seed, 0.0, 1.0)
    }

    fn eval(f: &Tensor, l: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) -> f64 {
        let tape = Tape::new();
        l(tape.constant(f.clone())).unwrap().item()
    }

    /// Sliding-window SSIM on one `h x w` plane by direct summation.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let k = SSIM_WINDOW;
        let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let z: f64 = g.iter().sum::<f64>().powi(2);
        let mut total = 0.0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = g[dy] * g[dx] / z;
                        let (a, b) = (x[(oy + dy) * w + ox + dx], y[(oy + dy) * w + ox + dx]);
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2));
            }
        }
        total / ((h - k + 1) * (w - k + 1)) as f64
    }

    #[test]
    fn ssim_loss_cases() {
        let vi = t(1, 16, 1);
        assert!(eval(&vi, |f| ssim_loss(f, &vi, &vi)).abs() < 1e-12);
        let inv = vi.map(|v| 1.0 - v);
        let got = eval(&vi, |f| ssim_loss(f, &vi, &inv));
        let expect = 1.0 - ssim_oracle(vi.data(), inv.data(), 16, 16);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        for s in 0..5 {
            let (f, a, b) = (t(2, 13, 10 + s), t(2, 13, 20 + s), t(2, 13, 30 + s));
            let v = eval(&f, |f| ssim_loss(f, &a, &b));
            assert!((0.0..=4.0).contains(&v));
        }
        let small = t(1, 10, 3);
        let tape = Tape::new();
        assert!(matches!(
            ssim_loss(tape.constant(small.clone()), &small, &small),
            Err(Error::ImageTooSmall { min: 11, .. })
        ));
    }

    #[test]
    fn saliency_mask_is_the_strict_indicator() {
        let vi = t(2, 8, 4);
        assert_eq!(saliency_mask(&vi, &vi).unwrap().sum(), 0.0);
        let m = saliency_mask(&Tensor::zeros(&[1, 1, 4, 4]), &Tensor::ones(&[1, 1, 4, 4])).unwrap();
        assert_eq!(m.sum(), 16.0);
        let ir = t(2, 8, 5);
        let m = saliency_mask(&vi, &ir).unwrap();
        for i in 0..vi.numel() {
            assert_eq!(m.data()[i] == 1.0, ir.data()[i] > vi.data()[i]);
        }
    }

    #[test]
    fn intensity_loss_cases() {
        let vi = t(1, 8, 6);
        let zero = Tensor::zeros(vi.shape());
        assert_eq!(eval(&vi, |f| intensity_loss(f, &vi, &zero, &zero)), 0.0);
        let one = Tensor::ones(vi.shape());
        assert_eq!(eval(&zero, |f| intensity_loss(f, &zero, &one, &one)), 1.0);
        let (f, a, b) = (t(2, 8, 7), t(2, 8, 8), t(2, 8, 9));
        let m = saliency_mask(&a, &b).unwrap();
        let expect: f64 = (0..f.numel())
            .map(|i| {
                let (x, v, r) = (f.data()[i], a.data()[i], b.data()[i]);
                (x - v).powi(2) + if r > v { (x - r).abs() } else { 0.0 }
            })
            .sum::<f64>()
            / f.numel() as f64;
        assert!((eval(&f, |x| intensity_loss(x, &a, &b, &m)) - expect).abs() < 1e-12);
    }

    fn sobel_oracle(x: &[f64], n: usize) -> Vec<f64> {
        let at = |y: isize, xx: isize| x[y.clamp(0, n as isize - 1) as usize * n + xx.clamp(0, n as isize - 1) as usize];
        let mut out = vec![0.0; n * n];
        for y in 0..n as isize {
            for xx in 0..n as isize {
                let gx = at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1)
                    - at(y - 1, xx - 1)
                    - 2.0 * at(y, xx - 1)
                    - at(y + 1, xx - 1);
                let gy = at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1)
                    - at(y - 1, xx - 1)
                    - 2.0 * at(y - 1, xx)
                    - at(y - 1, xx + 1);
                out[y as usize * n + xx as usize] = gx.abs() + gy.abs();
            }
        }
        out
    }

    #[test]
    fn texture_loss_cases() {
        let c = Tensor::full(&[1, 1, 8, 8], 0.3);
        assert_eq!(eval(&c, |f| texture_loss(f, &c, &c)), 0.0);
        let vi = t(1, 8, 11);
        assert_eq!(eval(&vi, |f| texture_loss(f, &vi, &c)), 0.0);
        let (f, a, b) = (t(1, 8, 12), t(1, 8, 13), t(1, 8, 14));
        let (gf, ga, gb) = (sobel_oracle(f.data(), 8), sobel_oracle(a.data(), 8), sobel_oracle(b.data(), 8));
        let expect: f64 = (0..64).map(|i| (gf[i] - ga[i].max(gb[i])).abs()).sum::<f64>() / 64.0;
        assert!((eval(&f, |x| texture_loss(x, &a, &b)) - expect).abs() < 1e-12);
    }

    #[test]
    fn pixel_loss_composition() {
        let c = Tensor::full(&[1, 1, 16, 16], 0.4);
        let w = LossWeights::default();
        assert!(eval(&c, |f| Ok(pixel_loss(f, &c, &c, &w)?.pixel)).abs() < 1e-12);
        let (f, a, b) = (t(2, 16, 15), t(2, 16, 16), t(2, 16, 17));
        let only_ssim = LossWeights { lambda_int: 0.0, lambda_tex: 0.0, ..w };
        assert_eq!(
            eval(&f, |x| Ok(pixel_loss(x, &a, &b, &only_ssim)?.pixel)),
            eval(&f, |x| ssim_loss(x, &a, &b))
        );
        let m = saliency_mask(&a, &b).unwrap();
        let expect = eval(&f, |x| ssim_loss(x, &a, &b))
            + 10.0 * eval(&f, |x| intensity_loss(x, &a, &b, &m))
            + eval(&f, |x| texture_loss(x, &a, &b));
        assert!((eval(&f, |x| Ok(pixel_loss(x, &a, &b, &w)?.pixel)) - expect).abs() < 1e-12);
    }

    fn partitions(b: usize, n: usize, seed: usize) -> Vec<MaskPartition> {
        (0..b)
            .map(|k| {
                let vi = BinaryMask::from_fn(n, n, |y, x| (x + 2 * y + k + seed) % 5 < 2);
                let ir = BinaryMask::from_fn(n, n, |y, x| (3 * x + y + k) % 7 < 3);
                decompose_masks(&vi, &ir).unwrap()
            })
            .collect()
    }

    #[test]
    fn total_loss_composition_and_zero_contrastive_weight() {
        let bb = Backbone::test();
        let ccfg = ContrastiveConfig::default();
        let (f, a, b) = (t(2, 16, 21), t(2, 16, 22), t(2, 16, 23));
        let parts = partitions(2, 16, 0);
        let tape = Tape::new();
        let fv = tape.constant(f.clone());
        let set = build_sample_set(fv, &a, &b, &parts, 1, &ccfg).unwrap();
        let w = LossWeights::default();
        let (total, rep) = total_loss(fv, &a, &b, &set, &ccfg, &w, &bb).unwrap();
        assert_eq!(total.item(), rep.total);
        assert!((rep.total - (rep.ssim + 10.0 * rep.int + rep.texture + 10.0 * rep.con)).abs() < 1e-9);
        assert!((rep.con - (rep.unique + rep.share + rep.bg)).abs() < 1e-12);
        let w0 = LossWeights { lambda_con: 0.0, ..w };
        let (t0, _) = total_loss(fv, &a, &b, &set, &ccfg, &w0, &bb).unwrap();
        assert_eq!(t0.item(), pixel_loss(fv, &a, &b, &w).unwrap().pixel.item());
    }

    #[test]
    fn ablation_mask_loss_cases() {
        let (f, a, b) = (t(2, 8, 31), t(2, 8, 32), t(2, 8, 33));
        let parts = partitions(2, 8, 1);
        let l = |x: &Tensor, p: &[MaskPartition], tgt| eval(x, |v| ablation_mask_loss(v, &a, &b, p, (0.5, 0.5), tgt));
        assert_eq!(l(&a, &parts, AblationIrTarget::Visible), 0.0);
        let empty: Vec<_> = (0..2)
            .map(|_| MaskPartition {
                shared: BinaryMask::zeros(8, 8),
                unique_vi: BinaryMask::zeros(8, 8),
                unique_ir: BinaryMask::zeros(8, 8),
                background: BinaryMask::zeros(8, 8),
            })
            .collect();
        assert_eq!(l(&f, &empty, AblationIrTarget::Infrared), 0.0);
        for (tgt, src) in [(AblationIrTarget::Infrared, &b), (AblationIrTarget::Visible, &a)] {
            let mut expect = 0.0;
            for (k, p) in parts.iter().enumerate() {
                let norm = |s: &Tensor, m: &BinaryMask| {
                    (0..64)
                        .filter(|&i| m.get(i / 8, i % 8))
                        .map(|i| (f.data()[k * 64 + i] - s.data()[k * 64 + i]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                };
                expect += (0.5 * norm(&a, &p.unique_vi) + 0.5 * norm(src, &p.unique_ir) + norm(&a, &p.background)) / 2.0;
            }
            assert!((l(&f, &parts, tgt) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_mean_is_permutation_invariant() {
        let (f, a, b) = (t(3, 16, 41), t(3, 16, 42), t(3, 16, 43));
        let perm = |x: &Tensor| Tensor::stack(&[&x.select_item(2), &x.select_item(0), &x.select_item(1)]);
        let w = LossWeights::default();
        let l1 = eval(&f, |x| Ok(pixel_loss(x, &a, &b, &w)?.pixel));
        let (pa, pb) = (perm(&a), perm(&b));
        let l2 = eval(&perm(&f), |x| Ok(pixel_loss(x, &pa, &pb, &w)?.pixel));
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (a, b) = (t(1, 8, 51), t(1, 8, 52));
        let f = t(1, 8, 53);
        let m = saliency_mask(&a, &b).unwrap();
        let parts = partitions(1, 8, 2);
        let checks: Vec<(&str, f64)> = vec![
            ("int", check_input_gradient(&f, 1e-6, |x| intensity_loss(x, &a, &b, &m).unwrap()).max_rel_err),
            ("tex", check_input_gradient(&f, 1e-6, |x| texture_loss(x, &a, &b).unwrap()).max_rel_err),
            (
                "abl",
                check_input_gradient(&f, 1e-6, |x| {
                    ablation_mask_loss(x, &a, &b, &parts, (0.5, 0.5), AblationIrTarget::Infrared).unwrap()
                })
                .max_rel_err,
            ),
        ];
        // the valid 11x11 window needs at least 11 pixels per side
        let (a16, b16, f16) = (t(1, 16, 54), t(1, 16, 55), t(1, 16, 56));
        let ssim = check_input_gradient(&f16, 1e-6, |x| ssim_loss(x, &a16, &b16).unwrap()).max_rel_err;
        for (name, err) in checks.into_iter().chain([("ssim", ssim)]) {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
