//! Frozen feature extractors producing the five-level pyramid of the
//! contextual space.
//!
//! Two extractors share one contract: VGG19 (taps `relu1_1` .. `relu5_1`,
//! weights from a local archive) and a fixed-seed strided convolution stack
//! used when no weights are available. Both take single-channel `[B,1,H,W]`
//! inputs in `[0,1]`, replicate them to three channels and apply ImageNet
//! mean/std normalization before the first convolution.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::archive;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::lcg_tensor;
use crate::image::Image;
use crate::tensor::{ConvGeom, Tensor};

pub const LEVELS: usize = 5;

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

const TEST_SEED: u64 = 0x5eed_bac4;
const TEST_CHANNELS: [usize; LEVELS] = [8, 16, 32, 64, 64];

/// VGG19 `features` indices of the convolutions up to `conv5_1`.
const VGG_CONVS: [(usize, usize, usize); 13] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (16, 256, 256),
    (19, 256, 512),
    (21, 512, 512),
    (23, 512, 512),
    (25, 512, 512),
    (28, 512, 512),
];
/// Position (within `VGG_CONVS`) of the conv whose ReLU output is tapped.
const VGG_TAPS: [usize; LEVELS] = [0, 2, 4, 8, 12];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Vgg19,
    Test,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Vgg19 => "vgg19",
            BackboneKind::Test => "test",
        }
    }
}

#[derive(Clone)]
struct FrozenConv {
    name: String,
    weight: Arc<Tensor>,
    bias: Arc<Tensor>,
    geom: ConvGeom,
}

#[derive(Clone)]
enum Op {
    /// Convolution followed by ReLU.
    ConvRelu(FrozenConv),
    /// 2x2 max pool, ceil mode.
    Pool,
    Tap,
}

/// Per-level activations of one extraction, outside any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Backbone {
    kind: BackboneKind,
    ops: Vec<Op>,
    normalize: (Arc<Tensor>, Arc<Tensor>),
    min_size: usize,
    source: Option<PathBuf>,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone")
            .field("kind", &self.kind)
            .field("source", &self.source)
            .finish()
    }
}

/// `1 -> 3` pointwise conv computing `(x - mean_c) / std_c`.
fn normalizer() -> (Arc<Tensor>, Arc<Tensor>) {
    let w = Tensor::new(vec![3, 1, 1, 1], STD.iter().map(|s| 1.0 / s).collect());
    let b = Tensor::new(vec![3], MEAN.iter().zip(STD).map(|(m, s)| -m / s).collect());
    (Arc::new(w), Arc::new(b))
}

impl Backbone {
    /// Fixed-seed 5-stage stack: a stride-1 conv, then four stride-2 convs,
    /// each followed by ReLU and tapped.
    pub fn test() -> Self {
        let mut ops = Vec::new();
        let mut cin = 3;
        for (i, &cout) in TEST_CHANNELS.iter().enumerate() {
            let fan_in = cin * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let seed = TEST_SEED + i as u64;
            let stride = if i == 0 { 1 } else { 2 };
            ops.push(Op::ConvRelu(FrozenConv {
                name: format!("stage{}", i + 1),
                weight: Arc::new(lcg_tensor(&[cout, cin, 3, 3], seed, -bound, bound)),
                bias: Arc::new(lcg_tensor(&[cout], seed ^ 0xb1a5, -0.1, 0.1)),
                geom: ConvGeom {
                    stride,
                    padding: 1,
                    groups: 1,
                },
            }));
            ops.push(Op::Tap);
            cin = cout;
        }
        Self {
            kind: BackboneKind::Test,
            ops,
            normalize: normalizer(),
            min_size: 8,
            source: None,
        }
    }

    /// VGG19 from an archive holding `features.{i}.weight` / `features.{i}.bias`
    /// in torchvision's indexing.
    pub fn vgg19(path: &Path) -> Result<Self> {
        let (_, tensors) = archive::read(path)?;
        let mut bb = Self::vgg19_from_tensors(tensors).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        bb.source = Some(path.to_path_buf());
        Ok(bb)
    }

    pub fn vgg19_from_tensors(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut find = |name: &str| {
            tensors
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| tensors.swap_remove(i).1)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
        };
        let mut ops = Vec::new();
        for (pos, &(idx, cin, cout)) in VGG_CONVS.iter().enumerate() {
            let weight = find(&format!("features.{idx}.weight"))?;
            let bias = find(&format!("features.{idx}.bias"))?;
            if weight.shape() != [cout, cin, 3, 3] || bias.shape() != [cout] {
                return Err(Error::Config(format!(
                    "features.{idx} has shape {:?}, expected [{cout}, {cin}, 3, 3]",
                    weight.shape()
                )));
            }
            // pools sit after conv1_2, conv2_2, conv3_4, conv4_4
            if [2, 4, 8, 12].contains(&pos) {
                ops.push(Op::Pool);
            }
            ops.push(Op::ConvRelu(FrozenConv {
                name: format!("features.{idx}"),
                weight: Arc::new(weight),
                bias: Arc::new(bias),
                geom: ConvGeom::same3x3(),
            }));
            if VGG_TAPS.contains(&pos) {
                ops.push(Op::Tap);
            }
        }
        Ok(Self {
            kind: BackboneKind::Vgg19,
            ops,
            normalize: normalizer(),
            min_size: 32,
            source: None,
        })
    }

    /// VGG19 when `weights` names an existing file, the test backbone otherwise.
    pub fn from_weights(weights: Option<&Path>) -> Result<Self> {
        match weights {
            Some(p) if p.exists() => Self::vgg19(p),
            _ => Ok(Self::test()),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn min_size(&self) -> usize {
        self.min_size
    }

    /// Copies of every frozen array, for verifying that nothing mutates them.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for op in &self.ops {
            if let Op::ConvRelu(c) = op {
                out.push((format!("{}.weight", c.name), (*c.weight).clone()));
                out.push((format!("{}.bias", c.name), (*c.bias).clone()));
            }
        }
        out
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        if height < self.min_size || width < self.min_size {
            return Err(Error::ImageTooSmall {
                min: self.min_size,
                height,
                width,
            });
        }
        Ok(())
    }

    /// Levels `1..=max_level` for a `[B,1,H,W]` input. Gradients reach the
    /// input when it requires them; the extractor's weights never do.
    pub fn extract<'t>(&self, x: Var<'t>, max_level: usize) -> Result<Vec<Var<'t>>> {
        assert!((1..=LEVELS).contains(&max_level), "max_level {max_level} out of range");
        let shape = x.shape();
        assert!(shape.len() == 4 && shape[1] == 1, "backbone expects [B,1,H,W], got {shape:?}");
        self.check_size(shape[2], shape[3])?;
        let mut h = x.conv2d_fixed(&self.normalize.0, Some(&self.normalize.1), ConvGeom::pointwise());
        let mut taps = Vec::with_capacity(max_level);
        for op in &self.ops {
            match op {
                Op::ConvRelu(c) => h = h.conv2d_fixed(&c.weight, Some(&c.bias), c.geom).relu(),
                Op::Pool => h = h.max_pool2x2(),
                Op::Tap => {
                    taps.push(h);
                    if taps.len() == max_level {
                        break;
                    }
                }
            }
        }
        Ok(taps)
    }

    /// All five levels of one image, without gradient tracking.
    pub fn extract_image(&self, image: &Image) -> Result<FeaturePyramid> {
        let tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let levels = self.extract(x, LEVELS)?;
        Ok(FeaturePyramid {
            levels: levels.iter().map(|v| (*v.value()).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, lcg_tensor};

    #[test]
    fn test_backbone_halves_with_ceiling() {
        let bb = Backbone::test();
        let img = Image::from_fn(37, 20, |y, x| ((y * 3 + x) % 7) as f64 / 7.0);
        let p = bb.extract_image(&img).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
        // independent trace of ceil(h / 2) per stage
        let mut expect: Vec<(usize, usize)> = vec![(37, 20)];
        for _ in 1..LEVELS {
            let (h, w) = *expect.last().unwrap();
            expect.push((h.div_ceil(2), w.div_ceil(2)));
        }
        assert_eq!(dims, expect);
        assert!(p.levels.iter().all(|t| t.all_finite()));
    }

    #[test]
    fn deterministic_and_non_constant() {
        let bb = Backbone::test();
        let img = Image::from_fn(8, 8, |y, x| (y * 8 + x) as f64 / 64.0);
        assert_eq!(bb.extract_image(&img).unwrap(), bb.extract_image(&img).unwrap());
        let zeros = bb.extract_image(&Image::filled(8, 8, 0.0)).unwrap();
        let ones = bb.extract_image(&Image::filled(8, 8, 1.0)).unwrap();
        assert_ne!(zeros, ones);
    }

    #[test]
    fn too_small_inputs_are_rejected() {
        let err = Backbone::test().extract_image(&Image::filled(4, 16, 0.5)).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { min: 8, .. }));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let bb = Backbone::test();
        let x0 = lcg_tensor(&[1, 1, 8, 8], 3, 0.0, 1.0);
        let u: Vec<Tensor> = (0..LEVELS)
            .map(|l| {
                let s = 8usize.div_ceil(1 << l).max(1);
                lcg_tensor(&[1, TEST_CHANNELS[l], s, s], 10 + l as u64, -1.0, 1.0)
            })
            .collect();
        let report = check_input_gradient(&x0, 1e-5, |x| {
            let levels = bb.extract(x, LEVELS).unwrap();
            let tape = x.tape();
            levels
                .iter()
                .zip(&u)
                .map(|(f, w)| f.mul(tape.constant(w.clone())).sum())
                .reduce(|a, b| a.add(b))
                .unwrap()
        });
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn directional_derivative_matches_central_difference() {
        let bb = Backbone::test();
        let x0 = lcg_tensor(&[1, 1, 8, 8], 4, 0.0, 1.0);
        let v = lcg_tensor(&[1, 1, 8, 8], 5, -1.0, 1.0);
        let probe = |x: &Tensor| -> (f64, Tensor) {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let f = bb.extract(xv, LEVELS).unwrap();
            let out = f.iter().map(|l| l.square().sum()).reduce(|a, b| a.add(b)).unwrap();
            (out.item(), tape.backward(out).wrt_or_zeros(xv))
        };
        let (_, g) = probe(&x0);
        let jvp: f64 = g.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let h = 1e-5;
        let shift = |s: f64| x0.zip_map(&v, |a, b| a + s * b);
        let fd = (probe(&shift(h)).0 - probe(&shift(-h)).0) / (2.0 * h);
        assert!((jvp - fd).abs() / fd.abs().max(1e-7) < 1e-3, "jvp {jvp} fd {fd}");
    }

    #[test]
    fn vgg_archive_errors_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.ivfa");
        archive::write(&path, &serde_json::json!({}), &[("features.0.weight".into(), Tensor::zeros(&[64, 3, 3, 3]))]).unwrap();
        assert!(matches!(Backbone::from_weights(Some(&path)), Err(Error::Config(_))));
    }

    #[test]
    fn missing_weights_select_test_backbone() {
        let bb = Backbone::from_weights(Some(Path::new("/nonexistent/vgg19.ivfa"))).unwrap();
        assert_eq!(bb.kind(), BackboneKind::Test);
    }

    #[test]
    fn vgg_archive_taps_follow_pre_pool_convention() {
        let mut tensors = Vec::new();
        for &(idx, cin, cout) in &VGG_CONVS {
            tensors.push((format!("features.{idx}.weight"), Tensor::full(&[cout, cin, 3, 3], 1e-3)));
            tensors.push((format!("features.{idx}.bias"), Tensor::zeros(&[cout])));
        }
        let bb = Backbone::vgg19_from_tensors(tensors).unwrap();
        assert_eq!(bb.kind(), BackboneKind::Vgg19);
        let p = bb.extract_image(&Image::filled(32, 32, 0.5)).unwrap();
        let got: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            got,
            vec![vec![1, 64, 32, 32], vec![1, 128, 16, 16], vec![1, 256, 8, 8], vec![1, 512, 4, 4], vec![1, 512, 2, 2]]
        );
        assert!(bb.extract_image(&Image::filled(16, 32, 0.5)).is_err());
    }
}
