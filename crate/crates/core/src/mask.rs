//! Binary salient-object masks and their four-way semantic partition.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Per-pixel membership in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Self { height, width, bits }
    }

    /// Build from raw values, which must all be 0 or 1.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Option<Self> {
        (bits.len() == height * width && bits.iter().all(|&b| b <= 1)).then_some(Self { height, width, bits })
    }

    /// Binarize 8-bit samples: `v >= threshold` is on.
    pub fn from_u8(height: usize, width: usize, samples: &[u8], threshold: u8) -> Self {
        assert_eq!(samples.len(), height * width);
        Self {
            height,
            width,
            bits: samples.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn coverage(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_dims("mask union", self.dims(), other.dims())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> BinaryMask {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    /// 0/255 samples as written to mask files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b * 255).collect()
    }

    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, self.bits.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        self.to_image().to_tensor()
    }
}

pub(crate) fn check_dims(context: &'static str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}

/// The disjoint cover `{shared, unique_vi, unique_ir, background}` of a
/// visible/infrared mask pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPartition {
    pub shared: BinaryMask,
    pub unique_vi: BinaryMask,
    pub unique_ir: BinaryMask,
    pub background: BinaryMask,
}

/// Which of the four partition masks gates a contrastive sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Filter {
    UniqueVi,
    UniqueIr,
    Shared,
    Background,
}

impl Filter {
    /// Fixed accumulation order for losses.
    pub const ALL: [Filter; 4] = [Filter::UniqueVi, Filter::UniqueIr, Filter::Shared, Filter::Background];

    pub fn name(self) -> &'static str {
        match self {
            Filter::UniqueVi => "unique_vi",
            Filter::UniqueIr => "unique_ir",
            Filter::Shared => "shared",
            Filter::Background => "background",
        }
    }
}

impl MaskPartition {
    pub fn get(&self, filter: Filter) -> &BinaryMask {
        match filter {
            Filter::UniqueVi => &self.unique_vi,
            Filter::UniqueIr => &self.unique_ir,
            Filter::Shared => &self.shared,
            Filter::Background => &self.background,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.shared.dims()
    }

    /// Masks exactly cover every pixel once.
    pub fn is_exact_partition(&self) -> bool {
        let parts = [&self.shared, &self.unique_vi, &self.unique_ir, &self.background];
        let n = self.shared.bits.len();
        parts.iter().all(|m| m.bits.len() == n)
            && (0..n).all(|i| parts.iter().map(|m| m.bits[i]).sum::<u8>() == 1)
    }

    /// Fraction of pixels covered by any salient (non-background) part.
    pub fn salient_coverage(&self) -> f64 {
        1.0 - self.background.coverage()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            shared: self.shared.crop(top, left, height, width),
            unique_vi: self.unique_vi.crop(top, left, height, width),
            unique_ir: self.unique_ir.crop(top, left, height, width),
            background: self.background.crop(top, left, height, width),
        }
    }
}

/// `s = vi ⊙ ir`, `u_vi = vi − s`, `u_ir = ir − s`, `bg = 1 − s − u_vi − u_ir`.
pub fn decompose_masks(m_vi: &BinaryMask, m_ir: &BinaryMask) -> Result<MaskPartition> {
    check_dims("decompose_masks", m_vi.dims(), m_ir.dims())?;
    let (h, w) = m_vi.dims();
    let n = h * w;
    let mut shared = Vec::with_capacity(n);
    let mut unique_vi = Vec::with_capacity(n);
    let mut unique_ir = Vec::with_capacity(n);
    let mut background = Vec::with_capacity(n);
    for (&v, &r) in m_vi.bits.iter().zip(&m_ir.bits) {
        let s = v * r;
        let uv = v - s;
        let ur = r - s;
        shared.push(s);
        unique_vi.push(uv);
        unique_ir.push(ur);
        background.push(1 - s - uv - ur);
    }
    let mk = |bits| BinaryMask { height: h, width: w, bits };
    Ok(MaskPartition {
        shared: mk(shared),
        unique_vi: mk(unique_vi),
        unique_ir: mk(unique_ir),
        background: mk(background),
    })
}

/// Hadamard product of an image with a mask.
pub fn apply_mask(image: &Image, mask: &BinaryMask) -> Result<Image> {
    check_dims("apply_mask", image.dims(), mask.dims())?;
    let data = image
        .data()
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &b)| if b == 1 { v } else { 0.0 })
        .collect();
    Ok(Image::new(image.height(), image.width(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0u8..2, h * w),
                proptest::collection::vec(0u8..2, h * w),
            )
                .prop_map(move |(a, b)| {
                    (
                        BinaryMask::from_bits(h, w, a).unwrap(),
                        BinaryMask::from_bits(h, w, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn partition_is_exact_and_matches_case_analysis((vi, ir) in arb_pair()) {
            let p = decompose_masks(&vi, &ir).unwrap();
            prop_assert!(p.is_exact_partition());
            for i in 0..vi.bits().len() {
                let expect = match (vi.bits()[i], ir.bits()[i]) {
                    (1, 1) => Filter::Shared,
                    (1, 0) => Filter::UniqueVi,
                    (0, 1) => Filter::UniqueIr,
                    _ => Filter::Background,
                };
                prop_assert_eq!(p.get(expect).bits()[i], 1);
            }
        }

        #[test]
        fn swapping_modalities_swaps_unique_parts((vi, ir) in arb_pair()) {
            let a = decompose_masks(&vi, &ir).unwrap();
            let b = decompose_masks(&ir, &vi).unwrap();
            prop_assert_eq!(&a.shared, &b.shared);
            prop_assert_eq!(&a.background, &b.background);
            prop_assert_eq!(&a.unique_vi, &b.unique_ir);
            prop_assert_eq!(&a.unique_ir, &b.unique_vi);
        }
    }

    #[test]
    fn all_ones_pair_is_fully_shared() {
        let one = BinaryMask::ones(4, 5);
        let p = decompose_masks(&one, &one).unwrap();
        assert_eq!(p.shared, one);
        assert!(p.unique_vi.is_empty() && p.unique_ir.is_empty() && p.background.is_empty());
    }

    #[test]
    fn disjoint_pair_has_no_shared_part() {
        let vi = BinaryMask::from_fn(6, 6, |_, x| x < 2);
        let ir = BinaryMask::from_fn(6, 6, |_, x| x >= 4);
        let p = decompose_masks(&vi, &ir).unwrap();
        assert!(p.shared.is_empty());
        assert_eq!(p.unique_vi, vi);
        assert_eq!(p.unique_ir, ir);
        assert_eq!(p.background, BinaryMask::from_fn(6, 6, |_, x| (2..4).contains(&x)));
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let err = decompose_masks(&BinaryMask::zeros(2, 3), &BinaryMask::zeros(3, 2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        let err = apply_mask(&Image::filled(2, 2, 1.0), &BinaryMask::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn masking_identities() {
        let img = Image::from_fn(5, 7, |y, x| (y * 7 + x) as f64 / 35.0);
        assert_eq!(apply_mask(&img, &BinaryMask::ones(5, 7)).unwrap(), img);
        assert!(apply_mask(&img, &BinaryMask::zeros(5, 7)).unwrap().data().iter().all(|&v| v == 0.0));
        let half = BinaryMask::from_fn(5, 7, |_, x| x < 3);
        let out = apply_mask(&Image::filled(5, 7, 0.5), &half).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(out.get(y, x), if x < 3 { 0.5 } else { 0.0 });
            }
        }
    }

    #[test]
    fn from_bits_rejects_non_binary_values() {
        assert!(BinaryMask::from_bits(1, 2, vec![0, 2]).is_none());
        assert!(BinaryMask::from_bits(1, 2, vec![0, 1]).is_some());
    }
}
