//! Reference-free fusion quality metrics on `[0, 1]` luminance images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize, Image};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub en: f64,
    pub sf: f64,
    pub ag: f64,
    pub cc: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            en: sum(|r| r.en),
            sf: sum(|r| r.sf),
            ag: sum(|r| r.ag),
            cc: sum(|r| r.cc),
        }
    }
}

fn need(img: &Image, min: usize) -> Result<()> {
    let (h, w) = img.dims();
    if h < min || w < min {
        return Err(Error::ImageTooSmall { min, height: h, width: w });
    }
    Ok(())
}

/// Shannon entropy in bits of the 256-level histogram.
pub fn entropy(img: &Image) -> f64 {
    let mut hist = [0usize; 256];
    for &v in img.data() {
        hist[quantize(v) as usize] += 1;
    }
    let n = img.data().len() as f64;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// `sqrt(RF² + CF²)`, each the RMS of forward differences along rows and
/// columns respectively.
pub fn spatial_frequency(img: &Image) -> Result<f64> {
    need(img, 2)?;
    let (h, w) = img.dims();
    let mut rf = 0.0;
    let mut cf = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                rf += (img.get(y, x + 1) - img.get(y, x)).powi(2);
            }
            if y + 1 < h {
                cf += (img.get(y + 1, x) - img.get(y, x)).powi(2);
            }
        }
    }
    let rf = rf / (h * (w - 1)) as f64;
    let cf = cf / ((h - 1) * w) as f64;
    Ok((rf + cf).sqrt())
}

/// Mean of `sqrt((dx² + dy²) / 2)` over the `(H-1)(W-1)` pixels with both
/// forward differences defined.
pub fn average_gradient(img: &Image) -> Result<f64> {
    need(img, 2)?;
    let (h, w) = img.dims();
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = img.get(y, x + 1) - img.get(y, x);
            let dy = img.get(y + 1, x) - img.get(y, x);
            total += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(total / ((h - 1) * (w - 1)) as f64)
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if a.is_empty() || constant(a) || constant(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let den = (va * vb).sqrt();
    if den > 0.0 && den.is_finite() {
        (cov / den).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// Mean of the fused image's correlation with each source.
pub fn correlation_coefficient(f: &Image, vi: &Image, ir: &Image) -> Result<f64> {
    crate::mask::check_dims("correlation", f.dims(), vi.dims())?;
    crate::mask::check_dims("correlation", f.dims(), ir.dims())?;
    Ok((pearson(f.data(), vi.data()) + pearson(f.data(), ir.data())) / 2.0)
}

pub fn evaluate(f: &Image, vi: &Image, ir: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        en: entropy(f),
        sf: spatial_frequency(f)?,
        ag: average_gradient(f)?,
        cc: correlation_coefficient(f, vi, ir)?,
    })
}
