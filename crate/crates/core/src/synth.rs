//! Procedural registered visible/infrared scenes with ground-truth masks.
//!
//! Each scene has a textured, unevenly lit visible background and a smooth
//! cool infrared background, plus three object kinds:
//!
//! * signs: textured patches seen only in the visible band,
//! * pedestrians: hot ellipses nearly invisible in the visible band,
//! * vehicles: seen in both bands.
//!
//! The visible mask marks signs and vehicles, the infrared mask marks
//! pedestrians and vehicles.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, DatasetManifest, Record};
use crate::error::Result;
use crate::image::{save_gray, save_rgb, Image};
use crate::mask::BinaryMask;
use crate::provider::{mask_path, save_mask_file};

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    /// Interleaved RGB in `[0, 1]`.
    pub vi_rgb: Vec<f64>,
    pub ir: Image,
    pub mask_vi: BinaryMask,
    pub mask_ir: BinaryMask,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Sign,
    Pedestrian,
    Vehicle,
}

struct Object {
    kind: Kind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    tone: [f64; 3],
    heat: f64,
}

impl Object {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        match self.kind {
            Kind::Pedestrian => dy * dy + dx * dx <= 1.0,
            Kind::Sign | Kind::Vehicle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

pub fn synthetic_pair(height: usize, width: usize, seed: u64) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let mut objects = Vec::new();
    for (kind, count) in [(Kind::Sign, rng.gen_range(1..=2)), (Kind::Pedestrian, rng.gen_range(1..=3)), (Kind::Vehicle, rng.gen_range(1..=2))] {
        for _ in 0..count {
            let (ry, rx) = match kind {
                Kind::Pedestrian => (rng.gen_range(0.08..0.16) * hf, rng.gen_range(0.04..0.07) * wf),
                Kind::Vehicle => (rng.gen_range(0.06..0.1) * hf, rng.gen_range(0.1..0.18) * wf),
                Kind::Sign => (rng.gen_range(0.05..0.09) * hf, rng.gen_range(0.05..0.09) * wf),
            };
            let tone = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let heat = match kind {
                Kind::Pedestrian => rng.gen_range(0.8..0.95),
                Kind::Vehicle => rng.gen_range(0.6..0.8),
                Kind::Sign => 0.0,
            };
            objects.push(Object {
                kind,
                cy: rng.gen_range(0.1..0.9) * hf,
                cx: rng.gen_range(0.1..0.9) * wf,
                ry,
                rx,
                tone,
                heat,
            });
        }
    }
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let light = (rng.gen_range(0.3..0.6), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let ir_base = rng.gen_range(0.15..0.3);
    let tint = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];

    let mut vi_rgb = Vec::with_capacity(height * width * 3);
    let mut ir = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (ny, nx) = (py / hf - 0.5, px / wf - 0.5);
            let texture: f64 = waves.iter().map(|&(fy, fx, ph)| (fy * py + fx * px + ph).sin()).sum::<f64>() / 3.0;
            let shade = (light.0 + light.1 * ny + light.2 * nx).clamp(0.05, 1.0);
            let noise = rng.gen_range(-0.02..0.02);
            let mut rgb = tint.map(|t| (shade * t * (0.75 + 0.25 * texture) + noise).clamp(0.0, 1.0));
            let mut heat = ir_base + 0.05 * ny + rng.gen_range(-0.01..0.01);
            for o in objects.iter().filter(|o| o.contains(py, px)) {
                match o.kind {
                    Kind::Sign => {
                        let stripe = if ((px / 2.0).floor() as i64 + (py / 2.0).floor() as i64) % 2 == 0 { 1.0 } else { 0.6 };
                        rgb = o.tone.map(|t| t * stripe);
                    }
                    Kind::Pedestrian => rgb = rgb.map(|c| c * 0.9),
                    Kind::Vehicle => rgb = o.tone.map(|t| t * (0.85 + 0.15 * texture)),
                }
                heat = heat.max(o.heat);
            }
            vi_rgb.extend(rgb);
            ir.push(heat.clamp(0.0, 1.0));
        }
    }
    let mask = |pick: fn(Kind) -> bool| {
        BinaryMask::from_fn(height, width, |y, x| {
            objects.iter().any(|o| pick(o.kind) && o.contains(y as f64 + 0.5, x as f64 + 0.5))
        })
    };
    SyntheticPair {
        vi_rgb,
        ir: Image::new(height, width, ir),
        mask_vi: mask(|k| matches!(k, Kind::Sign | Kind::Vehicle)),
        mask_ir: mask(|k| matches!(k, Kind::Pedestrian | Kind::Vehicle)),
    }
}

/// Write `count` scenes under `dir` (`vi/`, `ir/`, and `masks/` when
/// `with_masks`) plus `manifest.jsonl`; returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, seed: u64, with_masks: bool) -> Result<PathBuf> {
    for sub in ["vi", "ir", "masks"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{i:04}");
        let pair = synthetic_pair(size, size, derive_seed(seed, &[0x5717, i as u64]));
        let vi_path = PathBuf::from(format!("vi/{id}.png"));
        let ir_path = PathBuf::from(format!("ir/{id}.png"));
        save_rgb(&dir.join(&vi_path), size, size, &pair.vi_rgb)?;
        save_gray(&dir.join(&ir_path), &pair.ir)?;
        let (mut mask_vi_path, mut mask_ir_path) = (None, None);
        if with_masks {
            let mv = mask_path(Path::new("masks"), &id, "vi");
            let mi = mask_path(Path::new("masks"), &id, "ir");
            save_mask_file(&dir.join(&mv), &pair.mask_vi)?;
            save_mask_file(&dir.join(&mi), &pair.mask_ir)?;
            mask_vi_path = Some(mv);
            mask_ir_path = Some(mi);
        }
        records.push(Record {
            vi_path,
            ir_path,
            mask_vi_path,
            mask_ir_path,
            split: "train".into(),
        });
    }
    let manifest = DatasetManifest { root: dir.to_owned(), records };
    let path = dir.join("manifest.jsonl");
    manifest.save(&path)?;
    Ok(path)
}
