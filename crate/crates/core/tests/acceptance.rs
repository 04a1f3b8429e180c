//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.
//!
//! Criteria run sequentially inside a single test so that the per-criterion
//! runtimes are not distorted by other tests sharing the CPU.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ivfuse_core::autograd::Tape;
use ivfuse_core::backbone::Backbone;
use ivfuse_core::config::{TrainConfig, Variant};
use ivfuse_core::contextual::{build_sample_set, contextual_feature_similarity, contrastive_loss, similarity_matrix, to_point_set, ContrastiveConfig};
use ivfuse_core::data::{load_record, DatasetManifest, LoadedRecord};
use ivfuse_core::fusion_net::{FusionNet, NetConfig};
use ivfuse_core::gradcheck::{check_input_gradient, check_named_gradients, lcg_tensor, GradReport};
use ivfuse_core::image::Image;
use ivfuse_core::mask::{decompose_masks, BinaryMask, MaskPartition};
use ivfuse_core::metrics::{average_gradient, correlation_coefficient, entropy, spatial_frequency};
use ivfuse_core::nn::{Ctx, Mode};
use ivfuse_core::pixel_losses::{intensity_loss, saliency_mask, ssim_loss, texture_loss, total_loss, LossReport, LossWeights};
use ivfuse_core::synth::write_synthetic_dataset;
use ivfuse_core::tensor::Tensor;
use ivfuse_core::trainer::{run_with, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, took: Duration) -> bool {
    took < limit
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density: f64 = rng.gen();
    let bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::from_fn(h, w, |y, x| bits[y * w + x])
}

fn partition_oracle(v: bool, r: bool) -> [bool; 4] {
    // shared, unique_vi, unique_ir, background
    match (v, r) {
        (true, true) => [true, false, false, false],
        (true, false) => [false, true, false, false],
        (false, true) => [false, false, true, false],
        (false, false) => [false, false, false, true],
    }
}

fn mask_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sizes = vec![(1, 1), (257, 131)];
    while sizes.len() < 1000 {
        sizes.push((rng.gen_range(1..=257), rng.gen_range(1..=131)));
    }
    for (case, &(h, w)) in sizes.iter().enumerate() {
        let (mv, mr) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let p = decompose_masks(&mv, &mr).unwrap();
        let parts = [&p.shared, &p.unique_vi, &p.unique_ir, &p.background];
        for y in 0..h {
            for x in 0..w {
                let got = parts.map(|m| m.get(y, x));
                if got != partition_oracle(mv.get(y, x), mr.get(y, x)) {
                    return outcome(false, format!("case {case} ({h}x{w}) pixel ({y},{x}) got {got:?}"));
                }
                if got.iter().filter(|&&b| b).count() != 1 {
                    return outcome(false, format!("case {case}: pixel ({y},{x}) not covered exactly once"));
                }
            }
        }
    }
    outcome(true, format!("{} mask pairs", sizes.len()))
}

/// Naive `S_ij`, `s_i` and `s` with explicit loops over points.
fn naive_similarity(g: &[Vec<f64>], p: &[Vec<f64>], eps: f64) -> (Vec<Vec<f64>>, f64) {
    let c = p[0].len();
    let mu: Vec<f64> = (0..c).map(|k| p.iter().map(|q| q[k]).sum::<f64>() / p.len() as f64).collect();
    let centre = |v: &Vec<f64>| v.iter().zip(&mu).map(|(a, m)| a - m).collect::<Vec<f64>>();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut s_mat = Vec::new();
    for gi in g {
        let a = centre(gi);
        let row: Vec<f64> = p
            .iter()
            .map(|pj| {
                let b = centre(pj);
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                1.0 - dot / (norm(&a) * norm(&b) + eps)
            })
            .collect();
        s_mat.push(row);
    }
    let mut total = 0.0;
    for row in &s_mat {
        let z: f64 = row.iter().map(|s| (1.0 - s).exp()).sum();
        total += row.iter().map(|s| (1.0 - s).exp() / z).fold(f64::MIN, f64::max);
    }
    let n = s_mat.len() as f64;
    (s_mat, total / n)
}

fn points(t: &Tensor) -> Vec<Vec<f64>> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..h * w).map(|p| (0..c).map(|k| t.data()[k * h * w + p]).collect()).collect()
}

fn contextual_oracle() -> Outcome {
    let eps = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let c = rng.gen_range(1..=16);
        let (h1, w1) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        // the final few cases exercise the single-point degenerate case
        let (h2, w2) = if case >= 95 { (1, 1) } else { (rng.gen_range(1..=8), rng.gen_range(1..=8)) };
        let a = lcg_tensor(&[c, h1, w1], 1000 + case, -1.0, 1.0);
        let b = lcg_tensor(&[c, h2, w2], 2000 + case, -1.0, 1.0);
        let (s_ref, s_naive) = naive_similarity(&points(&a), &points(&b), eps);
        let s_mat = similarity_matrix(&to_point_set(&a), &to_point_set(&b), eps);
        for (i, row) in s_ref.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                worst = worst.max((s_mat.data()[i * row.len() + j] - v).abs());
            }
        }
        let s = contextual_feature_similarity(&a, &b, eps);
        worst = worst.max((s - s_naive).abs());
        if h2 * w2 == 1 && s != 1.0 {
            return outcome(false, format!("case {case}: single-point s = {s:.17}, expected exactly 1"));
        }
    }
    outcome(worst < 1e-5, format!("100 cases, max abs deviation {worst:.2e}"))
}

fn random_partitions(b: usize, h: usize, w: usize, seed: u64) -> Vec<MaskPartition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b)
        .map(|_| {
            let mut draw = || {
                let bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
                BinaryMask::from_fn(h, w, |y, x| bits[y * w + x])
            };
            let (mv, mr) = (draw(), draw());
            decompose_masks(&mv, &mr).unwrap()
        })
        .collect()
}

fn gradients() -> Outcome {
    let bb = Backbone::test();
    let ccfg = ContrastiveConfig::default();
    let w = LossWeights::default();
    let mut checks: Vec<(&str, GradReport)> = Vec::new();

    let (vi8, ir8, f8) = (lcg_tensor(&[2, 1, 8, 8], 1, 0.0, 1.0), lcg_tensor(&[2, 1, 8, 8], 2, 0.0, 1.0), lcg_tensor(&[2, 1, 8, 8], 3, 0.05, 0.95));
    let m8 = saliency_mask(&vi8, &ir8).unwrap();
    let parts8 = random_partitions(2, 8, 8, 4);
    checks.push(("int", check_input_gradient(&f8, 1e-6, |f| intensity_loss(f, &vi8, &ir8, &m8).unwrap())));
    checks.push(("texture", check_input_gradient(&f8, 1e-6, |f| texture_loss(f, &vi8, &ir8).unwrap())));
    checks.push((
        "con",
        check_input_gradient(&f8, 1e-6, |f| {
            let set = build_sample_set(f, &vi8, &ir8, &parts8, 1, &ccfg).unwrap();
            contrastive_loss(&set, &ccfg, &bb).unwrap().total
        }),
    ));

    // the valid SSIM window needs 11 pixels per side
    let (vi16, ir16, f16) = (lcg_tensor(&[2, 1, 16, 16], 5, 0.0, 1.0), lcg_tensor(&[2, 1, 16, 16], 6, 0.0, 1.0), lcg_tensor(&[2, 1, 16, 16], 7, 0.05, 0.95));
    let parts16 = random_partitions(2, 16, 16, 8);
    checks.push(("ssim", check_input_gradient(&f16, 1e-6, |f| ssim_loss(f, &vi16, &ir16).unwrap())));
    checks.push((
        "total",
        check_input_gradient(&f16, 1e-6, |f| {
            let set = build_sample_set(f, &vi16, &ir16, &parts16, 1, &ccfg).unwrap();
            total_loss(f, &vi16, &ir16, &set, &ccfg, &w, &bb).unwrap().0
        }),
    ));

    let mut net = FusionNet::new(NetConfig::with_base_channels(4), 9).unwrap();
    // keep pre-activations off the ReLU kinks of a fresh initialisation
    for (i, t) in net.store_mut().params_mut().enumerate() {
        *t = t.zip_map(&lcg_tensor(t.shape(), 700 + i as u64, -0.05, 0.05), |a, b| a + b);
    }
    let named = net.store().params().to_vec();
    checks.push((
        "net params (total)",
        check_named_gradients(&named, 1e-6, 3, 11, |tape, vars| {
            let ctx = Ctx::new(tape, vars, net.store(), Mode::Train);
            let f = net.forward(&ctx, tape.constant(vi16.clone()), tape.constant(ir16.clone())).unwrap();
            let set = build_sample_set(f, &vi16, &ir16, &parts16, 1, &ccfg).unwrap();
            total_loss(f, &vi16, &ir16, &set, &ccfg, &w, &bb).unwrap().0
        }),
    ));

    let worst = checks.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let detail = checks.iter().map(|(n, r)| format!("{n} {:.1e}/{}", r.max_rel_err, r.checked)).collect::<Vec<_>>().join(", ");
    outcome(worst < 1e-3 && checks.iter().all(|(_, r)| r.checked > 0), detail)
}

fn architecture() -> Outcome {
    let net = FusionNet::new(NetConfig::with_base_channels(4), 3).unwrap();
    let tape = Tape::new();
    let pv = net.store().bind_frozen(&tape);
    let ctx = Ctx::new(&tape, &pv, net.store(), Mode::Eval);
    let vi = tape.constant(lcg_tensor(&[2, 1, 32, 32], 1, 0.0, 1.0));
    let ir = tape.constant(lcg_tensor(&[2, 1, 32, 32], 2, 0.0, 1.0));
    let levels = net.encode(&ctx, vi, ir).unwrap();
    let (_, traces) = net.forward_traced(&ctx, vi, ir).unwrap();
    let mut worst_row: f64 = 0.0;
    for (lv, tr) in levels.iter().zip(&traces) {
        let att = tr.attention.expect("cross attention enabled");
        for map in [att.vi_to_ir(), att.ir_to_vi()] {
            let keys = *map.shape().last().unwrap();
            for row in map.data().chunks(keys) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let (sv, si) = tr.spatial_maps.expect("spatial enhancement enabled");
        for m in [sv.value(), si.value()] {
            let per_item = m.numel() / 2;
            for item in m.data().chunks(per_item) {
                worst_row = worst_row.max((item.iter().sum::<f64>() - 1.0).abs());
            }
        }
        if tr.phi_f.shape() != lv.phi_vi.shape() {
            return outcome(false, format!("FIFB output {:?} vs input {:?}", tr.phi_f.shape(), lv.phi_vi.shape()));
        }
    }
    if worst_row > 1e-5 {
        return outcome(false, format!("softmax rows deviate from 1 by {worst_row:.2e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sizes = Vec::new();
    for _ in 0..10 {
        let (h, w) = (16 * rng.gen_range(1..=5), 16 * rng.gen_range(1..=5));
        let a = Image::from_fn(h, w, |y, x| ((x * 3 + y * 7) % 17) as f64 / 16.0);
        let b = Image::from_fn(h, w, |y, x| ((x + y * 5) % 11) as f64 / 10.0);
        let f = net.fuse(&a, &b).unwrap();
        if f.dims() != (h, w) {
            return outcome(false, format!("fuse {h}x{w} produced {:?}", f.dims()));
        }
        sizes.push(format!("{h}x{w}"));
    }

    let (recs, _dir) = synthetic_records(16, 64, 21);
    let mut cfg = smoke_config(10, 5);
    cfg.net.base_channels = 4;
    let mut trainer = Trainer::new(cfg, Backbone::test()).unwrap();
    let before = trainer.backbone().snapshot();
    for _ in 0..10 {
        trainer.advance(&recs).unwrap();
    }
    if trainer.backbone().snapshot() != before {
        return outcome(false, "backbone parameters changed during training");
    }
    outcome(true, format!("max softmax deviation {worst_row:.1e}; fused sizes {}; backbone frozen over 10 steps", sizes.join(",")))
}

fn synthetic_records(count: usize, size: usize, seed: u64) -> (Vec<LoadedRecord>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mp = write_synthetic_dataset(dir.path(), count, size, seed, true).unwrap();
    let m = DatasetManifest::load(&mp).unwrap();
    let recs = m.records.iter().map(|r| load_record(&m, r).unwrap()).collect();
    (recs, dir)
}

/// The reference hyperparameters at desk scale: 32x32 patches of 64x64
/// scenes, base width 8, keys pooled 4x in the first attention level.
fn smoke_config(steps: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps,
        seed,
        net: NetConfig {
            attention_token_downsample: 4,
            ..NetConfig::with_base_channels(8)
        },
        ..Default::default()
    };
    cfg.patch.size = 32;
    cfg
}

fn smoke_run(recs: &Vec<LoadedRecord>, steps: u64) -> (Vec<LossReport>, Vec<(String, Tensor)>) {
    let mut trainer = Trainer::new(smoke_config(steps, 42), Backbone::test()).unwrap();
    let reports = (0..steps).map(|_| trainer.advance(recs).unwrap()).collect();
    (reports, trainer.net().store().params().to_vec())
}

fn training_smoke() -> Outcome {
    let start = Instant::now();
    let (recs, _dir) = synthetic_records(16, 64, 7);
    let cfg = smoke_config(200, 42);
    assert_eq!((cfg.learning_rate, cfg.batch_size, cfg.group_n), (1e-4, 12, 3));
    let (a, pa) = smoke_run(&recs, 200);
    let (b, pb) = smoke_run(&recs, 200);
    let took = start.elapsed();
    let deterministic = a == b && pa == pb;
    let (first, last) = (a[0].total, a[199].total);
    let reduction = 1.0 - last / first;
    outcome(
        deterministic && reduction >= 0.30 && within(Duration::from_secs(15 * 60), took),
        format!(
            "L_total {first:.4} -> {last:.4} ({:.1}% reduction, need >= 30%); pixel {:.4} -> {:.4}; con {:.4} -> {:.4}; deterministic repeat: {deterministic}; {:.0}s",
            100.0 * reduction,
            a[0].pixel,
            a[199].pixel,
            a[0].con,
            a[199].con,
            took.as_secs_f64()
        ),
    )
}

fn ablation_distinct() -> Outcome {
    let (recs, _dir) = synthetic_records(16, 64, 7);
    let mut totals = Vec::new();
    for v in Variant::ALL {
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { variant: v, ..smoke_config(2, 42) };
        match run_with(cfg, &recs, Backbone::test(), out.path(), false) {
            Ok(s) if s.steps == 2 => totals.push((v, s.first.unwrap().total)),
            Ok(s) => return outcome(false, format!("{v} stopped after {} steps", s.steps)),
            Err(e) => return outcome(false, format!("{v} failed: {e}")),
        }
    }
    for i in 0..totals.len() {
        for j in i + 1..totals.len() {
            if totals[i].1 == totals[j].1 {
                return outcome(false, format!("{} and {} share step-1 L_total {}", totals[i].0, totals[j].0, totals[i].1));
            }
        }
    }
    outcome(true, totals.iter().map(|(v, t)| format!("{v} {t:.6}")).collect::<Vec<_>>().join(", "))
}

fn oracle_entropy(img: &Image) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &v in img.data() {
        *counts.entry((v * 255.0).round().clamp(0.0, 255.0) as i64).or_insert(0usize) += 1;
    }
    let n = img.data().len() as f64;
    counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).log2()).sum()
}

fn oracle_sf(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for y in 0..h {
        for x in 1..w {
            rows.push(img.get(y, x) - img.get(y, x - 1));
        }
    }
    for y in 1..h {
        for x in 0..w {
            cols.push(img.get(y, x) - img.get(y - 1, x));
        }
    }
    let ms = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>() / v.len() as f64;
    (ms(&rows) + ms(&cols)).sqrt()
}

fn oracle_ag(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let mut acc = Vec::new();
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let gx = img.get(y, x + 1) - img.get(y, x);
            let gy = img.get(y + 1, x) - img.get(y, x);
            acc.push(((gx * gx + gy * gy) / 2.0).sqrt());
        }
    }
    acc.iter().sum::<f64>() / acc.len() as f64
}

fn oracle_corr(a: &Image, b: &Image) -> f64 {
    let n = a.data().len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let cov: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.data().iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.data().iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

fn metric_sanity() -> Outcome {
    let flat = Image::filled(17, 23, 0.37);
    let levels = Image::from_fn(16, 16, |y, x| (y * 16 + x) as f64 / 255.0);
    let wavy = Image::from_fn(20, 30, |y, x| ((x as f64 * 0.7).sin() * (y as f64 * 0.3).cos() + 1.0) / 2.0);
    let fixed = [
        ("EN(constant)", entropy(&flat), 0.0, 0.0),
        ("EN(256 levels)", entropy(&levels), 8.0, 1e-9),
        ("SF(constant)", spatial_frequency(&flat).unwrap(), 0.0, 0.0),
        ("AG(constant)", average_gradient(&flat).unwrap(), 0.0, 0.0),
        ("CC(f,f,f)", correlation_coefficient(&wavy, &wavy, &wavy).unwrap(), 1.0, 1e-12),
    ];
    for (name, got, want, tol) in fixed {
        if (got - want).abs() > tol {
            return outcome(false, format!("{name} = {got}, expected {want}"));
        }
    }
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k);
        let (h, w) = (rng.gen_range(2..=40), rng.gen_range(2..=40));
        let mut img = || {
            let d: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
            Image::new(h, w, d)
        };
        let (f, a, b) = (img(), img(), img());
        let cc = (oracle_corr(&f, &a) + oracle_corr(&f, &b)) / 2.0;
        let diffs = [
            entropy(&f) - oracle_entropy(&f),
            spatial_frequency(&f).unwrap() - oracle_sf(&f),
            average_gradient(&f).unwrap() - oracle_ag(&f),
            correlation_coefficient(&f, &a, &b).unwrap() - cc,
        ];
        worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
    }
    outcome(worst < 1e-9, format!("fixed cases exact; 50 random images, max deviation {worst:.1e}"))
}

const CLI_CONFIG: &str = "\
learning_rate = 0.0001
batch_size = 4
group_n = 2
checkpoint_every = 25

[net]
base_channels = 4
attention_token_downsample = 4

[patch]
size = 32
";

fn ivfuse(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ivfuse")).current_dir(cwd).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ivfuse {} exited with {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every produced file, keyed by relative path. The wall-clock field of the
/// training log is dropped before comparison.
fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(&p).unwrap();
            if rel.ends_with("log.jsonl") {
                let lines: Vec<String> = String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .map(|l| {
                        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("elapsed_ms");
                        v.to_string()
                    })
                    .collect();
                bytes = lines.join("\n").into_bytes();
            }
            files.push((rel, bytes));
        }
    }
    files.sort();
    files
}

fn cli_pipeline(work: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    write_synthetic_dataset(&work.join("data"), 8, 64, 3, false).map_err(|e| e.to_string())?;
    std::fs::write(work.join("train.toml"), CLI_CONFIG).map_err(|e| e.to_string())?;
    ivfuse(work, &["gen-masks", "--manifest", "data/manifest.jsonl", "--provider", "synthetic", "--seed", "5"])?;
    ivfuse(work, &["train", "--config", "train.toml", "--manifest", "data/manifest.jsonl", "--out", "run", "--seed", "9", "--steps", "50"])?;
    ivfuse(work, &["fuse", "--checkpoint", "run/last.ckpt", "--manifest", "data/manifest.jsonl", "--out", "fused"])?;
    ivfuse(work, &["eval", "--manifest", "data/manifest.jsonl", "--fused", "fused", "--out", "metrics.csv"])?;
    let csv = std::fs::read_to_string(work.join("metrics.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    if lines.next() != Some("image_id,en,sf,ag,cc,status") {
        return Err(format!("unexpected CSV header in\n{csv}"));
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != 9 || !rows[..8].iter().all(|r| r.ends_with(",ok")) || !rows[8].starts_with("mean,") {
        return Err(format!("unexpected CSV body\n{csv}"));
    }
    Ok(snapshot(work))
}

fn cli_round_trip() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path| cli_pipeline(d);
    match (run(a.path()), run(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p != q).map(|(p, _)| p.0.as_str()).collect();
            if x.len() != y.len() {
                outcome(false, format!("file sets differ: {} vs {}", x.len(), y.len()))
            } else if !differing.is_empty() {
                outcome(false, format!("outputs differ: {}", differing.join(", ")))
            } else {
                outcome(true, format!("{} files byte-identical across two seeded runs", x.len()))
            }
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

// Runs without the libtest harness so the verdict lines are always shown.
fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("mask partition", Duration::from_secs(10), mask_partition),
        ("contextual oracle equivalence", Duration::from_secs(30), contextual_oracle),
        ("gradient correctness", Duration::from_secs(300), gradients),
        ("architecture contracts", Duration::from_secs(600), architecture),
        ("training smoke", Duration::from_secs(900), training_smoke),
        ("ablation distinguishability", Duration::from_secs(600), ablation_distinct),
        ("metric sanity", Duration::from_secs(60), metric_sanity),
        ("cli round trip", Duration::from_secs(600), cli_round_trip),
    ];
    // ACCEPTANCE_ONLY=3,8 runs a subset while investigating
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let mut o = run();
        let took = start.elapsed();
        if !within(limit, took) {
            o.pass = false;
            o.detail.push_str(&format!("; exceeded {}s budget", limit.as_secs()));
        }
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] criterion {} {name}: {} ({:.1}s)", i + 1, o.detail, took.as_secs_f64());
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
