//! The `ivfuse` command line: mask generation, training, fusion, evaluation
//! and ablation sweeps.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::load_net;
use crate::config::{parse_variants, TrainConfig, Variant};
use crate::data::{derive_seed, load_pair, DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::fusion_net::{FusionNet, SIZE_MULTIPLE};
use crate::image::{load_gray, load_visible, merge_ycbcr, save_rgb, Image};
use crate::metrics::{evaluate, MetricReport};
use crate::provider::{generate_with_count, mask_path, persist_mask, ExternalConfig, MaskProviderSpec, DEFAULT_PROMPT};
use crate::trainer;

#[derive(Parser, Debug)]
#[command(name = "ivfuse", version, about = "Infrared/visible image fusion with object-aware contrastive training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate per-modality object masks for every manifest record.
    GenMasks(GenMasksArgs),
    /// Train a fusion network.
    Train(TrainArgs),
    /// Fuse a single pair, or every record of a manifest.
    Fuse(FuseArgs),
    /// Compute EN, SF, AG and CC for fused images.
    Eval(EvalArgs),
    /// Train several variants under a shared seed and summarise them.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    External,
    File,
    Synthetic,
}

#[derive(Args, Debug)]
pub struct GenMasksArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub provider: ProviderKind,
    /// Mask output directory (default: `masks/` next to the manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Regenerate masks that already exist.
    #[arg(long)]
    pub force: bool,
    /// Directory holding `<id>.<vi|ir>.mask.png` files (file provider).
    #[arg(long)]
    pub mask_source: Option<PathBuf>,
    /// Segmentation service URL (external provider).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = DEFAULT_PROMPT)]
    pub prompt: String,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Tensor archive with VGG19 weights (overrides the config).
    #[arg(long)]
    pub backbone_weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overrides the configured variant.
    #[arg(long)]
    pub variant: Option<String>,
    /// Continue from `<out>/last.ckpt` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, requires = "ir", conflicts_with = "manifest")]
    pub vi: Option<PathBuf>,
    #[arg(long)]
    pub ir: Option<PathBuf>,
    /// Fuse every record of this manifest into `--out` (a directory).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output PNG for a single pair, or output directory with `--manifest`.
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for interface uniformity; fusion is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory with `<id>.png` fused images.
    #[arg(long)]
    pub fused: PathBuf,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated variant names.
    #[arg(long, default_value = "full,model1,model2,model3,model4,model5,no_se,no_cc,no_ca")]
    pub variant: String,
}

/// Parse arguments, run, and return the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMasks(a) => gen_masks(&a),
        Command::Train(a) => train(&a),
        Command::Fuse(a) => fuse(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn provider_for(a: &GenMasksArgs, record_index: usize, modality: u64, id: &str) -> Result<MaskProviderSpec> {
    Ok(match a.provider {
        ProviderKind::Synthetic => MaskProviderSpec::Synthetic {
            seed: derive_seed(a.seed, &[0x3a5c, record_index as u64, modality]),
        },
        ProviderKind::File => {
            let dir = a.mask_source.as_ref().ok_or_else(|| Error::Config("--provider file requires --mask-source".into()))?;
            MaskProviderSpec::File {
                path: mask_path(dir, id, if modality == 0 { "vi" } else { "ir" }),
            }
        }
        ProviderKind::External => {
            let endpoint = a.endpoint.clone().ok_or_else(|| Error::Config("--provider external requires --endpoint".into()))?;
            let mut cfg = ExternalConfig::new(endpoint, a.prompt.clone());
            cfg.timeout = Duration::from_secs(a.timeout_secs);
            MaskProviderSpec::ExternalLvm(cfg)
        }
    })
}

/// Path stored in the manifest: relative to its root when possible.
fn manifest_relative(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).map(Path::to_owned).unwrap_or_else(|_| p.to_owned())
}

fn gen_masks(a: &GenMasksArgs) -> Result<()> {
    let mut manifest = DatasetManifest::load(&a.manifest)?;
    let root = std::path::absolute(&manifest.root)?;
    let out = std::path::absolute(a.out.clone().unwrap_or_else(|| manifest.root.join("masks")))?;
    std::fs::create_dir_all(&out)?;
    let mut failures = Vec::new();
    let (mut written, mut skipped) = (0, 0);
    for i in 0..manifest.records.len() {
        let rec = manifest.records[i].clone();
        let id = rec.id();
        let mut paths = [None, None];
        let mut failed = None;
        for (modality, (name, src)) in [("vi", &rec.vi_path), ("ir", &rec.ir_path)].into_iter().enumerate() {
            let target = mask_path(&out, &id, name);
            if target.exists() && !a.force {
                skipped += 1;
                paths[modality] = Some(target);
                continue;
            }
            let result = provider_for(a, i, modality as u64, &id).and_then(|spec| {
                let source = manifest.resolve(src);
                let image = load_gray(&source)?;
                let generated = generate_with_count(&image, &spec)?;
                persist_mask(&target, &source, &generated, &spec)
            });
            match result {
                Ok(()) => {
                    written += 1;
                    paths[modality] = Some(target);
                }
                Err(e @ Error::Config(_)) => return Err(e),
                Err(e) => {
                    failed = Some(format!("{id} ({name}): {e}"));
                    break;
                }
            }
        }
        match failed {
            Some(msg) => failures.push(msg),
            None => {
                let [vi, ir] = paths.map(|p| p.map(|p| manifest_relative(&root, &p)));
                let r: &mut Record = &mut manifest.records[i];
                r.mask_vi_path = vi;
                r.mask_ir_path = ir;
            }
        }
    }
    manifest.save(&a.manifest)?;
    println!("masks written: {written}, kept: {skipped}, failed records: {}", failures.len());
    for f in &failures {
        eprintln!("failed: {f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::UnreadableFile {
            path: a.manifest.clone(),
            reason: format!("{} record(s) failed mask generation", failures.len()),
        })
    }
}

fn load_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(s) = run.steps {
        cfg.steps = s;
    }
    if let Some(w) = &run.backbone_weights {
        cfg.backbone_weights = Some(w.clone());
    }
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.run)?;
    if let Some(v) = &a.variant {
        cfg.variant = v.parse()?;
    }
    let s = trainer::run(cfg, &a.run.manifest, &a.run.out, a.resume)?;
    if let (Some(first), Some(last)) = (s.first, s.last) {
        println!("steps {}: total {:.6} -> {:.6}", s.steps, first.total, last.total);
    }
    println!("checkpoint {}", s.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct FuseMeta {
    checkpoint: String,
    height: usize,
    width: usize,
    /// Reflect-padded size the network saw, when padding was needed.
    padded_to: Option<(usize, usize)>,
}

/// Fuse luminance planes of any size: reflect-pad up to the next multiple
/// of 16, fuse, crop back. Returns the fused plane and the padded size.
pub fn fuse_any_size(net: &FusionNet, vi: &Image, ir: &Image) -> Result<(Image, Option<(usize, usize)>)> {
    crate::mask::check_dims("fuse", vi.dims(), ir.dims())?;
    let (h, w) = vi.dims();
    let up = |n: usize| n.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
    let (ph, pw) = (up(h), up(w));
    if (ph, pw) == (h, w) {
        return Ok((net.fuse(vi, ir)?, None));
    }
    let fused = net.fuse(&vi.pad_reflect(ph, pw), &ir.pad_reflect(ph, pw))?;
    Ok((fused.crop(0, 0, h, w), Some((ph, pw))))
}

fn fuse_one(net: &FusionNet, checkpoint: &Path, vi_path: &Path, ir_path: &Path, out: &Path) -> Result<()> {
    let (vi, chroma) = load_visible(vi_path)?;
    let ir = load_gray(ir_path)?;
    let (fused, padded_to) = fuse_any_size(net, &vi, &ir)?;
    let (h, w) = fused.dims();
    save_rgb(out, h, w, &merge_ycbcr(&fused, &chroma))?;
    let meta = FuseMeta {
        checkpoint: checkpoint.display().to_string(),
        height: h,
        width: w,
        padded_to,
    };
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let (net, _) = load_net(&a.checkpoint)?;
    match (&a.manifest, &a.vi, &a.ir) {
        (Some(m), _, _) => {
            let manifest = DatasetManifest::load(m)?;
            std::fs::create_dir_all(&a.out)?;
            for rec in &manifest.records {
                let out = a.out.join(format!("{}.png", rec.id()));
                fuse_one(&net, &a.checkpoint, &manifest.resolve(&rec.vi_path), &manifest.resolve(&rec.ir_path), &out)?;
            }
            println!("fused {} record(s) into {}", manifest.records.len(), a.out.display());
            Ok(())
        }
        (None, Some(vi), Some(ir)) => {
            fuse_one(&net, &a.checkpoint, vi, ir, &a.out)?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
        _ => Err(Error::Config("fuse needs --vi and --ir, or --manifest".into())),
    }
}

/// Metrics CSV: one row per record, a `missing` status for absent fused
/// images (excluded from the mean), then the mean row.
pub fn metrics_csv(rows: &[(String, Option<MetricReport>)]) -> String {
    let mut out = String::from("image_id,en,sf,ag,cc,status\n");
    let mut present = Vec::new();
    for (id, r) in rows {
        match r {
            Some(r) => {
                let _ = writeln!(out, "{id},{:.6},{:.6},{:.6},{:.6},ok", r.en, r.sf, r.ag, r.cc);
                present.push(*r);
            }
            None => {
                let _ = writeln!(out, "{id},,,,,missing");
            }
        }
    }
    let m = MetricReport::mean(&present);
    let _ = writeln!(out, "mean,{:.6},{:.6},{:.6},{:.6},{}", m.en, m.sf, m.ag, m.cc, present.len());
    out
}

fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut rows = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let id = rec.id();
        let path = a.fused.join(format!("{id}.png"));
        if !path.exists() {
            rows.push((id, None));
            continue;
        }
        let (vi, ir, _) = load_pair(&manifest, rec)?;
        let fused = load_gray(&path)?;
        rows.push((id, Some(evaluate(&fused, &vi, &ir)?)));
    }
    let csv = metrics_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let variants: Vec<Variant> = parse_variants(&a.variant)?;
    let base = load_config(&a.run)?;
    base.validate()?;
    std::fs::create_dir_all(&a.run.out)?;
    let mut summary = String::from("variant,steps,first_total,last_total,first_con,last_con,status\n");
    let mut failed = 0;
    for v in variants {
        let cfg = TrainConfig { variant: v, ..base.clone() };
        let out = a.run.out.join(v.name());
        match trainer::run(cfg, &a.run.manifest, &out, false) {
            Ok(s) => {
                let (f, l) = (s.first.unwrap_or_default(), s.last.unwrap_or_default());
                let _ = writeln!(summary, "{v},{},{:.9},{:.9},{:.9},{:.9},ok", s.steps, f.total, l.total, f.con, l.con);
            }
            Err(e) => {
                failed += 1;
                eprintln!("variant {v} failed: {e}");
                let _ = writeln!(summary, "{v},,,,,,\"{}\"", e.to_string().replace('"', "'"));
            }
        }
    }
    let path = a.run.out.join("summary.csv");
    std::fs::write(&path, summary)?;
    println!("summary {}", path.display());
    if failed > 0 {
        return Err(Error::Config(format!("{failed} variant(s) failed")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::BatchNotDivisible { batch: 3, group: 2 }.exit_code(), 2);
        assert_eq!(Error::NonFiniteLoss { step: 1, components: String::new() }.exit_code(), 3);
        assert_eq!(Error::ImageTooSmall { min: 2, height: 1, width: 1 }.exit_code(), 1);
    }

    #[test]
    fn csv_mean_row_skips_missing() {
        let r = |v: f64| MetricReport { en: v, sf: v, ag: v, cc: v };
        let csv = metrics_csv(&[("a".into(), Some(r(1.0))), ("b".into(), None), ("c".into(), Some(r(3.0)))]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[2], "b,,,,,missing");
        assert_eq!(lines[4], "mean,2.000000,2.000000,2.000000,2.000000,2");
    }

    #[test]
    fn padding_arithmetic() {
        let net = FusionNet::new(crate::fusion_net::NetConfig::with_base_channels(4), 0).unwrap();
        let vi = Image::from_fn(20, 35, |y, x| ((x + y) % 7) as f64 / 6.0);
        let (f, padded) = fuse_any_size(&net, &vi, &vi).unwrap();
        assert_eq!(f.dims(), (20, 35));
        assert_eq!(padded, Some((32, 48)));
        let sq = Image::filled(32, 16, 0.5);
        assert_eq!(fuse_any_size(&net, &sq, &sq).unwrap().1, None);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(main_with_args(["ivfuse", "bogus"]), 2);
        assert_eq!(main_with_args(["ivfuse", "ablate", "--manifest", "m", "--out", "o", "--variant", "full,nope"]), 2);
    }
}
