//! Dataset manifests, record loading, salient patch sampling and seeded
//! batching.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_gray, load_visible, Chroma, Image};
use crate::mask::{check_dims, decompose_masks, MaskPartition};
use crate::provider::load_mask_file;
use crate::tensor::Tensor;

pub const DEFAULT_MIN_SALIENT_FRACTION: f64 = 0.01;
pub const DEFAULT_MAX_RETRIES: usize = 16;

/// Mix a root seed with a path of tags into an independent stream seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(root ^ 0x9e37_79b9_7f4a_7c15), |acc, &t| mix(acc.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn default_split() -> String {
    "train".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub vi_path: PathBuf,
    pub ir_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_vi_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ir_path: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
}

impl Record {
    /// File stem of the visible image, used to name outputs.
    pub fn id(&self) -> String {
        self.vi_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// JSON-lines manifest; relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::UnreadableFile {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::UnreadableFile {
                path: path.to_owned(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.root.join(p)
        }
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, name: &str) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == name).collect()
    }
}

/// Luminance pair plus the visible chroma, in `[0, 1]`.
pub fn load_pair(manifest: &DatasetManifest, record: &Record) -> Result<(Image, Image, Chroma)> {
    let (vi, chroma) = load_visible(&manifest.resolve(&record.vi_path))?;
    let ir = load_gray(&manifest.resolve(&record.ir_path))?;
    check_dims("visible/infrared pair", vi.dims(), ir.dims())?;
    Ok((vi, ir, chroma))
}

/// A record with its mask partition, ready for cropping.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub vi: Image,
    pub ir: Image,
    pub partition: MaskPartition,
}

pub fn load_record(manifest: &DatasetManifest, record: &Record) -> Result<LoadedRecord> {
    let (vi, ir, _) = load_pair(manifest, record)?;
    let mask = |p: &Option<PathBuf>, which: &str| -> Result<_> {
        let p = p.as_ref().ok_or_else(|| Error::Config(format!("record {} has no {which} mask; run gen-masks first", record.id())))?;
        let m = load_mask_file(&manifest.resolve(p))?;
        check_dims("mask", vi.dims(), m.dims())?;
        Ok(m)
    };
    let partition = decompose_masks(&mask(&record.mask_vi_path, "visible")?, &mask(&record.mask_ir_path, "infrared")?)?;
    Ok(LoadedRecord { vi, ir, partition })
}

#[derive(Clone, Debug)]
pub struct TrainPatch {
    pub vi: Image,
    pub ir: Image,
    pub partition: MaskPartition,
    pub top: usize,
    pub left: usize,
    /// Salient fraction of the window.
    pub coverage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub size: usize,
    pub min_salient_fraction: f64,
    pub max_retries: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 256,
            min_salient_fraction: DEFAULT_MIN_SALIENT_FRACTION,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

/// Rejection-sample a square window whose salient coverage reaches the
/// threshold; after `max_retries` rejections the best window seen is used.
pub fn sample_patch(rec: &LoadedRecord, cfg: &PatchConfig, rng: &mut impl Rng) -> Result<TrainPatch> {
    let (h, w) = rec.vi.dims();
    let s = cfg.size;
    if h < s || w < s {
        return Err(Error::ImageTooSmall { min: s, height: h, width: w });
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for _ in 0..=cfg.max_retries {
        let top = rng.gen_range(0..=h - s);
        let left = rng.gen_range(0..=w - s);
        let coverage = rec.partition.crop(top, left, s, s).salient_coverage();
        if best.is_none_or(|(c, _, _)| coverage > c) {
            best = Some((coverage, top, left));
        }
        if coverage >= cfg.min_salient_fraction {
            break;
        }
    }
    let (coverage, top, left) = best.expect("at least one window");
    Ok(TrainPatch {
        vi: rec.vi.crop(top, left, s, s),
        ir: rec.ir.crop(top, left, s, s),
        partition: rec.partition.crop(top, left, s, s),
        top,
        left,
        coverage,
    })
}

/// Seeded record order for one epoch, cut into full batches (the ragged
/// tail is dropped).
pub fn make_batches(num_records: usize, batch_size: usize, group_n: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if group_n == 0 || batch_size == 0 || batch_size % group_n != 0 {
        return Err(Error::BatchNotDivisible { batch: batch_size, group: group_n });
    }
    let mut order: Vec<usize> = (0..num_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xba7c, epoch])));
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// `[B,1,S,S]` tensors and per-item partitions; items `j·n..(j+1)·n` form
/// group `j`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub vi: Tensor,
    pub ir: Tensor,
    pub partitions: Vec<MaskPartition>,
    pub group_n: usize,
    pub records: Vec<usize>,
}

impl Batch {
    pub fn groups(&self) -> usize {
        self.partitions.len() / self.group_n
    }

    pub fn from_patches(patches: &[TrainPatch], group_n: usize, records: Vec<usize>) -> Result<Self> {
        if group_n == 0 || patches.len() % group_n != 0 {
            return Err(Error::BatchNotDivisible { batch: patches.len(), group: group_n });
        }
        let vi: Vec<Tensor> = patches.iter().map(|p| p.vi.to_tensor()).collect();
        let ir: Vec<Tensor> = patches.iter().map(|p| p.ir.to_tensor()).collect();
        Ok(Self {
            vi: crate::tensor::concat(&vi.iter().collect::<Vec<_>>(), 0),
            ir: crate::tensor::concat(&ir.iter().collect::<Vec<_>>(), 0),
            partitions: patches.iter().map(|p| p.partition.clone()).collect(),
            group_n,
            records,
        })
    }
}

/// Source of loaded records; the trainer asks for them by index.
pub trait RecordSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<LoadedRecord>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads every record from disk on demand.
pub struct ManifestSource {
    manifest: DatasetManifest,
    records: Vec<Record>,
}

impl ManifestSource {
    pub fn new(manifest: DatasetManifest, split: &str) -> Self {
        let records = manifest.split(split).into_iter().cloned().collect();
        Self { manifest, records }
    }
}

impl RecordSource for ManifestSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn get(&self, index: usize) -> Result<LoadedRecord> {
        load_record(&self.manifest, &self.records[index])
    }
}

impl RecordSource for Vec<LoadedRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<LoadedRecord> {
        Ok(self[index].clone())
    }
}

/// Assemble batch `index` of `epoch`: every item gets its own crop stream
/// seeded from `(seed, epoch, index, item)`.
pub fn assemble_batch(
    source: &dyn RecordSource,
    order: &[usize],
    patch: &PatchConfig,
    group_n: usize,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<Batch> {
    let patches = order
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xc409, epoch, index, k as u64]));
            sample_patch(&source.get(r)?, patch, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_patches(&patches, group_n, order.to_vec())
}
