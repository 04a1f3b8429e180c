//! Mask providers: seeded synthetic shapes, binarized mask files, and an
//! adapter for an external text-prompted detection + segmentation service.
//!
//! Masks are generated once, offline, and persisted as
//! `<stem>.<modality>.mask.png` plus a JSON sidecar; training only reads files.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::mask::{check_dims, BinaryMask};

/// Binarization threshold for 8-bit mask files.
pub const MASK_THRESHOLD: u8 = 128;

pub const DEFAULT_PROMPT: &str = "The scene captures a group of pedestrians or cars.";

#[derive(Clone, Debug, PartialEq)]
pub enum MaskProviderSpec {
    ExternalLvm(ExternalConfig),
    File { path: PathBuf },
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub prompt: String,
    /// Upper bound on concurrent requests.
    pub max_in_flight: usize,
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl ExternalConfig {
    pub fn new(endpoint: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            prompt: prompt.into(),
            max_in_flight: 4,
            retries: 3,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(60),
        }
    }
}

impl MaskProviderSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            MaskProviderSpec::ExternalLvm(_) => "external",
            MaskProviderSpec::File { .. } => "file",
            MaskProviderSpec::Synthetic { .. } => "synthetic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MaskProviderSpec::ExternalLvm(cfg) if cfg.prompt.trim().is_empty() => {
                Err(Error::Config("external mask provider requires a non-empty prompt".into()))
            }
            MaskProviderSpec::ExternalLvm(cfg) if cfg.max_in_flight == 0 => {
                Err(Error::Config("max_in_flight must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    fn prompt(&self) -> Option<&str> {
        match self {
            MaskProviderSpec::ExternalLvm(cfg) => Some(&cfg.prompt),
            _ => None,
        }
    }
}

/// A generated mask together with the number of instances it unions.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMask {
    pub mask: BinaryMask,
    pub instance_count: usize,
}

pub fn generate_modal_mask(image: &Image, provider: &MaskProviderSpec) -> Result<BinaryMask> {
    generate_with_count(image, provider).map(|g| g.mask)
}

pub fn generate_with_count(image: &Image, provider: &MaskProviderSpec) -> Result<GeneratedMask> {
    provider.validate()?;
    let (h, w) = image.dims();
    match provider {
        MaskProviderSpec::Synthetic { seed } => Ok(synthetic_mask(h, w, *seed)),
        MaskProviderSpec::File { path } => {
            let mask = load_mask_file(path)?;
            check_dims("mask file", (h, w), mask.dims())?;
            let instance_count = usize::from(!mask.is_empty());
            Ok(GeneratedMask { mask, instance_count })
        }
        MaskProviderSpec::ExternalLvm(cfg) => {
            let client = HttpSegmenter::new(cfg);
            segment_with_retries(&client, image, cfg)
        }
    }
}

/// Seeded union of 1–4 filled rectangles and ellipses; a pure function of
/// `(height, width, seed)`.
pub fn synthetic_mask(height: usize, width: usize, seed: u64) -> GeneratedMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=4usize);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let ellipse = rng.gen_bool(0.5);
        let cy = rng.gen_range(0.0..height as f64);
        let cx = rng.gen_range(0.0..width as f64);
        let ry = rng.gen_range(0.08..0.25) * height as f64 + 0.5;
        let rx = rng.gen_range(0.08..0.25) * width as f64 + 0.5;
        shapes.push((ellipse, cy, cx, ry, rx));
    }
    let mask = BinaryMask::from_fn(height, width, |y, x| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        shapes.iter().any(|&(ellipse, cy, cx, ry, rx)| {
            let (dy, dx) = ((py - cy) / ry, (px - cx) / rx);
            if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            }
        })
    });
    GeneratedMask { mask, instance_count: count }
}

/// Load a single-channel 8-bit mask file, binarized at [`MASK_THRESHOLD`].
pub fn load_mask_file(path: &Path) -> Result<BinaryMask> {
    let (h, w, raw) = image::load_gray_u8(path).map_err(|e| match e {
        Error::UnreadableFile { path, reason } => Error::MalformedMaskFile { path, reason },
        other => other,
    })?;
    Ok(BinaryMask::from_u8(h, w, &raw, MASK_THRESHOLD))
}

pub fn save_mask_file(path: &Path, mask: &BinaryMask) -> Result<()> {
    image::save_gray_u8(path, mask.height(), mask.width(), mask.to_u8())
}

/// Sidecar record persisted next to each mask PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub image: String,
    pub prompt: Option<String>,
    pub instance_count: usize,
    pub provider: String,
}

pub fn mask_path(dir: &Path, stem: &str, modality: &str) -> PathBuf {
    dir.join(format!("{stem}.{modality}.mask.png"))
}

pub fn sidecar_path(mask_png: &Path) -> PathBuf {
    mask_png.with_extension("json")
}

/// Write a mask and its sidecar record.
pub fn persist_mask(mask_png: &Path, source_image: &Path, generated: &GeneratedMask, provider: &MaskProviderSpec) -> Result<()> {
    save_mask_file(mask_png, &generated.mask)?;
    let sidecar = MaskSidecar {
        image: source_image.display().to_string(),
        prompt: provider.prompt().map(str::to_owned),
        instance_count: generated.instance_count,
        provider: provider.kind().to_owned(),
    };
    std::fs::write(sidecar_path(mask_png), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// External service adapter

/// One request per image carrying the text prompt; the response lists
/// per-instance binary masks.
pub trait Segmenter {
    fn segment(&self, image: &Image, prompt: &str) -> Result<Vec<BinaryMask>>;
}

/// JSON over HTTP: `POST {"image": <base64 PNG>, "prompt": ...}` answered by
/// `{"masks": [<base64 PNG>, ...]}`.
pub struct HttpSegmenter {
    endpoint: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct SegmentRequest<'a> {
    image: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct SegmentResponse {
    masks: Vec<String>,
}

impl HttpSegmenter {
    pub fn new(cfg: &ExternalConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .build()
            .new_agent();
        Self {
            endpoint: cfg.endpoint.clone(),
            agent,
        }
    }
}

pub fn encode_png_gray(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    let buf = ::image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .expect("buffer matches dimensions");
    buf.write_to(&mut Cursor::new(&mut out), ::image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = ::image::load_from_memory(bytes).map_err(|e| Error::MalformedMaskFile {
        path: PathBuf::from("<response>"),
        reason: e.to_string(),
    })?;
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(BinaryMask::from_u8(h, w, gray.as_raw(), MASK_THRESHOLD))
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, image: &Image, prompt: &str) -> Result<Vec<BinaryMask>> {
        let body = SegmentRequest {
            image: B64.encode(encode_png_gray(image)),
            prompt,
        };
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| Error::RemoteUnreachable(format!("{}: {e}", self.endpoint)))?;
        let parsed: SegmentResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::RemoteUnreachable(format!("bad response from {}: {e}", self.endpoint)))?;
        parsed
            .masks
            .iter()
            .map(|m| {
                let bytes = B64.decode(m).map_err(|e| Error::MalformedMaskFile {
                    path: PathBuf::from("<response>"),
                    reason: e.to_string(),
                })?;
                decode_mask_png(&bytes)
            })
            .collect()
    }
}

/// Call `client` with retries and exponential backoff, then union the
/// returned instances. Only transport failures are retried.
pub fn segment_with_retries(client: &dyn Segmenter, image: &Image, cfg: &ExternalConfig) -> Result<GeneratedMask> {
    let mut delay = cfg.backoff;
    let mut attempt = 0;
    let instances = loop {
        match client.segment(image, &cfg.prompt) {
            Ok(instances) => break instances,
            Err(Error::RemoteUnreachable(msg)) if attempt < cfg.retries => {
                log_retry(attempt, &msg);
                thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    let (h, w) = image.dims();
    let mut mask = BinaryMask::zeros(h, w);
    for inst in &instances {
        check_dims("segmentation instance", (h, w), inst.dims())?;
        mask = mask.union(inst)?;
    }
    Ok(GeneratedMask {
        mask,
        instance_count: instances.len(),
    })
}

fn log_retry(attempt: u32, msg: &str) {
    eprintln!("segmentation request failed (attempt {}): {msg}", attempt + 1);
}

/// Segment many images with at most `cfg.max_in_flight` concurrent requests.
/// Each worker owns its own client; results keep input order.
pub fn segment_many<S, F>(images: &[Image], cfg: &ExternalConfig, make_client: F) -> Vec<Result<GeneratedMask>>
where
    S: Segmenter,
    F: Fn() -> S + Sync,
{
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<GeneratedMask>>>> = Mutex::new((0..images.len()).map(|_| None).collect());
    let workers = cfg.max_in_flight.max(1).min(images.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let client = make_client();
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= images.len() {
                        break;
                    }
                    let r = segment_with_retries(&client, &images[i], cfg);
                    results.lock().unwrap()[i] = Some(r);
                }
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}
