//! Training configuration (TOML) and the named ablation variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contextual::{ContrastiveConfig, DistanceKind};
use crate::data::PatchConfig;
use crate::error::{Error, Result};
use crate::fusion_net::NetConfig;
use crate::pixel_losses::{AblationIrTarget, LossWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Euclidean distance on the deep layers.
    Model1,
    /// Contextual distance on all five layers.
    Model2,
    /// Euclidean distance on all five layers.
    Model3,
    /// Mask-gated intensity loss instead of the contrastive and intensity terms.
    Model4,
    /// No Euclidean term inside CS.
    Model5,
    NoSe,
    NoCc,
    NoCa,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::Model1,
        Variant::Model2,
        Variant::Model3,
        Variant::Model4,
        Variant::Model5,
        Variant::NoSe,
        Variant::NoCc,
        Variant::NoCa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Model1 => "model1",
            Variant::Model2 => "model2",
            Variant::Model3 => "model3",
            Variant::Model4 => "model4",
            Variant::Model5 => "model5",
            Variant::NoSe => "no_se",
            Variant::NoCc => "no_cc",
            Variant::NoCa => "no_ca",
        }
    }

    /// Whether the objective is the mask-gated ablation loss.
    pub fn uses_mask_loss(self) -> bool {
        self == Variant::Model4
    }

    pub fn apply_net(self, mut net: NetConfig) -> NetConfig {
        match self {
            Variant::NoSe => net.spatial_enhancement = false,
            Variant::NoCc => net.channel_attention = false,
            Variant::NoCa => net.cross_attention = false,
            _ => {}
        }
        net
    }

    pub fn apply_contrastive(self, mut c: ContrastiveConfig) -> ContrastiveConfig {
        let all = (1..=crate::backbone::LEVELS).collect::<Vec<_>>();
        match self {
            Variant::Model1 => c.distance = DistanceKind::Euclidean,
            Variant::Model2 => c.deep_layers = all,
            Variant::Model3 => {
                c.distance = DistanceKind::Euclidean;
                c.deep_layers = all;
            }
            Variant::Model5 => c.lambda_cs = 0.0,
            _ => {}
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of {}", Variant::ALL.map(Variant::name).join(", "))))
    }
}

/// Parse a comma-separated variant list, rejecting unknown names.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let out: Vec<Variant> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config("empty variant list".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub group_n: usize,
    /// Optimizer steps; there is no default run length.
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
    pub variant: Variant,
    pub ablation_ir_target: AblationIrTarget,
    /// Manifest split used for training.
    pub split: String,
    /// Tensor archive with VGG19 weights; absent selects the test backbone.
    pub backbone_weights: Option<PathBuf>,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub net: NetConfig,
    pub patch: PatchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 12,
            group_n: 3,
            steps: 0,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            variant: Variant::Full,
            ablation_ir_target: AblationIrTarget::Infrared,
            split: "train".into(),
            backbone_weights: None,
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            net: NetConfig::default(),
            patch: PatchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.group_n == 0 || self.batch_size == 0 || self.batch_size % self.group_n != 0 {
            return Err(Error::BatchNotDivisible { batch: self.batch_size, group: self.group_n });
        }
        if self.steps == 0 {
            return fail("steps must be set to a positive number".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be > 0, got {c}"));
            }
        }
        let p = &self.patch;
        if p.size == 0 || p.size % crate::fusion_net::SIZE_MULTIPLE != 0 {
            return fail(format!("patch.size must be a positive multiple of {}, got {}", crate::fusion_net::SIZE_MULTIPLE, p.size));
        }
        if !(0.0..=1.0).contains(&p.min_salient_fraction) {
            return fail(format!("patch.min_salient_fraction must be in [0, 1], got {}", p.min_salient_fraction));
        }
        self.weights.validate()?;
        self.effective_contrastive().validate()?;
        self.effective_net().validate()
    }

    /// Network configuration after the variant's switches.
    pub fn effective_net(&self) -> NetConfig {
        self.variant.apply_net(self.net.clone())
    }

    pub fn effective_contrastive(&self) -> ContrastiveConfig {
        self.variant.apply_contrastive(self.contrastive.clone())
    }
}
