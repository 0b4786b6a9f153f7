//! Configuration types and validation.
//!
//! Everything a run needs is collected in [`RunConfig`], which (de)serializes
//! to TOML for the CLI `--config` flag and is embedded verbatim in checkpoints
//! and reports so results stay reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which backbone builds the shared feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Small 4-block CNN, spatial stride 8. Trains in minutes on CPU.
    Toy,
    /// Deeper residual CNN with the final stage's down-sampling removed,
    /// spatial stride 16.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Channels of the output feature map.
    pub output_channels: usize,
    /// Total spatial down-sampling factor from input pixels to feature map.
    pub spatial_stride: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::Toy,
            output_channels: 256,
            spatial_stride: 8,
            input_height: 384,
            input_width: 128,
        }
    }
}

impl BackboneConfig {
    pub fn paper() -> Self {
        BackboneConfig {
            variant: BackboneVariant::Paper,
            output_channels: 2048,
            spatial_stride: 16,
            ..Default::default()
        }
    }

    /// Feature-map height/width for the configured input size.
    pub fn feature_hw(&self) -> (usize, usize) {
        (
            self.input_height / self.spatial_stride,
            self.input_width / self.spatial_stride,
        )
    }

    pub fn validate(&self, parts: usize) -> Result<()> {
        let stride_ok = match self.variant {
            BackboneVariant::Toy => self.spatial_stride.is_power_of_two() && self.spatial_stride >= 2,
            BackboneVariant::Paper => self.spatial_stride == 16,
        };
        if !stride_ok {
            return Err(Error::config(format!(
                "unsupported spatial stride {} for {:?} backbone",
                self.spatial_stride, self.variant
            )));
        }
        if self.input_height % self.spatial_stride != 0 || self.input_width % self.spatial_stride != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by stride {}",
                self.input_height, self.input_width, self.spatial_stride
            )));
        }
        let (h, w) = self.feature_hw();
        if h == 0 || w == 0 {
            return Err(Error::config("input too small for backbone stride"));
        }
        if parts == 0 || h % parts != 0 {
            return Err(Error::config(format!(
                "feature-map height {h} not divisible by part count {parts}"
            )));
        }
        if self.output_channels == 0 {
            return Err(Error::config("output_channels must be positive"));
        }
        if self.variant == BackboneVariant::Paper && self.output_channels % 8 != 0 {
            return Err(Error::config(
                "paper backbone needs output_channels divisible by 8 (stage widths C/8..C)",
            ));
        }
        Ok(())
    }
}

/// How the global feature used at inference is formed. `PairAdaptive` is the
/// full method; the others exist for the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    /// No global branch at all (part distance only).
    None,
    /// Global average pooling over the (possibly attended) feature map.
    Gap,
    /// Quality-weighted single-image pooling.
    SingleImage,
    /// Pair-adaptive aggregation with normalized quality products.
    PairAdaptive,
}

/// Per-term switches for the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub part_id: bool,
    pub part_triplet: bool,
    pub global_id: bool,
    pub pair_id: bool,
    pub global_triplet: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            part_id: true,
            part_triplet: true,
            global_id: true,
            pair_id: true,
            global_triplet: true,
        }
    }
}

impl LossToggles {
    pub fn none() -> Self {
        LossToggles {
            part_id: false,
            part_triplet: false,
            global_id: false,
            pair_id: false,
            global_triplet: false,
        }
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        match name {
            "part_id" => self.part_id = on,
            "part_triplet" | "part_tp" => self.part_triplet = on,
            "global_id" => self.global_id = on,
            "pair_id" | "sg_id" => self.pair_id = on,
            "global_triplet" | "global_tp" => self.global_triplet = on,
            other => return Err(Error::config(format!("unknown loss toggle `{other}`"))),
        }
        Ok(())
    }
}

/// Structural ablation switches. Stored in the checkpoint so inference always
/// matches the configuration the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// When false every quality score is pinned to 1 (plain stripe baseline).
    pub learn_quality: bool,
    /// Identity-aware spatial attention on the global feature map.
    pub use_attention: bool,
    pub global_mode: GlobalMode,
    /// Include the self-pair `(l, l)` terms in the pairwise identity loss.
    pub pair_loss_diagonal: bool,
    pub losses: LossToggles,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            learn_quality: true,
            use_attention: true,
            global_mode: GlobalMode::PairAdaptive,
            pair_loss_diagonal: true,
            losses: LossToggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of horizontal part stripes `K`.
    pub parts: usize,
    /// Part embedding dimension `d`.
    pub embed_dim: usize,
    /// Channels of the global feature map (defaults to `embed_dim`).
    pub global_dim: usize,
    /// Bottleneck reduction ratio of the excitation layers.
    pub reduction: usize,
    /// Whether the two excitation layers carry bias terms.
    pub excite_bias: bool,
    /// Identity classes the classifiers were built for.
    pub num_classes: usize,
    /// Guard added to cosine and quality-sum denominators.
    pub eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Per-channel normalization applied to input pixels.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    pub ablation: AblationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            parts: 6,
            embed_dim: 1024,
            global_dim: 1024,
            reduction: 4,
            excite_bias: true,
            num_classes: 1,
            eps: 1e-8,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            pixel_mean: [0.5; 3],
            pixel_std: [0.5; 3],
            ablation: AblationConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate(self.parts)?;
        if self.embed_dim == 0 || self.global_dim == 0 {
            return Err(Error::config("embed_dim and global_dim must be positive"));
        }
        if self.reduction == 0 || self.global_dim % self.reduction != 0 {
            return Err(Error::config(format!(
                "global_dim {} not divisible by reduction ratio {}",
                self.global_dim, self.reduction
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if !(self.eps > 0.0) || !(self.bn_eps > 0.0) {
            return Err(Error::config("eps guards must be positive"));
        }
        if self.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("pixel_std entries must be positive"));
        }
        Ok(())
    }

    /// Stripe height of the feature map.
    pub fn stripe_height(&self) -> usize {
        self.backbone.feature_hw().0 / self.parts
    }
}

/// Random-erasing augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EraseParams {
    pub probability: f64,
    /// Erased-area fraction range of the whole image.
    pub area_range: (f64, f64),
    /// Aspect ratio (h/w) range of the erased rectangle.
    pub aspect_range: (f64, f64),
    /// Fill value in normalized pixel units.
    pub fill: f64,
}

impl Default for EraseParams {
    fn default() -> Self {
        EraseParams {
            probability: 0.5,
            area_range: (0.02, 0.4),
            aspect_range: (0.3, 3.3),
            fill: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Identities per batch.
    pub identities_per_batch: usize,
    /// Images sampled per identity.
    pub images_per_identity: usize,
    /// Triplet margin.
    pub margin: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_period: usize,
    /// Plain SGD by default; enabling momentum is a documented deviation knob.
    pub momentum_enabled: bool,
    pub momentum: f64,
    pub horizontal_flip: bool,
    pub erase: EraseParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            identities_per_batch: 8,
            images_per_identity: 8,
            margin: 0.3,
            epochs: 70,
            base_lr: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_period: 20,
            momentum_enabled: false,
            momentum: 0.9,
            horizontal_flip: true,
            erase: EraseParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.images_per_identity
    }

    /// Learning rate in force at a zero-based epoch index.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = epoch / self.lr_decay_period.max(1);
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_batch < 2 || self.images_per_identity < 2 {
            return Err(Error::config(
                "triplet mining needs at least 2 identities per batch and 2 images per identity",
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("triplet margin must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("learning-rate settings must be positive"));
        }
        let e = &self.erase;
        if !(0.0..=1.0).contains(&e.probability)
            || e.area_range.0 <= 0.0
            || e.area_range.0 > e.area_range.1
            || e.area_range.1 > 1.0
            || e.aspect_range.0 <= 0.0
            || e.aspect_range.0 > e.aspect_range.1
        {
            return Err(Error::config("invalid random-erasing parameters"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Stage-1 candidate count re-ranked by the blended distance.
    pub top_n: usize,
    /// Weight of the part distance in the blended distance.
    pub gamma: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { top_n: 30, gamma: 0.6 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 {
            return Err(Error::config("top_n must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Top-level configuration file contents.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.retrieval.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
