//! The AC-CovidNet architecture as configurable building blocks.
//!
//! The network decomposes into an encoder E (PEPX stages with attention
//! gates, ending in a 1024-d feature vector), a projection head P (1024 ->
//! 512 -> 128, unit-normalized) used only during contrastive training, and a
//! classifier C (the last three layers, softmax over 3 classes).

mod attention;
mod encoder;
mod heads;
mod pepx;

pub use attention::{
    attention_gate_forward, attention_gate_forward_cached, attention_gate_backward,
    attention_gate_init_params, attention_gate_param_count, AttentionGateCache,
};
pub use encoder::{
    encoder_backward, encoder_forward, encoder_forward_cached, encoder_init_params,
    encoder_param_count, EncoderCache,
};
pub use heads::{
    classifier_backward, classifier_forward, classifier_forward_cached, classifier_init_params,
    classifier_param_count, projection_backward, projection_forward, projection_forward_cached,
    projection_init_params, projection_param_count, ClassifierCache, ProjectionCache,
    ProjectionOutput,
};
pub use pepx::{
    pepx_backward, pepx_forward, pepx_forward_cached, pepx_init_params, pepx_param_count,
    pepx_weight_count, PepxCache,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel plan of one PEPX block: two 1x1 projections bracketing a 3x3
/// depthwise conv, closed by a 1x1 extension. Layer order is
/// conv1x1 (in -> proj1), conv1x1 (proj1 -> expand), DWConv3x3 (expand),
/// conv1x1 (expand -> proj2), conv1x1 (proj2 -> out), ReLU after each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PEPXConfig {
    pub in_channels: usize,
    pub proj1_channels: usize,
    pub proj2_channels: usize,
    pub expand_channels: usize,
    pub out_channels: usize,
}

impl PEPXConfig {
    pub fn new(
        in_channels: usize,
        proj1_channels: usize,
        proj2_channels: usize,
        expand_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let cfg = Self { in_channels, proj1_channels, proj2_channels, expand_channels, out_channels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("proj1_channels", self.proj1_channels),
            ("proj2_channels", self.proj2_channels),
            ("expand_channels", self.expand_channels),
            ("out_channels", self.out_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("PEPX {name} must be >= 1")));
            }
        }
        if self.proj1_channels > self.in_channels {
            return Err(Error::Config(format!(
                "PEPX proj1_channels {} exceeds in_channels {}",
                self.proj1_channels, self.in_channels
            )));
        }
        if self.proj2_channels > self.expand_channels {
            return Err(Error::Config(format!(
                "PEPX proj2_channels {} exceeds expand_channels {}",
                self.proj2_channels, self.expand_channels
            )));
        }
        Ok(())
    }

    /// Channel plan used by the encoder for a block mapping `in_ch` to
    /// `out_ch`: project to half the input width, expand to 3/4 of the
    /// output width, project to half the output width.
    pub fn derived(in_ch: usize, out_ch: usize) -> Self {
        let expand = (3 * out_ch / 4).max(1);
        Self {
            in_channels: in_ch,
            proj1_channels: (in_ch / 2).max(1),
            proj2_channels: (out_ch / 2).max(1).min(expand),
            expand_channels: expand,
            out_channels: out_ch,
        }
    }
}

/// How the attention coefficients modulate the skip features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// out = alpha (.) x  — the gating mechanism of the cited design.
    #[default]
    Multiplicative,
    /// out = x (+) alpha broadcast over channels.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGateConfig {
    pub x_channels: usize,
    pub g_channels: usize,
    pub inter_channels: usize,
    #[serde(default)]
    pub combine_mode: CombineMode,
}

impl AttentionGateConfig {
    pub fn new(x_channels: usize, g_channels: usize, inter_channels: usize) -> Result<Self> {
        let cfg = Self { x_channels, g_channels, inter_channels, combine_mode: CombineMode::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_combine_mode(mut self, mode: CombineMode) -> Self {
        self.combine_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_channels == 0 || self.g_channels == 0 || self.inter_channels == 0 {
            return Err(Error::Config("attention gate channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One encoder stage: a chain of PEPX blocks at a fixed width, optionally
/// closed by an attention gate, always followed by 2x max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub pepx_count: usize,
    pub out_channels: usize,
    pub attention_gate: bool,
}

impl StageConfig {
    pub fn new(pepx_count: usize, out_channels: usize, attention_gate: bool) -> Self {
        Self { pepx_count, out_channels, attention_gate }
    }
}

/// Width of the encoder output vector, fixed by the architecture.
pub const FEATURE_DIM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub feature_dim: usize,
    #[serde(default)]
    pub combine_mode: CombineMode,
}

impl Default for EncoderConfig {
    /// Full-scale default: 224x224x3 input, a 7x7 stem, four stages of
    /// (3, 4, 6, 3) PEPX blocks at widths (64, 128, 256, 512) with attention
    /// gates on stages 2-4, global average pooling and a dense layer to 1024.
    fn default() -> Self {
        Self {
            input_height: 224,
            input_width: 224,
            input_channels: 3,
            stem_channels: 64,
            stages: vec![
                StageConfig::new(3, 64, false),
                StageConfig::new(4, 128, true),
                StageConfig::new(6, 256, true),
                StageConfig::new(3, 512, true),
            ],
            feature_dim: FEATURE_DIM,
            combine_mode: CombineMode::Multiplicative,
        }
    }
}

impl EncoderConfig {
    /// A small configuration for tests and synthetic-data runs.
    pub fn desk(input_height: usize, input_width: usize) -> Self {
        Self {
            input_height,
            input_width,
            input_channels: 3,
            stem_channels: 8,
            stages: vec![StageConfig::new(2, 16, false), StageConfig::new(2, 32, true)],
            feature_dim: FEATURE_DIM,
            combine_mode: CombineMode::Multiplicative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Config("encoder input dimensions must be >= 1".into()));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be >= 1".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.pepx_count == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!(
                    "stage {} must have pepx_count and out_channels >= 1",
                    i + 1
                )));
            }
        }
        if self.feature_dim != FEATURE_DIM {
            return Err(Error::Config(format!(
                "feature_dim is fixed at {FEATURE_DIM}, got {}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionHeadConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ProjectionHeadConfig {
    fn default() -> Self {
        Self { input_dim: 1024, hidden_dim: 512, output_dim: 128 }
    }
}

impl ProjectionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("projection head dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Widths of the last three layers; the final entry equals num_classes.
    pub layer_dims: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { input_dim: 1024, num_classes: 3, layer_dims: vec![256, 64, 3] }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("classifier dims must be >= 1".into()));
        }
        if self.layer_dims.len() != 3 {
            return Err(Error::Config(format!(
                "classifier expects exactly 3 layer widths, got {}",
                self.layer_dims.len()
            )));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("classifier layer widths must be >= 1".into()));
        }
        if *self.layer_dims.last().unwrap() != self.num_classes {
            return Err(Error::Config(format!(
                "final classifier width {} must equal num_classes {}",
                self.layer_dims.last().unwrap(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// The complete architecture description: encoder, projection head and
/// classifier. Serializes to TOML for the config-file interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub projection: ProjectionHeadConfig,
    pub classifier: ClassifierConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            projection: ProjectionHeadConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn desk(input_height: usize, input_width: usize) -> Self {
        Self { encoder: EncoderConfig::desk(input_height, input_width), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projection.validate()?;
        self.classifier.validate()?;
        if self.projection.input_dim != self.encoder.feature_dim {
            return Err(Error::Config(format!(
                "projection input_dim {} must equal encoder feature_dim {}",
                self.projection.input_dim, self.encoder.feature_dim
            )));
        }
        if self.classifier.input_dim != self.encoder.feature_dim {
            return Err(Error::Config(format!(
                "classifier input_dim {} must equal encoder feature_dim {}",
                self.classifier.input_dim, self.encoder.feature_dim
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config deserialization: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
