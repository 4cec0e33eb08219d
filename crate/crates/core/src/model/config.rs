use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    RawPixelsNormalized,
    RawPixels,
    LowpassNormalized,
    FeatureRegression,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    #[default]
    None,
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    WeightedAverage,
    Attention,
}

/// Multi-level fusion settings. `layers` are 0-based post-block indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MffConfig {
    pub layers: Vec<usize>,
    #[serde(default)]
    pub projection: ProjectionKind,
    #[serde(default)]
    pub fusion: FusionKind,
    #[serde(default)]
    pub detach_shallow: bool,
}

impl MffConfig {
    /// `{0, 2, 4, 6, 8, 11}` at depth 12; otherwise `{0, d-1}` plus
    /// `round(k(d-1)/5)` for `k = 1..4`.
    pub fn default_layers(depth: usize) -> Vec<usize> {
        if depth == 12 {
            return vec![0, 2, 4, 6, 8, 11];
        }
        let last = depth.saturating_sub(1);
        let mut layers: Vec<usize> = (0..=5).map(|k| ((k * last) as f64 / 5.0).round() as usize).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    pub fn with_default_layers(depth: usize) -> Self {
        Self {
            layers: Self::default_layers(depth),
            projection: ProjectionKind::Linear,
            fusion: FusionKind::WeightedAverage,
            detach_shallow: false,
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let key = "model.mff.layers";
        if self.layers.is_empty() {
            return Err(Error::config(key, "must name at least one layer"));
        }
        if self.layers.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(key, "indices must be strictly increasing"));
        }
        if *self.layers.last().unwrap() != depth - 1 {
            return Err(Error::config(
                key,
                format!("must end with the last layer {}", depth - 1),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mask_ratio: f64,
    pub target_mode: TargetMode,
    pub lowpass_cutoff: f64,
    /// `None` is the plain masked autoencoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mff: Option<MffConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig {
            dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 2,
        };
        Self {
            image_size: 32,
            channels: 1,
            patch: 4,
            decoder: DecoderConfig {
                dim: 32,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
            },
            mask_ratio: 0.75,
            target_mode: TargetMode::RawPixelsNormalized,
            lowpass_cutoff: 0.5,
            mff: Some(MffConfig::with_default_layers(encoder.depth)),
            encoder,
        }
    }
}

fn positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(key, "must be positive"));
    }
    Ok(())
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn num_visible(&self) -> usize {
        super::mask::visible_count(self.num_patches(), self.mask_ratio)
    }

    /// Width of each reconstructed token.
    pub fn target_dim(&self) -> usize {
        match self.target_mode {
            TargetMode::FeatureRegression => self.encoder.dim,
            _ => self.patch_dim(),
        }
    }

    /// The fusion layer set, `{depth-1}` for the plain autoencoder.
    pub fn tap_layers(&self) -> Vec<usize> {
        match &self.mff {
            Some(m) => m.layers.clone(),
            None => vec![self.encoder.depth - 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("model.image_size", self.image_size)?;
        positive("model.channels", self.channels)?;
        positive("model.patch", self.patch)?;
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::config(
                "model.patch",
                format!("image size {} not divisible by patch {}", self.image_size, self.patch),
            ));
        }
        for (name, dim, depth, heads, ratio) in [
            (
                "encoder",
                self.encoder.dim,
                self.encoder.depth,
                self.encoder.heads,
                self.encoder.mlp_ratio,
            ),
            (
                "decoder",
                self.decoder.dim,
                self.decoder.depth,
                self.decoder.heads,
                self.decoder.mlp_ratio,
            ),
        ] {
            positive(&format!("model.{name}.dim"), dim)?;
            positive(&format!("model.{name}.depth"), depth)?;
            positive(&format!("model.{name}.heads"), heads)?;
            positive(&format!("model.{name}.mlp_ratio"), ratio)?;
            if dim % heads != 0 {
                return Err(Error::config(
                    format!("model.{name}.heads"),
                    format!("dim {dim} not divisible by {heads} heads"),
                ));
            }
            if dim % 4 != 0 {
                return Err(Error::config(format!("model.{name}.dim"), "must be divisible by 4"));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("model.mask_ratio", "must lie in (0, 1)"));
        }
        let vis = self.num_visible();
        if vis == 0 || vis == self.num_patches() {
            return Err(Error::config(
                "model.mask_ratio",
                format!("leaves {vis} of {} patches visible", self.num_patches()),
            ));
        }
        if !(self.lowpass_cutoff > 0.0 && self.lowpass_cutoff <= 1.0) {
            return Err(Error::config("model.lowpass_cutoff", "must lie in (0, 1]"));
        }
        if let Some(m) = &self.mff {
            m.validate(self.encoder.depth)?;
        }
        Ok(())
    }
}
