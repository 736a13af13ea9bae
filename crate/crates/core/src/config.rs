//! Architecture hyperparameters of the update rule.

use cellseg_tensor::NormKind;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Raw image channels (RGB).
pub const IMAGE_CHANNELS: usize = 3;
/// Channels produced by the stride-2 image encoder.
pub const ENCODED_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLayer {
    /// Dense 3×3 convolution straight to the hidden width.
    #[serde(rename = "full3x3")]
    Full3x3,
    /// Depthwise 3×3 on the input channels, then a 1×1 projection to the hidden width.
    #[serde(rename = "depthwise_then_1x1")]
    DepthwiseThen1x1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub cell_size: usize,
    pub hidden_size: usize,
    pub first_layer: FirstLayer,
    pub norm_kind: NormKind,
    pub residual: bool,
    pub resettable: bool,
    pub num_classes: usize,
    pub update_prob: f64,
    pub freeze_spatial_filters: bool,
    pub resolution_factor: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            cell_size: 48,
            hidden_size: 64,
            first_layer: FirstLayer::Full3x3,
            norm_kind: NormKind::Instance,
            residual: true,
            resettable: true,
            num_classes: 3,
            update_prob: 0.5,
            freeze_spatial_filters: false,
            resolution_factor: 1,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.cell_size == 0 {
            bad.push("cell_size must be >= 1".to_string());
        }
        if self.hidden_size == 0 {
            bad.push("hidden_size must be >= 1".to_string());
        }
        if self.num_classes < 2 {
            bad.push("num_classes must be >= 2".to_string());
        }
        if !(0.0..=1.0).contains(&self.update_prob) {
            bad.push(format!("update_prob {} not in [0, 1]", self.update_prob));
        }
        if !matches!(self.resolution_factor, 1 | 2) {
            bad.push(format!(
                "resolution_factor {} must be 1 or 2",
                self.resolution_factor
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CoreError::config(bad.join("; ")))
        }
    }

    /// Channels the environment contributes to the layer-1 input.
    pub fn env_channels(&self) -> usize {
        if self.resolution_factor == 2 {
            ENCODED_CHANNELS
        } else {
            IMAGE_CHANNELS
        }
    }

    /// Width of the layer-1 input: state concatenated with the environment.
    pub fn input_channels(&self) -> usize {
        self.cell_size + self.env_channels()
    }

    pub fn has_adapters(&self) -> bool {
        self.resolution_factor == 2
    }

    /// State extent for a given image extent.
    pub fn state_extent(&self, image_extent: usize) -> Result<usize> {
        if image_extent % self.resolution_factor != 0 {
            return Err(CoreError::config(format!(
                "image extent {image_extent} not divisible by resolution factor {}",
                self.resolution_factor
            )));
        }
        Ok(image_extent / self.resolution_factor)
    }
}
