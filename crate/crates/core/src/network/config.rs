use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowops::{offset_channels, reduced_channels, NormConstants, UpsampleMode};

/// Where the residual branch places its 2× transposed convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleVariant {
    /// After all four conv stack units.
    Late,
    /// Between units 2 and 3.
    Mid,
    /// Before all units.
    #[default]
    Early,
}

impl UpsampleVariant {
    /// Number of conv stack units that run before the upsample.
    pub fn units_before(self, units: usize) -> usize {
        match self {
            UpsampleVariant::Early => 0,
            UpsampleVariant::Mid => units / 2,
            UpsampleVariant::Late => units,
        }
    }
}

/// Component switches for ablation runs. All `false` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Use only the single-level cost volume at each stage.
    pub no_pyramid_mapping: bool,
    /// Skip channel normalization inside the CWN module.
    pub no_cwn_normalization: bool,
    /// Drop the residual branch; stage flows come from the CWN module alone.
    pub no_residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of coarse-to-fine stages (2 to 5). Stage features live at
    /// 1/2, 1/4, … of the input resolution.
    pub stages: usize,
    pub image_channels: usize,
    /// Subtracted from every pixel of both frames before the backbone, so
    /// features of [0, 1] images start out centered.
    pub input_mean: f64,
    /// Feature channels per pyramid level, finest first.
    pub feature_channels: Vec<usize>,
    /// Search radius of the per-level cost volumes.
    pub search_radius: usize,
    /// Search radius of the correlation against the warped features.
    pub warp_radius: usize,
    pub patch_radius: usize,
    /// Hidden widths of the flow estimator; a final 2-channel layer follows.
    pub estimator_channels: Vec<usize>,
    /// Output widths of the residual branch's conv stack units.
    pub residual_channels: Vec<usize>,
    pub upsample_variant: UpsampleVariant,
    pub upsample_mode: UpsampleMode,
    /// Channel-normalize the upsampled flow before it enters the estimator.
    pub normalize_flow: bool,
    pub norm: NormConstants,
    pub leaky_slope: f64,
    /// Internal flows are stored divided by this factor.
    pub flow_scale: f64,
    pub ablation: Ablation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stages: 3,
            image_channels: 3,
            input_mean: 0.5,
            feature_channels: vec![16, 32, 64, 96, 128],
            search_radius: 4,
            warp_radius: 4,
            patch_radius: 0,
            estimator_channels: vec![128, 96, 64, 32],
            residual_channels: vec![64, 64, 128, 256],
            upsample_variant: UpsampleVariant::Early,
            upsample_mode: UpsampleMode::Bicubic,
            normalize_flow: true,
            norm: NormConstants::default(),
            leaky_slope: 0.1,
            flow_scale: 20.0,
            ablation: Ablation::default(),
        }
    }
}

impl NetworkConfig {
    /// A reduced-width network sized for CPU training on small images.
    pub fn toy() -> Self {
        NetworkConfig {
            feature_channels: vec![8, 12, 16, 24, 32],
            estimator_channels: vec![32, 24, 16, 8],
            residual_channels: vec![8, 8, 12, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=5).contains(&self.stages) {
            return bad(format!("stages must be between 2 and 5, got {}", self.stages));
        }
        if self.feature_channels.len() < self.stages {
            return bad(format!(
                "{} stages need {} feature widths, got {}",
                self.stages,
                self.stages,
                self.feature_channels.len()
            ));
        }
        if self.residual_channels.is_empty() {
            return bad("residual_channels must not be empty".into());
        }
        let zero = |v: &[usize]| v.contains(&0);
        if self.image_channels == 0
            || zero(&self.feature_channels)
            || zero(&self.estimator_channels)
            || zero(&self.residual_channels)
        {
            return bad("channel widths must be positive".into());
        }
        if !(self.flow_scale.is_finite() && self.flow_scale > 0.0) {
            return bad(format!("flow_scale must be positive, got {}", self.flow_scale));
        }
        if !self.input_mean.is_finite() {
            return bad("input_mean must be finite".into());
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return bad(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        let n = self.norm;
        if !(n.alpha > 0.0 && n.beta > 0.0 && n.eps > 0.0) {
            return bad("normalization constants must be positive".into());
        }
        Ok(())
    }

    /// Input extents must be divisible by this (the residual branch of the
    /// coarsest stage reads one level below it).
    pub fn required_multiple(&self) -> usize {
        1 << (self.stages + 1)
    }

    /// Pyramid level (1 = finest) of stage `s` (0 = coarsest).
    pub fn level_of_stage(&self, s: usize) -> usize {
        self.stages - s
    }

    /// Channels of the mapped cost volume at each level, finest first.
    pub fn cost_channels(&self) -> Vec<usize> {
        let single = offset_channels(self.search_radius);
        let mut out = Vec::with_capacity(self.stages);
        for k in 0..self.stages {
            let c = if k == 0 || self.ablation.no_pyramid_mapping {
                single
            } else {
                single + reduced_channels(out[k - 1])
            };
            out.push(c);
        }
        out
    }

    /// Estimator input width at pyramid level `level`.
    pub fn estimator_input(&self, level: usize) -> usize {
        self.cost_channels()[level - 1]
            + offset_channels(self.warp_radius)
            + self.feature_channels[level - 1]
            + 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_channels_follow_pairwise_reduction() {
        let c = NetworkConfig::default();
        assert_eq!(c.cost_channels(), vec![81, 122, 142]);
        let sc = NetworkConfig {
            ablation: Ablation {
                no_pyramid_mapping: true,
                ..Ablation::default()
            },
            ..NetworkConfig::default()
        };
        assert_eq!(sc.cost_channels(), vec![81, 81, 81]);
    }

    #[test]
    fn estimator_width_contract() {
        let c = NetworkConfig {
            feature_channels: vec![16, 16, 16],
            ..NetworkConfig::default()
        };
        assert_eq!(c.estimator_input(2), 122 + 81 + 16 + 2);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = NetworkConfig::default();
        assert!(c.validate().is_ok());
        c.stages = 6;
        assert!(c.validate().is_err());
        c.stages = 3;
        c.feature_channels = vec![8, 8];
        assert!(c.validate().is_err());
    }
}
