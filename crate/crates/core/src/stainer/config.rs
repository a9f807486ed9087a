use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Marker;

/// Layers that receive low-rank adapters, grouped by sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTargets {
    pub encoder: Vec<String>,
    pub unet: Vec<String>,
    pub decoder: Vec<String>,
}

impl Default for LoraTargets {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            encoder: s(&["enc.down0", "enc.down1", "enc.out"]),
            unet: s(&[
                "unet.cond",
                "unet.d0.conv1",
                "unet.d0.conv2",
                "unet.d0.film",
                "unet.down0",
                "unet.mid.conv1",
                "unet.mid.conv2",
                "unet.mid.film",
                "unet.up0",
                "unet.u0.conv1",
                "unet.u0.conv2",
                "unet.u0.film",
                "unet.out",
            ]),
            decoder: s(&["dec.in", "dec.up1", "dec.up0"]),
        }
    }
}

impl LoraTargets {
    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.encoder
            .iter()
            .chain(&self.unet)
            .chain(&self.decoder)
            .map(String::as_str)
    }
}

/// Architecture hyperparameters of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tile_size: usize,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    /// Width of the first encoder stage; each stride-2 stage doubles it.
    pub encoder_width: usize,
    pub unet_widths: Vec<usize>,
    pub text_embed_dim: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub noise_sigma: f64,
    pub timestep_index: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: LoraTargets,
    pub markers: Vec<Marker>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            downsample_factor: 4,
            latent_channels: 8,
            encoder_width: 16,
            unet_widths: vec![48, 96],
            text_embed_dim: 32,
            time_embed_dim: 32,
            cond_dim: 64,
            noise_sigma: 0.5,
            timestep_index: 999,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_targets: LoraTargets::default(),
            markers: Marker::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    /// Number of stride-2 encoder stages.
    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.tile_size / self.downsample_factor
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..=self.stages()).map(|i| self.encoder_width << i).collect()
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.downsample_factor;
        if d < 2 || !d.is_power_of_two() {
            return Err(Error::config(format!("downsample_factor must be a power of two >= 2, got {d}")));
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(d) {
            return Err(Error::config(format!(
                "tile_size {} is not divisible by downsample_factor {d}",
                self.tile_size
            )));
        }
        if self.unet_widths.is_empty() || self.unet_widths.contains(&0) {
            return Err(Error::config("unet_widths must be non-empty and positive"));
        }
        let levels = 1usize << (self.unet_widths.len() - 1);
        if !self.latent_size().is_multiple_of(levels) {
            return Err(Error::config(format!(
                "latent size {} is not divisible by 2^{}",
                self.latent_size(),
                self.unet_widths.len() - 1
            )));
        }
        if self.latent_channels == 0 || self.encoder_width == 0 || self.cond_dim == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.text_embed_dim == 0 || self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("embedding sizes must be positive (time embedding even)"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be >= 1"));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::config("lora_alpha must be positive"));
        }
        if self.markers.is_empty() {
            return Err(Error::config("at least one marker is required"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_shapes_follow() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stages(), 2);
        assert_eq!(c.latent_size(), 16);
        assert_eq!(c.encoder_widths(), vec![16, 32, 64]);
        assert_eq!(c.lora_scale(), 2.0);
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = [
            ModelConfig { tile_size: 66, ..Default::default() },
            ModelConfig { lora_rank: 0, ..Default::default() },
            ModelConfig { noise_sigma: -0.1, ..Default::default() },
            ModelConfig { downsample_factor: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
