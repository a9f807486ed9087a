use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::losses::LossWeights;
use crate::error::{Error, Result};
use crate::synthdata::{Marker, PromptMode};

/// Prompt regime of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainMode {
    SP,
    MP,
    LP,
    MxP,
    Num,
    /// Single marker, positive tiles only, mixed prompts.
    SMPP,
    /// Single marker, positive and negative tiles, mixed prompts.
    SMP,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::SP,
        TrainMode::MP,
        TrainMode::LP,
        TrainMode::MxP,
        TrainMode::Num,
        TrainMode::SMPP,
        TrainMode::SMP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SP => "SP",
            TrainMode::MP => "MP",
            TrainMode::LP => "LP",
            TrainMode::MxP => "MxP",
            TrainMode::Num => "Num",
            TrainMode::SMPP => "SMPP",
            TrainMode::SMP => "SMP",
        }
    }

    /// Prompt family drawn during training.
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            TrainMode::SP => PromptMode::SP,
            TrainMode::MP => PromptMode::MP,
            TrainMode::LP => PromptMode::LP,
            TrainMode::Num => PromptMode::Num,
            TrainMode::MxP | TrainMode::SMPP | TrainMode::SMP => PromptMode::MxP,
        }
    }

    /// Prompt family used at inference: mixed-prompt models are queried with short prompts.
    pub fn eval_prompt_mode(self) -> PromptMode {
        match self.prompt_mode() {
            PromptMode::MxP => PromptMode::SP,
            m => m,
        }
    }

    pub fn single_marker(self) -> bool {
        matches!(self, TrainMode::SMPP | TrainMode::SMP)
    }

    pub fn uses_negatives(self) -> bool {
        self != TrainMode::SMPP
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::config(format!("unknown prompt mode `{s}` (SP, MP, LP, MxP, Num, SMPP, SMP)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub w_adv: f64,
    pub w_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub prompt_mode: TrainMode,
    /// Marker used by the single-marker modes.
    pub single_marker: Marker,
    /// Accept a pair encoder that failed (or skipped) its retrieval check.
    pub allow_unvalidated: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w_adv: 0.4,
            w_clip: 4.0,
            batch_size: 1,
            total_steps: 5000,
            lr_generator: 1e-4,
            lr_discriminator: 2e-4,
            seed: 0,
            checkpoint_every: 1000,
            prompt_mode: TrainMode::MxP,
            single_marker: Marker::Nuclear,
            allow_unvalidated: false,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_clip: self.w_clip,
            w_adv: self.w_adv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_adv >= 0.0 && self.w_clip >= 0.0) || !self.w_adv.is_finite() || !self.w_clip.is_finite() {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(format!("{name} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse_and_map() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().to_lowercase().parse::<TrainMode>().unwrap(), m);
        }
        assert_eq!(TrainMode::SMPP.prompt_mode(), PromptMode::MxP);
        assert_eq!(TrainMode::MxP.eval_prompt_mode(), PromptMode::SP);
        assert_eq!(TrainMode::Num.eval_prompt_mode(), PromptMode::Num);
        assert!(!TrainMode::SMPP.uses_negatives() && TrainMode::SMP.uses_negatives());
        assert!("XYZ".parse::<TrainMode>().is_err());
    }

    #[test]
    fn defaults_follow_the_weighting() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.w_adv, c.w_clip, c.batch_size), (0.4, 4.0, 1));
        assert!(TrainConfig { total_steps: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { w_adv: -1.0, ..c }.validate().is_err());
    }
}
