//! Marker prompts and the versioned prompt bank.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const BUILTIN_BANK: &str = include_str!("../../data/prompt_bank.json");

/// Stain targets the model can be asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Marker {
    #[serde(rename = "NUCLEAR")]
    Nuclear,
    #[serde(rename = "CYTO")]
    Cyto,
}

impl Marker {
    pub const ALL: [Marker; 2] = [Marker::Nuclear, Marker::Cyto];

    pub fn as_str(self) -> &'static str {
        match self {
            Marker::Nuclear => "NUCLEAR",
            Marker::Cyto => "CYTO",
        }
    }

    pub fn known_list() -> String {
        Marker::ALL
            .iter()
            .map(|m| m.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Marker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NUCLEAR" => Ok(Marker::Nuclear),
            "CYTO" => Ok(Marker::Cyto),
            _ => Err(Error::UnknownMarker {
                got: s.to_string(),
                known: Marker::known_list(),
            }),
        }
    }
}

/// Prompt length/style families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptMode {
    SP,
    MP,
    LP,
    MxP,
    Num,
}

impl PromptMode {
    pub const ALL: [PromptMode; 5] = [
        PromptMode::SP,
        PromptMode::MP,
        PromptMode::LP,
        PromptMode::MxP,
        PromptMode::Num,
    ];

    /// Modes with concrete templates in the bank.
    pub const CONCRETE: [PromptMode; 4] =
        [PromptMode::SP, PromptMode::MP, PromptMode::LP, PromptMode::Num];

    /// Modes a mixed prompt resolves to.
    pub const MIXED_POOL: [PromptMode; 3] = [PromptMode::SP, PromptMode::MP, PromptMode::LP];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::SP => "SP",
            PromptMode::MP => "MP",
            PromptMode::LP => "LP",
            PromptMode::MxP => "MxP",
            PromptMode::Num => "Num",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown prompt mode `{s}` (SP, MP, LP, MxP, Num)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POSITIVE")]
    Positive,
    #[serde(rename = "NEGATIVE")]
    Negative,
}

impl Polarity {
    pub fn of_tile(is_negative: bool) -> Self {
        if is_negative {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "POSITIVE",
            Polarity::Negative => "NEGATIVE",
        }
    }
}

/// A text prompt tagged with what it asks for.
///
/// `MxP` prompts carry a reference (`mxp:<MARKER>:<POLARITY>`) instead of final
/// text; [`PromptBank::resolve`] turns them into a concrete prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub marker: Marker,
    pub mode: PromptMode,
    pub polarity: Polarity,
    pub text: String,
}

impl PromptSpec {
    pub fn is_reference(&self) -> bool {
        self.mode == PromptMode::MxP
    }

    fn reference(marker: Marker, polarity: Polarity) -> Self {
        PromptSpec {
            marker,
            mode: PromptMode::MxP,
            polarity,
            text: format!("mxp:{}:{}", marker.as_str(), polarity.as_str()),
        }
    }
}

type Templates = BTreeMap<Marker, BTreeMap<Polarity, BTreeMap<PromptMode, Vec<String>>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptBank {
    pub version: String,
    #[serde(default)]
    pub note: String,
    pub templates: Templates,
}

impl PromptBank {
    /// The bank compiled into the library.
    pub fn builtin() -> &'static PromptBank {
        static BANK: OnceLock<PromptBank> = OnceLock::new();
        BANK.get_or_init(|| PromptBank::from_json(BUILTIN_BANK).expect("builtin prompt bank is valid"))
    }

    pub fn builtin_json() -> &'static str {
        BUILTIN_BANK
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let bank: PromptBank = serde_json::from_str(s)?;
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        if self.version.is_empty() {
            return Err(Error::config("prompt bank has no version"));
        }
        for marker in Marker::ALL {
            for polarity in [Polarity::Positive, Polarity::Negative] {
                for mode in PromptMode::CONCRETE {
                    let list = self.list(marker, mode, polarity)?;
                    if list.len() < 4 {
                        return Err(Error::config(format!(
                            "prompt bank needs >= 4 templates for {marker}/{mode}/{}",
                            polarity.as_str()
                        )));
                    }
                    if list.iter().any(|t| t.trim().is_empty()) {
                        return Err(Error::config("prompt bank contains an empty template"));
                    }
                    if mode == PromptMode::Num
                        && list
                            .iter()
                            .any(|t| !t.chars().all(|c| c.is_ascii_digit() || c == ' '))
                    {
                        return Err(Error::config("numeric prompts may contain only digits"));
                    }
                }
            }
        }
        Ok(())
    }

    fn list(&self, marker: Marker, mode: PromptMode, polarity: Polarity) -> Result<&[String]> {
        self.templates
            .get(&marker)
            .and_then(|p| p.get(&polarity))
            .and_then(|m| m.get(&mode))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::config(format!(
                    "prompt bank has no templates for {marker}/{mode}/{}",
                    polarity.as_str()
                ))
            })
    }

    /// Canonical prompt for the triple: the first template, or a mixed reference.
    pub fn build_prompt(&self, marker: Marker, mode: PromptMode, polarity: Polarity) -> Result<PromptSpec> {
        if mode == PromptMode::MxP {
            return Ok(PromptSpec::reference(marker, polarity));
        }
        let text = self.list(marker, mode, polarity)?[0].clone();
        Ok(PromptSpec {
            marker,
            mode,
            polarity,
            text,
        })
    }

    /// A randomly chosen template; mixed mode still yields a reference.
    pub fn sample<R: Rng>(
        &self,
        marker: Marker,
        mode: PromptMode,
        polarity: Polarity,
        rng: &mut R,
    ) -> Result<PromptSpec> {
        if mode == PromptMode::MxP {
            return Ok(PromptSpec::reference(marker, polarity));
        }
        let list = self.list(marker, mode, polarity)?;
        Ok(PromptSpec {
            marker,
            mode,
            polarity,
            text: list[rng.random_range(0..list.len())].clone(),
        })
    }

    /// Resolves a mixed reference to a concrete SP/MP/LP prompt. Concrete
    /// prompts are returned unchanged.
    pub fn resolve<R: Rng>(&self, spec: &PromptSpec, rng: &mut R) -> Result<PromptSpec> {
        if !spec.is_reference() {
            return Ok(spec.clone());
        }
        let mode = PromptMode::MIXED_POOL[rng.random_range(0..PromptMode::MIXED_POOL.len())];
        self.sample(spec.marker, mode, spec.polarity, rng)
    }

    /// Every concrete template text, in a fixed order.
    pub fn all_texts(&self) -> Vec<&str> {
        self.templates
            .values()
            .flat_map(|p| p.values())
            .flat_map(|m| m.values())
            .flatten()
            .map(String::as_str)
            .collect()
    }
}

/// Canonical prompt from the builtin bank.
pub fn build_prompt(marker: Marker, mode: PromptMode, polarity: Polarity) -> Result<PromptSpec> {
    PromptBank::builtin().build_prompt(marker, mode, polarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    #[test]
    fn short_prompt_is_a_fixed_bank_entry() {
        let p = build_prompt(Marker::Nuclear, PromptMode::SP, Polarity::Positive).unwrap();
        assert_eq!(p.text, "nuclear marker stain");
        assert_eq!(p, build_prompt(Marker::Nuclear, PromptMode::SP, Polarity::Positive).unwrap());
    }

    #[test]
    fn numeric_prompts_come_from_numeric_vocabulary() {
        let bank = PromptBank::builtin();
        let p = build_prompt(Marker::Cyto, PromptMode::Num, Polarity::Positive).unwrap();
        assert!(p.text.chars().all(|c| c.is_ascii_digit() || c == ' '));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = bank
                .sample(Marker::Cyto, PromptMode::Num, Polarity::Positive, &mut rng)
                .unwrap();
            assert!(bank.templates[&Marker::Cyto][&Polarity::Positive][&PromptMode::Num].contains(&s.text));
        }
    }

    #[test]
    fn mixed_prompts_cover_short_medium_long() {
        let bank = PromptBank::builtin();
        let reference = build_prompt(Marker::Nuclear, PromptMode::MxP, Polarity::Positive).unwrap();
        assert!(reference.is_reference());
        assert!(!reference.text.is_empty());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut counts = BTreeMap::new();
        for _ in 0..300 {
            let r = bank.resolve(&reference, &mut rng).unwrap();
            assert_eq!(r.marker, Marker::Nuclear);
            *counts.entry(r.mode).or_insert(0) += 1;
        }
        for mode in PromptMode::MIXED_POOL {
            assert!(counts.get(&mode).copied().unwrap_or(0) >= 1, "{mode} never drawn");
        }
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn unknown_marker_lists_known_ones() {
        let err = "CDX9".parse::<Marker>().unwrap_err().to_string();
        assert!(err.contains("NUCLEAR") && err.contains("CYTO"), "{err}");
        assert_eq!("cyto".parse::<Marker>().unwrap(), Marker::Cyto);
    }

    #[test]
    fn bank_rejects_short_template_lists() {
        let mut bank: PromptBank = serde_json::from_str(PromptBank::builtin_json()).unwrap();
        bank.templates
            .get_mut(&Marker::Cyto)
            .unwrap()
            .get_mut(&Polarity::Negative)
            .unwrap()
            .insert(PromptMode::LP, vec!["a".into()]);
        let s = serde_json::to_string(&bank).unwrap();
        assert!(PromptBank::from_json(&s).is_err());
    }
}
