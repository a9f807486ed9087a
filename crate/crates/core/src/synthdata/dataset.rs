//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json      index: spec, seeds, prompt-bank version, file paths
//! <root>/prompt_bank.json   copy of the bank the prompts were drawn from
//! <root>/tiles/<seed>_*.png lossless rasters
//! ```
//! All paths inside the manifest are relative to the root.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::prompts::{Marker, PromptBank, PromptSpec};
use super::tissue::{SampleRecord, TissueSpec};
use crate::error::{Error, Result};
use crate::image::{load_mask, load_tile, save_mask, save_tile};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROMPT_BANK_FILE: &str = "prompt_bank.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordFiles {
    pub input: String,
    pub targets: BTreeMap<Marker, String>,
    pub gland_mask: String,
    pub nuclei_mask: String,
    pub cytoplasm_mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub seed: u64,
    pub is_negative: bool,
    pub prompts: Vec<PromptSpec>,
    pub files: RecordFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub prompt_bank_version: String,
    pub prompt_bank_file: String,
    pub spec: TissueSpec,
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    pub fn negative_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_negative).count()
    }
}

fn tile_name(seed: u64, part: &str) -> String {
    format!("tiles/{seed:016x}_{part}.png")
}

/// Writes records and returns the manifest. The manifest is written last, so a
/// directory with a manifest is complete.
pub fn write_dataset(records: &[SampleRecord], spec: &TissueSpec, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir.join("tiles"))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let files = RecordFiles {
            input: tile_name(r.seed, "input"),
            targets: r
                .targets
                .keys()
                .map(|m| (*m, tile_name(r.seed, &m.as_str().to_ascii_lowercase())))
                .collect(),
            gland_mask: tile_name(r.seed, "gland"),
            nuclei_mask: tile_name(r.seed, "nuclei"),
            cytoplasm_mask: tile_name(r.seed, "cytoplasm"),
        };
        save_tile(&r.input_tile, &dir.join(&files.input))?;
        for (m, path) in &files.targets {
            save_tile(&r.targets[m], &dir.join(path))?;
        }
        save_mask(&r.gland_mask, &dir.join(&files.gland_mask))?;
        save_mask(&r.nuclei_mask, &dir.join(&files.nuclei_mask))?;
        save_mask(&r.cytoplasm_mask, &dir.join(&files.cytoplasm_mask))?;
        entries.push(RecordEntry {
            seed: r.seed,
            is_negative: r.is_negative,
            prompts: r.prompts.clone(),
            files,
        });
    }
    fs::write(dir.join(PROMPT_BANK_FILE), PromptBank::builtin_json())?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        prompt_bank_version: PromptBank::builtin().version.clone(),
        prompt_bank_file: PROMPT_BANK_FILE.to_string(),
        spec: spec.clone(),
        records: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::dataset(&path, "manifest not found"));
    }
    let bytes = fs::read(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::dataset(&path, format!("corrupt manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::dataset(
            &path,
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// SHA-256 of the manifest file bytes.
pub fn manifest_checksum(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::dataset(&path, e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if !p.is_file() {
        return Err(Error::dataset(&p, "referenced file is missing"));
    }
    Ok(p)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .records
        .iter()
        .map(|e| {
            let mut targets = BTreeMap::new();
            for (m, rel) in &e.files.targets {
                targets.insert(*m, load_tile(&resolve(dir, rel)?)?);
            }
            let record = SampleRecord {
                seed: e.seed,
                input_tile: load_tile(&resolve(dir, &e.files.input)?)?,
                targets,
                gland_mask: load_mask(&resolve(dir, &e.files.gland_mask)?)?,
                nuclei_mask: load_mask(&resolve(dir, &e.files.nuclei_mask)?)?,
                cytoplasm_mask: load_mask(&resolve(dir, &e.files.cytoplasm_mask)?)?,
                is_negative: e.is_negative,
                prompts: e.prompts.clone(),
            };
            record
                .check_invariants()
                .map_err(|err| Error::dataset(dir.join(&e.files.input), err.to_string()))?;
            Ok(record)
        })
        .collect()
}
