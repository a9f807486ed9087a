//! Synthetic paired tissue data: tile generator, prompt bank and dataset I/O.

mod dataset;
mod prompts;
mod tissue;

pub use dataset::{
    load_dataset, manifest_checksum, read_manifest, write_dataset, Manifest, RecordEntry, RecordFiles,
    MANIFEST_FILE, PROMPT_BANK_FILE,
};
pub use prompts::{build_prompt, Marker, Polarity, PromptBank, PromptMode, PromptSpec};
pub use tissue::{
    generate_dataset, generate_tile, record_seeds, ColorParams, ColorStat, SampleRecord, TextureSeedMode,
    TissueSpec,
};
