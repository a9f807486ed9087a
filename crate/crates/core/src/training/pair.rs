//! Small contrastive text/image encoder pair.
//!
//! The text branch conditions the stainer; the image branch supplies the
//! perceptual features, the alignment embedding, the discriminator trunk and
//! the FID features. Both are frozen once pretraining ends.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::{self, CheckpointKind};
use crate::error::{Error, Result};
use crate::image::{tiles_to_tensor, Tile};
use crate::nn::{cosine, init_conv, init_linear, l2_normalize, scalar, Init, Layers, ParamSet};
use crate::synthdata::{Marker, Polarity, PromptBank, PromptMode, SampleRecord};

pub const UNK: &str = "<unk>";
const IMAGE_WIDTHS: [usize; 3] = [16, 32, 64];
const TEXT_HIDDEN: usize = 64;
/// Retrieval accuracy a pretrained encoder must reach to count as validated.
pub const RETRIEVAL_GATE: f64 = 0.8;

/// Lower-cased word tokenizer over a fixed vocabulary; index 0 is `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    pub fn new(mut words: Vec<String>) -> Self {
        words.retain(|w| w != UNK);
        words.sort();
        words.dedup();
        words.insert(0, UNK.to_string());
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Vocabulary of every word in the bank.
    pub fn from_bank(bank: &PromptBank) -> Self {
        let words = bank
            .all_texts()
            .into_iter()
            .flat_map(split_words)
            .collect();
        Self::new(words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Token ids; unknown words map to `<unk>`. Empty text is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        if text.trim().is_empty() {
            return Err(Error::Prompt("prompt text is empty".into()));
        }
        let ids: Vec<usize> = split_words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(0))
            .collect();
        Ok(if ids.is_empty() { vec![0] } else { ids })
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEncoderMeta {
    pub embed_dim: usize,
    pub steps: usize,
    pub validated: bool,
    pub retrieval_accuracy: Option<f64>,
    pub prompt_bank_version: String,
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PairEncoder {
    params: ParamSet,
    tokenizer: Tokenizer,
    meta: PairEncoderMeta,
}

/// Coarse semantic class of a (image, prompt) pair used for soft contrastive targets.
fn pair_class(marker: Marker, polarity: Polarity) -> usize {
    match (polarity, marker) {
        (Polarity::Negative, _) => 2,
        (Polarity::Positive, Marker::Nuclear) => 0,
        (Polarity::Positive, Marker::Cyto) => 1,
    }
}

impl PairEncoder {
    /// Randomly initialized, trainable encoder.
    pub fn new(embed_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let bank = PromptBank::builtin();
        let tokenizer = Tokenizer::from_bank(bank);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut cin = 3;
        for (i, &w) in IMAGE_WIDTHS.iter().enumerate() {
            init_conv(&mut p, &format!("img.c{i}"), cin, w, 3, 1.0, &mut rng)?;
            cin = w;
        }
        init_linear(&mut p, "img.proj", cin, embed_dim, 0.5, &mut rng)?;
        p.init("txt.embed", &[tokenizer.len(), embed_dim], Init::Normal(1.0), &mut rng)?;
        init_linear(&mut p, "txt.fc1", embed_dim, TEXT_HIDDEN, 1.0, &mut rng)?;
        init_linear(&mut p, "txt.fc2", TEXT_HIDDEN, embed_dim, 0.5, &mut rng)?;
        let meta = PairEncoderMeta {
            embed_dim,
            steps: 0,
            validated: false,
            retrieval_accuracy: None,
            prompt_bank_version: bank.version.clone(),
            vocab: tokenizer.words().to_vec(),
        };
        Ok(Self {
            params: p,
            tokenizer,
            meta,
        })
    }

    pub fn meta(&self) -> &PairEncoderMeta {
        &self.meta
    }

    pub fn embed_dim(&self) -> usize {
        self.meta.embed_dim
    }

    pub fn is_validated(&self) -> bool {
        self.meta.validated
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    fn layers(&self) -> Layers<'_> {
        Layers::base_only(&self.params)
    }

    /// Unit-norm text embeddings `(N, D)`.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        let v = self.tokenizer.len();
        let mut bag = vec![0f32; texts.len() * v];
        for (i, t) in texts.iter().enumerate() {
            let ids = self.tokenizer.encode(t)?;
            let w = 1.0 / ids.len() as f32;
            for id in ids {
                bag[i * v + id] += w;
            }
        }
        let bag = Tensor::from_vec(bag, (texts.len(), v), &Device::Cpu)?;
        let l = self.layers();
        let e = bag.matmul(&l.param("txt.embed")?)?;
        let h = candle_nn::ops::silu(&l.linear("txt.fc1", &e)?)?;
        l2_normalize(&(l.linear("txt.fc2", &h)? + e)?, 1)
    }

    /// Feature maps at three scales for a normalized `(N, 3, H, W)` batch.
    pub fn image_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let l = self.layers();
        let mut h = x.clone();
        let mut out = Vec::with_capacity(IMAGE_WIDTHS.len());
        for i in 0..IMAGE_WIDTHS.len() {
            h = candle_nn::ops::silu(&l.conv(&format!("img.c{i}"), &h, 2)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Pooled, unnormalized image features `(N, C_last)`.
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.image_features(x)?;
        let last = feats.last().expect("at least one scale");
        Ok(last.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Unit-norm image embeddings `(N, D)`.
    pub fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = self.pooled_features(x)?;
        self.project(&pooled)
    }

    fn project(&self, pooled: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.layers().linear("img.proj", pooled)?, 1)
    }

    /// Image embedding when the three scales were already computed.
    pub fn embed_from_features(&self, feats: &[Tensor]) -> Result<Tensor> {
        let last = feats.last().ok_or_else(|| Error::Precondition("no features".into()))?;
        self.project(&last.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            CheckpointKind::PairEncoder,
            &serde_json::to_value(&self.meta)?,
            &self.params.export("pair."),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::load(path)?;
        c.expect_kind(CheckpointKind::PairEncoder, path)?;
        Self::from_tensors(&c.meta, &c.tensors, "pair.", path)
    }

    pub(crate) fn from_tensors(
        meta: &serde_json::Value,
        tensors: &std::collections::HashMap<String, Tensor>,
        prefix: &str,
        path: &Path,
    ) -> Result<Self> {
        let meta: PairEncoderMeta =
            serde_json::from_value(meta.clone()).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let mut params = ParamSet::import(tensors, prefix)?;
        if params.is_empty() {
            return Err(Error::checkpoint(path, "no pair-encoder tensors"));
        }
        params.freeze();
        let tokenizer = Tokenizer::new(meta.vocab.clone());
        if tokenizer.words() != meta.vocab.as_slice() {
            return Err(Error::checkpoint(path, "vocabulary is not canonical"));
        }
        Ok(Self {
            params,
            tokenizer,
            meta,
        })
    }

    pub(crate) fn meta_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.meta)?)
    }
}

/// Pretraining knobs; defaults fit the desk-scale dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairPretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub embed_dim: usize,
    /// Fraction of records held out for the retrieval check.
    pub holdout_fraction: f64,
}

impl Default for PairPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 24,
            lr: 2e-3,
            temperature: 0.1,
            embed_dim: 32,
            holdout_fraction: 0.1,
        }
    }
}

impl PairPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("pair pretraining needs batch_size >= 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config("pair pretraining lr and temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

struct PairSample<'a> {
    image: &'a Tile,
    text: String,
    class: usize,
}

fn draw_pair<'a, R: Rng>(
    bank: &PromptBank,
    record: &'a SampleRecord,
    marker: Marker,
    rng: &mut R,
) -> Result<PairSample<'a>> {
    let polarity = Polarity::of_tile(record.is_negative);
    let mode = *PromptMode::CONCRETE.choose(rng).expect("non-empty");
    let prompt = bank.sample(marker, mode, polarity, rng)?;
    Ok(PairSample {
        image: record.target(marker)?,
        text: prompt.text,
        class: pair_class(marker, polarity),
    })
}

/// Soft-target symmetric InfoNCE: every in-batch pair of the same class counts as a match.
pub fn contrastive_loss(img: &Tensor, txt: &Tensor, classes: &[usize], temperature: f64) -> Result<Tensor> {
    let n = classes.len();
    let mut target = vec![0f32; n * n];
    for i in 0..n {
        let same = classes.iter().filter(|&&c| c == classes[i]).count() as f32;
        for j in 0..n {
            if classes[i] == classes[j] {
                target[i * n + j] = 1.0 / same;
            }
        }
    }
    let target = Tensor::from_vec(target, (n, n), &Device::Cpu)?;
    let logits = (img.matmul(&txt.t()?)? / temperature)?;
    let i2t = candle_nn::ops::log_softmax(&logits, 1)?;
    let t2i = candle_nn::ops::log_softmax(&logits.t()?, 1)?;
    let a = (i2t * &target)?.sum_all()?.neg()?;
    let b = (t2i * target.t()?)?.sum_all()?.neg()?;
    Ok(((a + b)? / (2.0 * n as f64))?)
}

/// Fraction of held-out (image, prompt) pairs whose matched prompt scores above a
/// prompt of another class.
pub fn retrieval_accuracy(enc: &PairEncoder, records: &[&SampleRecord], seed: u64) -> Result<f64> {
    let bank = PromptBank::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in records.chunks(32) {
        let mut images = Vec::new();
        let mut matched = Vec::new();
        let mut mismatched = Vec::new();
        for r in chunk {
            for marker in Marker::ALL {
                let s = draw_pair(bank, r, marker, &mut rng)?;
                // A mismatched prompt: the other marker if positive, any positive prompt if negative.
                let (m2, pol2) = if r.is_negative {
                    (*Marker::ALL.choose(&mut rng).expect("non-empty"), Polarity::Positive)
                } else {
                    let other = if marker == Marker::Nuclear { Marker::Cyto } else { Marker::Nuclear };
                    (other, Polarity::Positive)
                };
                let mode = *PromptMode::CONCRETE.choose(&mut rng).expect("non-empty");
                mismatched.push(bank.sample(m2, mode, pol2, &mut rng)?.text);
                images.push(s.image);
                matched.push(s.text);
            }
        }
        let x = tiles_to_tensor(&images, &Device::Cpu)?;
        let img = enc.embed_images(&x)?;
        let m: Vec<&str> = matched.iter().map(String::as_str).collect();
        let mm: Vec<&str> = mismatched.iter().map(String::as_str).collect();
        let cm = cosine(&img, &enc.embed_texts(&m)?)?.to_vec1::<f32>()?;
        let cx = cosine(&img, &enc.embed_texts(&mm)?)?.to_vec1::<f32>()?;
        hits += cm.iter().zip(&cx).filter(|(a, b)| a > b).count();
        total += cm.len();
    }
    if total == 0 {
        return Err(Error::Precondition("no held-out pairs".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Contrastive pretraining over target tiles and their prompts. The returned
/// encoder is frozen; it is marked validated when held-out retrieval reaches
/// [`RETRIEVAL_GATE`]. Zero steps yields a frozen, unvalidated encoder.
pub fn pretrain_pair_encoder(
    records: &[SampleRecord],
    cfg: &PairPretrainConfig,
    seed: u64,
) -> Result<PairEncoder> {
    cfg.validate()?;
    let mut enc = PairEncoder::new(cfg.embed_dim, seed)?;
    let positives: Vec<&SampleRecord> = records.iter().filter(|r| !r.is_negative).collect();
    for marker in Marker::ALL {
        if !positives.iter().any(|r| r.targets.contains_key(&marker)) {
            return Err(Error::Precondition(format!(
                "pair pretraining needs positive {marker} targets"
            )));
        }
    }
    if !records.iter().any(|r| r.is_negative) {
        log::warn!("pair pretraining without negative tiles; negative prompts stay untrained");
    }
    if cfg.steps == 0 {
        enc.freeze();
        return Ok(enc);
    }

    let holdout = ((records.len() as f64 * cfg.holdout_fraction).round() as usize).min(records.len() / 2);
    let (train, held) = records.split_at(records.len() - holdout);
    let bank = PromptBank::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::nn::mix_seed(seed, 0xC11F));
    let mut opt = AdamW::new(
        enc.params.all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    for step in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut texts = Vec::with_capacity(cfg.batch_size);
        let mut classes = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let r = &train[rng.random_range(0..train.len())];
            let marker = *Marker::ALL.choose(&mut rng).expect("non-empty");
            let s = draw_pair(bank, r, marker, &mut rng)?;
            images.push(s.image);
            texts.push(s.text);
            classes.push(s.class);
        }
        let x = tiles_to_tensor(&images, &Device::Cpu)?;
        let t: Vec<&str> = texts.iter().map(String::as_str).collect();
        let loss = contrastive_loss(&enc.embed_images(&x)?, &enc.embed_texts(&t)?, &classes, cfg.temperature)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "pair-encoder contrastive loss".into(),
            });
        }
        opt.backward_step(&loss)?;
        if step % 200 == 0 {
            log::debug!("pair pretrain step {step}: loss {v:.4}");
        }
    }
    enc.freeze();
    enc.meta.steps = cfg.steps;
    let held: Vec<&SampleRecord> = if held.is_empty() { train.iter().collect() } else { held.iter().collect() };
    let acc = retrieval_accuracy(&enc, &held, crate::nn::mix_seed(seed, 0xE7A1))?;
    enc.meta.retrieval_accuracy = Some(acc);
    enc.meta.validated = acc >= RETRIEVAL_GATE;
    if !enc.meta.validated {
        log::warn!("pair encoder retrieval accuracy {acc:.3} is below {RETRIEVAL_GATE}");
    }
    Ok(enc)
}

/// Cosine similarity of two prompt embeddings.
pub fn prompt_similarity(enc: &PairEncoder, a: &str, b: &str) -> Result<f32> {
    let e = enc.embed_texts(&[a, b])?;
    let c = cosine(&e.narrow(0, 0, 1)?, &e.narrow(0, 1, 1)?)?;
    Ok(c.to_dtype(DType::F32)?.to_vec1::<f32>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, TissueSpec};

    #[test]
    fn tokenizer_maps_unknown_words_and_rejects_empty() {
        let t = Tokenizer::from_bank(PromptBank::builtin());
        assert_eq!(t.words()[0], UNK);
        let ids = t.encode("Nuclear zzzqqq stain").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[1], 0);
        assert_ne!(ids[0], 0);
        assert_eq!(t.encode("!!").unwrap(), vec![0]);
        assert!(matches!(t.encode("   "), Err(Error::Prompt(_))));
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let enc = PairEncoder::new(16, 1).unwrap();
        let a = enc.embed_texts(&["brown nuclei", "brown nuclei"]).unwrap();
        let v = a.to_vec2::<f32>().unwrap();
        assert_eq!(v[0], v[1]);
        let n: f32 = v[0].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.embed_images(&x).unwrap().dims(), &[2, 16]);
        assert_eq!(enc.image_features(&x).unwrap()[2].dims(), &[2, 64, 4, 4]);
    }

    #[test]
    fn contrastive_loss_prefers_aligned_embeddings() {
        let e = Tensor::new(&[[1f32, 0.], [0., 1.]], &Device::Cpu).unwrap();
        let aligned = scalar(&contrastive_loss(&e, &e, &[0, 1], 0.1).unwrap()).unwrap();
        let crossed = scalar(&contrastive_loss(&e, &e.neg().unwrap(), &[0, 1], 0.1).unwrap()).unwrap();
        assert!(aligned < crossed);
    }

    #[test]
    fn zero_steps_is_frozen_and_unvalidated() {
        let records = generate_dataset(&TissueSpec::default(), 12, 3).unwrap();
        let cfg = PairPretrainConfig {
            steps: 0,
            ..Default::default()
        };
        let enc = pretrain_pair_encoder(&records, &cfg, 0).unwrap();
        assert!(enc.is_frozen());
        assert!(!enc.is_validated());
    }

    #[test]
    fn missing_marker_class_is_an_error() {
        let mut records = generate_dataset(&TissueSpec::default(), 12, 3).unwrap();
        for r in &mut records {
            r.targets.remove(&Marker::Cyto);
        }
        assert!(pretrain_pair_encoder(&records, &PairPretrainConfig::default(), 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = PairEncoder::new(8, 5).unwrap();
        enc.freeze();
        let p = dir.path().join("pair.safetensors");
        enc.save(&p).unwrap();
        let back = PairEncoder::load(&p).unwrap();
        assert_eq!(back.checksum().unwrap(), enc.checksum().unwrap());
        assert_eq!(back.meta(), enc.meta());
        assert!(back.is_frozen());
    }
}
