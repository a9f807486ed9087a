//! The single-step latent stainer: encoder, prompt encoder, noise injection,
//! prompt-conditioned UNet with low-rank adapters, and skip-bridged decoder.

mod config;
mod model;
mod pretrain;

pub use config::{LoraTargets, ModelConfig};
pub use model::{decode, encode, init_base, timestep_embedding, unet};
pub use pretrain::{pretrain_base, BasePretrainConfig};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crate::checkpoint::{self, CheckpointKind, Container};
use crate::error::{Error, Result};
use crate::image::{tensor_to_tile, tile_to_tensor, Tile};
use crate::nn::{mix_seed, seeded_normal, Init, Layers, ParamSet};
use crate::synthdata::{PromptBank, PromptSpec};
use crate::training::PairEncoder;

static NEXT_ORIGIN: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    CleanInput,
    Noised,
    Denoised,
}

/// A batch of latents `(N, C, h, w)` tagged with its stage and the encode call it came from.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub values: Tensor,
    pub kind: LatentKind,
    pub origin: u64,
}

impl LatentTensor {
    pub fn dims(&self) -> &[usize] {
        self.values.dims()
    }

    pub fn all_finite(&self) -> Result<bool> {
        Ok(self
            .values
            .flatten_all()?
            .to_vec1::<f32>()?
            .iter()
            .all(|v| v.is_finite()))
    }
}

/// Encoder-stage features, one per stride-2 stage, bound to one encode call.
#[derive(Debug, Clone)]
pub struct SkipFeatures {
    pub maps: Vec<Tensor>,
    pub origin: u64,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub latent: LatentTensor,
    pub skips: SkipFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Vec<f32>,
    pub source_text: String,
}

impl PromptEmbedding {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.vector.clone(), (1, self.vector.len()), &Device::Cpu)?)
    }
}

/// Parameter counts of a stainer, for the adapter budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub base: usize,
    pub trainable: usize,
    pub lora: usize,
    pub ratio: f64,
}

/// Model card stored with every stainer checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainerMeta {
    pub model: ModelConfig,
    pub base_checksum: String,
    pub pair_checksum: String,
    pub prompt_bank_version: String,
    pub conditioning: String,
    pub lora_attached: bool,
    pub pair: serde_json::Value,
}

/// Frozen base (encoder, UNet, decoder, text encoder) plus trainable first
/// UNet layer, zero-initialized skip projections and low-rank adapters.
#[derive(Debug)]
pub struct StainerState {
    config: ModelConfig,
    base: ParamSet,
    text: PairEncoder,
    trainable: ParamSet,
    lora_attached: bool,
    base_checksum: String,
    pair_checksum: String,
    unet_calls: AtomicUsize,
}

impl StainerState {
    /// Wraps a base parameter set. The base and text encoder are frozen here;
    /// the trainable set starts as a copy of the first UNet layer plus zero skips.
    pub fn new(config: ModelConfig, mut base: ParamSet, mut text: PairEncoder) -> Result<Self> {
        config.validate()?;
        if text.embed_dim() != config.text_embed_dim {
            return Err(Error::shape(
                format!("text embedding dim {}", config.text_embed_dim),
                text.embed_dim(),
            ));
        }
        base.freeze();
        text.freeze();
        let mut trainable = ParamSet::new();
        for n in ["unet.in.weight", "unet.in.bias"] {
            trainable.insert(n, base.tensor(n)?.copy()?)?;
        }
        let ew = config.encoder_widths();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..config.stages() {
            let name = format!("dec.skip{i}");
            trainable.init(&format!("{name}.weight"), &[ew[i + 1], ew[i], 1, 1], Init::Zeros, &mut rng)?;
            trainable.init(&format!("{name}.bias"), &[ew[i + 1]], Init::Zeros, &mut rng)?;
        }
        let base_checksum = base.checksum()?;
        let pair_checksum = text.checksum()?;
        Ok(Self {
            config,
            base,
            text,
            trainable,
            lora_attached: false,
            base_checksum,
            pair_checksum,
            unet_calls: AtomicUsize::new(0),
        })
    }

    /// Attaches rank-`r` adapter pairs to every target layer. Up factors are
    /// zero, so outputs are unchanged at attach time.
    pub fn apply_lora(mut self, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.lora_targets;
        for (part, list) in [("encoder", &t.encoder), ("unet", &t.unet), ("decoder", &t.decoder)] {
            if list.is_empty() {
                return Err(Error::config(format!("no LoRA target layers for the {part}")));
            }
        }
        let r = cfg.lora_rank;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x10_4A));
        for layer in t.all() {
            let wname = format!("{layer}.weight");
            let shape = self
                .base
                .shape(&wname)
                .ok_or_else(|| Error::config(format!("LoRA target `{layer}` is not a layer of the model")))?
                .to_vec();
            let (cout, cin) = (shape[0], shape[1]);
            let fan_in: usize = shape[1..].iter().product();
            if r > cout.min(cin) {
                return Err(Error::config(format!(
                    "LoRA rank {r} exceeds the smallest dimension ({}) of `{layer}` {shape:?}",
                    cout.min(cin)
                )));
            }
            self.trainable.init(
                &format!("{layer}.lora_down"),
                &[r, fan_in],
                Init::Normal(1.0 / (fan_in as f64).sqrt()),
                &mut rng,
            )?;
            self.trainable.init(&format!("{layer}.lora_up"), &[cout, r], Init::Zeros, &mut rng)?;
        }
        self.config.lora_rank = cfg.lora_rank;
        self.config.lora_alpha = cfg.lora_alpha;
        self.config.lora_targets = cfg.lora_targets.clone();
        self.lora_attached = true;
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &ParamSet {
        &self.base
    }

    pub fn trainable(&self) -> &ParamSet {
        &self.trainable
    }

    pub fn text_encoder(&self) -> &PairEncoder {
        &self.text
    }

    pub fn lora_attached(&self) -> bool {
        self.lora_attached
    }

    pub fn base_checksum(&self) -> &str {
        &self.base_checksum
    }

    pub fn pair_checksum(&self) -> &str {
        &self.pair_checksum
    }

    /// Fails if the frozen base or text encoder changed since construction.
    pub fn verify_frozen(&self) -> Result<()> {
        let b = self.base.checksum()?;
        if b != self.base_checksum {
            return Err(Error::FrozenDrift(format!("base checksum {b} != {}", self.base_checksum)));
        }
        let p = self.text.checksum()?;
        if p != self.pair_checksum {
            return Err(Error::FrozenDrift(format!("pair-encoder checksum {p} != {}", self.pair_checksum)));
        }
        Ok(())
    }

    pub fn param_report(&self) -> ParamReport {
        let base = self.base.num_params();
        let trainable = self.trainable.num_params();
        let lora = self
            .trainable
            .iter()
            .filter(|(n, _)| n.contains(".lora_"))
            .map(|(_, v)| v.elem_count())
            .sum();
        ParamReport {
            base,
            trainable,
            lora,
            ratio: trainable as f64 / base as f64,
        }
    }

    /// Number of UNet forward passes since construction or the last reset.
    pub fn unet_calls(&self) -> usize {
        self.unet_calls.load(Ordering::SeqCst)
    }

    pub fn reset_unet_calls(&self) {
        self.unet_calls.store(0, Ordering::SeqCst);
    }

    fn adapted(&self) -> Layers<'_> {
        Layers::new(&self.base, Some(&self.trainable), self.config.lora_scale())
    }

    fn frozen(&self) -> Layers<'_> {
        Layers::base_only(&self.base)
    }

    fn check_tile(&self, x: &Tensor) -> Result<()> {
        let s = self.config.tile_size;
        match x.dims() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            d => Err(Error::shape(format!("(N, 3, {s}, {s})"), d)),
        }
    }

    /// Encodes a normalized batch `(N, 3, H, W)`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Encoded> {
        self.encode_with(&self.adapted(), x)
    }

    fn encode_with(&self, l: &Layers, x: &Tensor) -> Result<Encoded> {
        self.check_tile(x)?;
        let (z, maps) = encode(l, &self.config, x)?;
        let origin = NEXT_ORIGIN.fetch_add(1, Ordering::Relaxed);
        Ok(Encoded {
            latent: LatentTensor {
                values: z,
                kind: LatentKind::CleanInput,
                origin,
            },
            skips: SkipFeatures { maps, origin },
        })
    }

    pub fn encode_image(&self, tile: &Tile) -> Result<Encoded> {
        self.encode_batch(&tile_to_tensor(tile, &Device::Cpu)?)
    }

    pub fn encode_text(&self, text: &str) -> Result<PromptEmbedding> {
        let v = self.text.embed_texts(&[text])?.squeeze(0)?.to_vec1::<f32>()?;
        Ok(PromptEmbedding {
            vector: v,
            source_text: text.to_string(),
        })
    }

    /// Embeds a concrete prompt. Mixed references must be resolved first.
    pub fn encode_prompt(&self, p: &PromptSpec) -> Result<PromptEmbedding> {
        if p.is_reference() {
            return Err(Error::Prompt(format!("`{}` is an unresolved mixed prompt", p.text)));
        }
        self.encode_text(&p.text)
    }

    pub fn add_noise(&self, x: &LatentTensor, seed: u64) -> Result<LatentTensor> {
        if x.kind != LatentKind::CleanInput {
            return Err(Error::Precondition(format!("add_noise expects a clean latent, got {:?}", x.kind)));
        }
        let values = if self.config.noise_sigma == 0.0 {
            x.values.clone()
        } else {
            let z = seeded_normal(x.values.dims(), self.config.noise_sigma, seed)?;
            (&x.values + z)?
        };
        Ok(LatentTensor {
            values,
            kind: LatentKind::Noised,
            origin: x.origin,
        })
    }

    /// One UNet pass conditioned on a batch of embeddings `(N, D)`.
    pub fn denoise_batch(&self, xn: &LatentTensor, text: &Tensor) -> Result<LatentTensor> {
        self.denoise_with(&self.adapted(), xn, text)
    }

    fn denoise_with(&self, l: &Layers, xn: &LatentTensor, text: &Tensor) -> Result<LatentTensor> {
        if xn.kind != LatentKind::Noised {
            return Err(Error::Precondition(format!("denoise_step expects a noised latent, got {:?}", xn.kind)));
        }
        let c = &self.config;
        let expect = [c.latent_channels, c.latent_size(), c.latent_size()];
        if xn.dims().len() != 4 || xn.dims()[1..] != expect {
            return Err(Error::shape(expect, xn.dims()));
        }
        let n = xn.dims()[0];
        if text.dims() != [n, c.text_embed_dim] {
            return Err(Error::shape([n, c.text_embed_dim], text.dims()));
        }
        self.unet_calls.fetch_add(1, Ordering::SeqCst);
        Ok(LatentTensor {
            values: unet(l, c, &xn.values, text)?,
            kind: LatentKind::Denoised,
            origin: xn.origin,
        })
    }

    pub fn denoise_step(&self, xn: &LatentTensor, t_p: &PromptEmbedding) -> Result<LatentTensor> {
        self.denoise_batch(xn, &t_p.to_tensor()?)
    }

    /// Decodes to a normalized batch; skips must come from the same encode call.
    pub fn decode_batch(&self, y: &LatentTensor, skips: &SkipFeatures) -> Result<Tensor> {
        if y.kind != LatentKind::Denoised {
            return Err(Error::Precondition(format!("decode expects a denoised latent, got {:?}", y.kind)));
        }
        if skips.origin != y.origin {
            return Err(Error::Precondition(
                "skip features belong to a different encode call".into(),
            ));
        }
        if skips.maps.len() != self.config.stages() {
            return Err(Error::Precondition(format!(
                "expected {} skip feature maps, got {}",
                self.config.stages(),
                skips.maps.len()
            )));
        }
        decode(&self.adapted(), &self.config, &y.values, Some(&skips.maps))
    }

    /// Decodes without any skip contribution.
    pub fn decode_without_skips(&self, y: &LatentTensor) -> Result<Tensor> {
        decode(&self.adapted(), &self.config, &y.values, None)
    }

    pub fn decode_latent(&self, y: &LatentTensor, skips: &SkipFeatures) -> Result<Tile> {
        tensor_to_tile(&self.decode_batch(y, skips)?)
    }

    /// Differentiable end-to-end pass used by training: returns generated images in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor, text: &Tensor, noise_seed: u64) -> Result<Tensor> {
        let e = self.encode_batch(x)?;
        let xn = self.add_noise(&e.latent, noise_seed)?;
        let y = self.denoise_batch(&xn, text)?;
        self.decode_batch(&y, &e.skips)
    }

    fn resolve(&self, prompt: &PromptSpec, seed: u64) -> Result<PromptSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x3A9));
        PromptBank::builtin().resolve(prompt, &mut rng)
    }

    /// Encode → add noise → one denoising pass → decode.
    pub fn virtual_stain(&self, tile: &Tile, prompt: &PromptSpec, seed: u64) -> Result<Tile> {
        let p = self.resolve(prompt, seed)?;
        self.stain_text(tile, &p.text, seed)
    }

    /// Like [`virtual_stain`](Self::virtual_stain) with free-form prompt text.
    pub fn stain_text(&self, tile: &Tile, text: &str, seed: u64) -> Result<Tile> {
        let before = self.unet_calls();
        let t_p = self.encode_text(text)?;
        let e = self.encode_image(tile)?;
        let xn = self.add_noise(&e.latent, seed)?;
        let y = self.denoise_step(&xn, &t_p)?;
        let out = self.decode_latent(&y, &e.skips)?;
        debug_assert_eq!(self.unet_calls() - before, 1);
        Ok(out)
    }

    /// The same pipeline through the frozen base alone: no adapters, no skips.
    pub fn virtual_stain_base(&self, tile: &Tile, prompt: &PromptSpec, seed: u64) -> Result<Tile> {
        tensor_to_tile(&self.base_forward(tile, prompt, seed)?)
    }

    /// Unrounded frozen-base output in `[-1, 1]`.
    pub fn base_forward(&self, tile: &Tile, prompt: &PromptSpec, seed: u64) -> Result<Tensor> {
        let p = self.resolve(prompt, seed)?;
        let l = self.frozen();
        let e = self.encode_with(&l, &tile_to_tensor(tile, &Device::Cpu)?)?;
        let xn = self.add_noise(&e.latent, seed)?;
        let y = self.denoise_with(&l, &xn, &self.encode_text(&p.text)?.to_tensor()?)?;
        decode(&l, &self.config, &y.values, None)
    }

    /// Unrounded adapted output in `[-1, 1]`.
    pub fn adapted_forward(&self, tile: &Tile, prompt: &PromptSpec, seed: u64) -> Result<Tensor> {
        let p = self.resolve(prompt, seed)?;
        let x = tile_to_tensor(tile, &Device::Cpu)?;
        self.forward(&x, &self.encode_text(&p.text)?.to_tensor()?, seed)
    }

    pub fn meta(&self) -> Result<StainerMeta> {
        Ok(StainerMeta {
            model: self.config.clone(),
            base_checksum: self.base_checksum.clone(),
            pair_checksum: self.pair_checksum.clone(),
            prompt_bank_version: PromptBank::builtin().version.clone(),
            conditioning: "film".into(),
            lora_attached: self.lora_attached,
            pair: self.text.meta_json()?,
        })
    }

    /// Saves the full state plus caller-supplied tensors and metadata.
    pub fn save(&self, path: &Path, extra: Vec<(String, Tensor)>, extra_meta: serde_json::Value) -> Result<()> {
        let mut tensors = self.base.export("base.");
        tensors.extend(self.text.params().export("pair."));
        tensors.extend(self.trainable.export("train."));
        tensors.extend(extra);
        let meta = serde_json::json!({
            "stainer": serde_json::to_value(self.meta()?)?,
            "extra": extra_meta,
        });
        checkpoint::save(path, CheckpointKind::Stainer, &meta, &tensors)
    }

    /// Loads a stainer checkpoint; returns the state and the raw container for extras.
    pub fn load(path: &Path) -> Result<(Self, Container)> {
        let c = checkpoint::load(path)?;
        c.expect_kind(CheckpointKind::Stainer, path)?;
        let meta: StainerMeta = serde_json::from_value(c.meta["stainer"].clone())
            .map_err(|e| Error::checkpoint(path, format!("bad model card: {e}")))?;
        let state = Self::from_parts(&meta, &c.tensors, path)?;
        Ok((state, c))
    }

    fn from_parts(meta: &StainerMeta, tensors: &HashMap<String, Tensor>, path: &Path) -> Result<Self> {
        let base = ParamSet::import(tensors, "base.")?;
        let text = PairEncoder::from_tensors(&meta.pair, tensors, "pair.", path)?;
        let mut state = Self::new(meta.model.clone(), base, text)?;
        if state.base_checksum != meta.base_checksum {
            return Err(Error::FrozenDrift(format!(
                "{}: stored base checksum does not match its tensors",
                path.display()
            )));
        }
        if state.pair_checksum != meta.pair_checksum {
            return Err(Error::FrozenDrift(format!(
                "{}: stored pair-encoder checksum does not match its tensors",
                path.display()
            )));
        }
        state.trainable = ParamSet::import(tensors, "train.")?;
        state.lora_attached = meta.lora_attached;
        Ok(state)
    }

    /// Copies trainable values from another state with the same layout.
    pub fn load_trainable_from(&self, other: &ParamSet) -> Result<()> {
        self.trainable.assign_from(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_prompt, generate_tile, Marker, Polarity, PromptMode, TissueSpec};
    use crate::training::PairEncoder;
    use image::RgbImage;

    fn state() -> StainerState {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = init_base(&cfg, &mut rng).unwrap();
        let text = PairEncoder::new(cfg.text_embed_dim, 4).unwrap();
        StainerState::new(cfg.clone(), base, text).unwrap().apply_lora(&cfg, 5).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn shapes_and_finiteness() {
        let s = state();
        let black = RgbImage::new(64, 64);
        let e = s.encode_image(&black).unwrap();
        assert_eq!(e.latent.dims(), &[1, 8, 16, 16]);
        assert!(e.latent.all_finite().unwrap());
        let again = s.encode_image(&black).unwrap();
        assert_eq!(max_abs(&e.latent.values, &again.latent.values), 0.0);
        let p = build_prompt(Marker::Nuclear, PromptMode::SP, Polarity::Positive).unwrap();
        let y = s.denoise_step(&s.add_noise(&e.latent, 1).unwrap(), &s.encode_prompt(&p).unwrap()).unwrap();
        let tile = s.decode_latent(&y, &e.skips).unwrap();
        assert_eq!(tile.dimensions(), (64, 64));
        let bad = RgbImage::new(32, 64);
        let err = s.encode_image(&bad).unwrap_err().to_string();
        assert!(err.contains("64") && err.contains("32"), "{err}");
    }

    #[test]
    fn zero_sigma_noise_is_identity_and_seeded_noise_repeats() {
        let mut s = state();
        let e = s.encode_image(&RgbImage::new(64, 64)).unwrap();
        let a = s.add_noise(&e.latent, 9).unwrap();
        let b = s.add_noise(&e.latent, 9).unwrap();
        assert_eq!(max_abs(&a.values, &b.values), 0.0);
        s.config.noise_sigma = 0.0;
        let c = s.add_noise(&e.latent, 9).unwrap();
        assert_eq!(max_abs(&c.values, &e.latent.values), 0.0);
        assert!(s.add_noise(&c, 1).is_err());
    }

    #[test]
    fn noise_moments_match_sigma() {
        let s = state();
        let n = 1_000_000;
        let zero = LatentTensor {
            values: Tensor::zeros((1, n), candle_core::DType::F32, &Device::Cpu).unwrap(),
            kind: LatentKind::CleanInput,
            origin: 0,
        };
        let z: Vec<f64> = s
            .add_noise(&zero, 5)
            .unwrap()
            .values
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        let sigma = s.config().noise_sigma;
        let mean = z.iter().sum::<f64>() / n as f64;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() <= 4.0 * sigma / (n as f64).sqrt(), "{mean}");
        assert!((std / sigma - 1.0).abs() <= 0.01, "{std}");
    }

    #[test]
    fn fresh_adapters_match_the_frozen_base() {
        let s = state();
        let r = generate_tile(&TissueSpec::default(), 11).unwrap();
        let p = build_prompt(Marker::Cyto, PromptMode::MP, Polarity::Positive).unwrap();
        let a = s.adapted_forward(&r.input_tile, &p, 2).unwrap();
        let b = s.base_forward(&r.input_tile, &p, 2).unwrap();
        assert!(max_abs(&a, &b) <= 1e-6);
        let e = s.encode_image(&r.input_tile).unwrap();
        let y = s
            .denoise_step(&s.add_noise(&e.latent, 0).unwrap(), &s.encode_prompt(&p).unwrap())
            .unwrap();
        assert_eq!(max_abs(&s.decode_batch(&y, &e.skips).unwrap(), &s.decode_without_skips(&y).unwrap()), 0.0);
    }

    #[test]
    fn skips_from_another_call_are_rejected() {
        let s = state();
        let t = RgbImage::new(64, 64);
        let e1 = s.encode_image(&t).unwrap();
        let e2 = s.encode_image(&t).unwrap();
        let p = s.encode_text("brown nuclei").unwrap();
        let y = s.denoise_step(&s.add_noise(&e1.latent, 0).unwrap(), &p).unwrap();
        assert!(s.decode_latent(&y, &e2.skips).is_err());
    }

    #[test]
    fn one_unet_call_per_stain() {
        let s = state();
        let t = RgbImage::new(64, 64);
        let p = build_prompt(Marker::Nuclear, PromptMode::MxP, Polarity::Positive).unwrap();
        let a = s.virtual_stain(&t, &p, 4).unwrap();
        assert_eq!(s.unet_calls(), 1);
        let b = s.virtual_stain(&t, &p, 4).unwrap();
        assert_eq!(s.unet_calls(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn adapter_budget_and_rank_precondition() {
        let s = state();
        let r = s.param_report();
        assert!(r.ratio < 0.10, "{r:?}");
        assert!(r.lora > 0);

        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = init_base(&cfg, &mut rng).unwrap();
        let text = PairEncoder::new(cfg.text_embed_dim, 4).unwrap();
        let fresh = || StainerState::new(cfg.clone(), base.clone(), text.clone()).unwrap();
        // enc.out has 8 output channels; dec.out has 3.
        let mut one = cfg.clone();
        one.lora_rank = 1;
        one.lora_targets.decoder.push("dec.out".into());
        assert!(fresh().apply_lora(&one, 0).is_ok());
        let mut eight = cfg.clone();
        eight.lora_rank = 4;
        eight.lora_targets.decoder.push("dec.out".into());
        assert!(matches!(fresh().apply_lora(&eight, 0), Err(Error::Config(_))));
        let mut none = cfg.clone();
        none.lora_targets.unet.clear();
        assert!(fresh().apply_lora(&none, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let path = dir.path().join("s.safetensors");
        s.save(&path, vec![], serde_json::json!({"k": 1})).unwrap();
        let (back, c) = StainerState::load(&path).unwrap();
        assert_eq!(c.meta["extra"]["k"], 1);
        assert_eq!(back.base_checksum(), s.base_checksum());
        assert_eq!(back.trainable().checksum().unwrap(), s.trainable().checksum().unwrap());
        let t = generate_tile(&TissueSpec::default(), 1).unwrap().input_tile;
        assert_eq!(back.stain_text(&t, "brown nuclei", 3).unwrap(), s.stain_text(&t, "brown nuclei", 3).unwrap());
    }
}
