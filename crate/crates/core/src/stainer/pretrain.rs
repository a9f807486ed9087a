//! Brief synthetic pretraining of the base generator before it is frozen.
//!
//! Phase one fits encoder and decoder as an autoencoder over input and target
//! tiles. Phase two fixes the latent scale to unit variance and trains the
//! UNet as a prompt-conditioned denoiser: target latents with their prompt
//! embedding, input latents with a zero embedding.

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{decode, encode, init_base, unet, LATENT_SCALE};
use crate::error::{Error, Result};
use crate::image::{tiles_to_tensor, Tile};
use crate::nn::{mix_seed, scalar, seeded_normal, Layers, ParamSet};
use crate::synthdata::{Marker, Polarity, PromptBank, PromptMode, SampleRecord};
use crate::training::PairEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasePretrainConfig {
    pub autoencoder_steps: usize,
    pub denoiser_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Noise level of the denoising phase, in latent units.
    pub noise_sigma: f64,
}

impl Default for BasePretrainConfig {
    fn default() -> Self {
        Self {
            autoencoder_steps: 1500,
            denoiser_steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            noise_sigma: 0.5,
        }
    }
}

fn vars_with_prefix(p: &ParamSet, prefixes: &[&str]) -> Vec<Var> {
    p.iter()
        .filter(|(n, _)| *n != LATENT_SCALE && prefixes.iter().any(|pre| n.starts_with(pre)))
        .map(|(_, v)| v.clone())
        .collect()
}

fn optimizer(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn check_loss(loss: &Tensor, step: usize, what: &str) -> Result<f32> {
    let v = scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: what.to_string(),
        });
    }
    Ok(v)
}

/// Pretrains a fresh base. The result is frozen.
pub fn pretrain_base(
    records: &[SampleRecord],
    text: &PairEncoder,
    cfg: &ModelConfig,
    pcfg: &BasePretrainConfig,
    seed: u64,
) -> Result<ParamSet> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Precondition("base pretraining needs records".into()));
    }
    if pcfg.batch_size == 0 || pcfg.lr.is_nan() || pcfg.lr <= 0.0 {
        return Err(Error::config("base pretraining needs batch_size >= 1 and lr > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBA5E));
    let mut base = init_base(cfg, &mut rng)?;
    let dev = Device::Cpu;

    let mut pool: Vec<&Tile> = Vec::new();
    for r in records {
        pool.push(&r.input_tile);
        pool.extend(r.targets.values());
    }

    let mut opt = optimizer(vars_with_prefix(&base, &["enc.", "dec."]), pcfg.lr)?;
    for step in 0..pcfg.autoencoder_steps {
        let batch: Vec<&Tile> = (0..pcfg.batch_size).map(|_| *pool.choose(&mut rng).expect("non-empty")).collect();
        let x = tiles_to_tensor(&batch, &dev)?;
        let l = Layers::base_only(&base);
        let (z, _) = encode(&l, cfg, &x)?;
        let recon = decode(&l, cfg, &z, None)?;
        // A light latent penalty keeps the code bounded before it is rescaled.
        let loss = ((&recon - &x)?.sqr()?.mean_all()? + (z.sqr()?.mean_all()? * 1e-4)?)?;
        let v = check_loss(&loss, step, "autoencoder loss")?;
        opt.backward_step(&loss)?;
        if step % 250 == 0 {
            log::debug!("base autoencoder step {step}: {v:.5}");
        }
    }

    // Unit-variance latents.
    let sample: Vec<&Tile> = pool.iter().step_by((pool.len() / 64).max(1)).copied().take(64).collect();
    let (z, _) = encode(&Layers::base_only(&base), cfg, &tiles_to_tensor(&sample, &dev)?)?;
    let std = scalar(&z.flatten_all()?.var(0)?)?.sqrt().max(1e-6);
    base.var(LATENT_SCALE)
        .expect("latent scale exists")
        .set(&Tensor::new(&[1.0 / std], &dev)?)?;

    let bank = PromptBank::builtin();
    let mut opt = optimizer(vars_with_prefix(&base, &["unet."]), pcfg.lr)?;
    let zero_text = vec![0f32; cfg.text_embed_dim];
    for step in 0..pcfg.denoiser_steps {
        let mut tiles = Vec::with_capacity(pcfg.batch_size);
        let mut texts: Vec<Option<String>> = Vec::with_capacity(pcfg.batch_size);
        for _ in 0..pcfg.batch_size {
            let r = records.choose(&mut rng).expect("non-empty");
            if rng.random_bool(0.25) {
                tiles.push(&r.input_tile);
                texts.push(None);
            } else {
                let marker = *Marker::ALL.choose(&mut rng).expect("non-empty");
                let mode = *PromptMode::CONCRETE.choose(&mut rng).expect("non-empty");
                let p = bank.sample(marker, mode, Polarity::of_tile(r.is_negative), &mut rng)?;
                tiles.push(r.target(marker)?);
                texts.push(Some(p.text));
            }
        }
        let mut emb = Vec::with_capacity(pcfg.batch_size * cfg.text_embed_dim);
        for t in &texts {
            match t {
                Some(t) => emb.extend(text.embed_texts(&[t])?.flatten_all()?.to_vec1::<f32>()?),
                None => emb.extend_from_slice(&zero_text),
            }
        }
        let emb = Tensor::from_vec(emb, (pcfg.batch_size, cfg.text_embed_dim), &dev)?;
        let l = Layers::base_only(&base);
        let (z, _) = encode(&l, cfg, &tiles_to_tensor(&tiles, &dev)?)?;
        let z = z.detach();
        let noise = seeded_normal(z.dims(), pcfg.noise_sigma, mix_seed(seed, step as u64))?;
        let y = unet(&l, cfg, &(&z + noise)?, &emb)?;
        let loss = (y - &z)?.sqr()?.mean_all()?;
        let v = check_loss(&loss, step, "denoiser loss")?;
        opt.backward_step(&loss)?;
        if step % 250 == 0 {
            log::debug!("base denoiser step {step}: {v:.5}");
        }
    }
    base.freeze();
    Ok(base)
}
