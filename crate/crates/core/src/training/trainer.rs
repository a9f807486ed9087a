//! Uniplex batch sampling, the alternating generator/discriminator step and the run loop.

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{TrainConfig, TrainMode};
use super::losses::{
    adv_losses, clip_alignment_from_embedding, l2_loss, perceptual_from_features, Discriminator, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::image::{tiles_to_tensor, Tile};
use crate::nn::{mix_seed, scalar, ParamSet};
use crate::stainer::StainerState;
use crate::synthdata::{Marker, PromptBank, SampleRecord};

/// One training example: an input tile with exactly one marker's target.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub record_seed: u64,
    pub input: &'a Tile,
    pub targets: BTreeMap<Marker, &'a Tile>,
    pub prompt: String,
}

impl TrainItem<'_> {
    pub fn marker(&self) -> Result<Marker> {
        match self.targets.len() {
            1 => Ok(*self.targets.keys().next().expect("one entry")),
            n => Err(Error::Precondition(format!(
                "record {} carries {n} marker targets; training items must be uniplex",
                self.record_seed
            ))),
        }
    }
}

/// Rejects any batch that pairs one input with more than one marker's target.
pub fn check_uniplex(batch: &[TrainItem]) -> Result<()> {
    let mut seen: BTreeMap<u64, Marker> = BTreeMap::new();
    for item in batch {
        let m = item.marker()?;
        if let Some(prev) = seen.insert(item.record_seed, m) {
            if prev != m {
                return Err(Error::Precondition(format!(
                    "record {} appears with both {prev} and {m} targets in one batch",
                    item.record_seed
                )));
            }
        }
    }
    Ok(())
}

/// Draws uniplex items according to the prompt regime.
pub struct Sampler<'a> {
    records: Vec<&'a SampleRecord>,
    markers: Vec<Marker>,
    mode: TrainMode,
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(records: &'a [SampleRecord], cfg: &TrainConfig, markers: &[Marker]) -> Result<Self> {
        let mode = cfg.prompt_mode;
        let markers: Vec<Marker> = if mode.single_marker() {
            vec![cfg.single_marker]
        } else {
            markers.to_vec()
        };
        let records: Vec<&SampleRecord> = records
            .iter()
            .filter(|r| mode.uses_negatives() || !r.is_negative)
            .filter(|r| markers.iter().all(|m| r.targets.contains_key(m)))
            .collect();
        if records.is_empty() {
            return Err(Error::Precondition(format!("no usable training records for mode {mode}")));
        }
        Ok(Self {
            records,
            markers,
            mode,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xDA7A)),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Batch of distinct records, each with one marker.
    pub fn batch(&mut self, size: usize) -> Result<Vec<TrainItem<'a>>> {
        let bank = PromptBank::builtin();
        let mut used = BTreeSet::new();
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let r = *self.records.choose(&mut self.rng).expect("non-empty");
            if !used.insert(r.seed) && used.len() < self.records.len() {
                continue;
            }
            let marker = *self.markers.choose(&mut self.rng).expect("non-empty");
            let spec = r
                .prompt(marker, self.mode.prompt_mode())
                .ok_or_else(|| Error::Precondition(format!("record {} lacks a {marker} prompt", r.seed)))?;
            let prompt = bank.resolve(spec, &mut self.rng)?.text;
            let mut targets = BTreeMap::new();
            targets.insert(marker, r.target(marker)?);
            out.push(TrainItem {
                record_seed: r.seed,
                input: &r.input_tile,
                targets,
                prompt,
            });
        }
        check_uniplex(&out)?;
        Ok(out)
    }
}

/// Tensors of a batch ready for a step.
pub struct BatchTensors {
    pub input: Tensor,
    pub target: Tensor,
    pub text: Tensor,
}

impl BatchTensors {
    pub fn from_items(state: &StainerState, items: &[TrainItem]) -> Result<Self> {
        check_uniplex(items)?;
        let inputs: Vec<&Tile> = items.iter().map(|i| i.input).collect();
        let targets = items
            .iter()
            .map(|i| Ok(i.targets[&i.marker()?]))
            .collect::<Result<Vec<&Tile>>>()?;
        let texts: Vec<&str> = items.iter().map(|i| i.prompt.as_str()).collect();
        Ok(Self {
            input: tiles_to_tensor(&inputs, &Device::Cpu)?,
            target: tiles_to_tensor(&targets, &Device::Cpu)?,
            text: state.text_encoder().embed_texts(&texts)?,
        })
    }
}

/// Generator-side losses as tensors, plus the generated batch and its features.
pub struct GeneratorPass {
    pub generated: Tensor,
    pub l2: Tensor,
    pub perceptual: Tensor,
    pub clip: Tensor,
    pub adv_g: Tensor,
    pub adv_d: Tensor,
    pub total: Tensor,
}

/// Full forward of the objective for one batch.
pub fn generator_pass(
    state: &StainerState,
    disc: &Discriminator,
    batch: &BatchTensors,
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Result<GeneratorPass> {
    let pair = state.text_encoder();
    let generated = state.forward(&batch.input, &batch.text, noise_seed)?;
    let fake = pair.image_features(&generated)?;
    let real = pair.image_features(&batch.target)?;
    let l2 = l2_loss(&generated, &batch.target)?;
    let perceptual = perceptual_from_features(&fake, &real)?;
    let clip = clip_alignment_from_embedding(&pair.embed_from_features(&fake)?, &batch.text)?;
    let (adv_g, adv_d) = adv_losses(disc, &fake, &real)?;
    let total = ((&l2 + &perceptual)? + (&clip * cfg.w_clip)?)?;
    let total = (total + (&adv_g * cfg.w_adv)?)?;
    Ok(GeneratorPass {
        generated,
        l2,
        perceptual,
        clip,
        adv_g,
        adv_d,
        total,
    })
}

/// Optimizers of one run.
pub struct Optimizers {
    generator: AdamW,
    discriminator: AdamW,
}

impl Optimizers {
    pub fn new(state: &StainerState, disc: &Discriminator, cfg: &TrainConfig) -> Result<Self> {
        let p = |lr| ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            generator: AdamW::new(state.trainable().all_vars(), p(cfg.lr_generator))?,
            discriminator: AdamW::new(disc.params().all_vars(), p(cfg.lr_discriminator))?,
        })
    }
}

/// One generator update followed by one discriminator update.
pub fn train_step(
    state: &StainerState,
    disc: &Discriminator,
    opts: &mut Optimizers,
    items: &[TrainItem],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let batch = BatchTensors::from_items(state, items)?;
    let pass = generator_pass(state, disc, &batch, cfg, mix_seed(cfg.seed, 0x5_0000 + step as u64))?;
    let mut b = super::losses::total_loss(
        scalar(&pass.l2)? as f64,
        scalar(&pass.perceptual)? as f64,
        scalar(&pass.clip)? as f64,
        scalar(&pass.adv_g)? as f64,
        scalar(&pass.adv_d)? as f64,
        cfg.weights(),
        step,
    )?;
    let logged_total = scalar(&pass.total)? as f64;
    if !logged_total.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("total = {logged_total}"),
        });
    }
    b.total = logged_total;
    let grads = pass.total.backward()?;
    opts.generator.step(&grads)?;
    let dgrads = pass.adv_d.backward()?;
    opts.discriminator.step(&dgrads)?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub path: PathBuf,
    pub step: usize,
    pub prompt_mode: TrainMode,
    pub base_checksum: String,
    pub pair_checksum: String,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: CheckpointMeta,
    pub losses: Vec<LossBreakdown>,
    pub discriminator: Discriminator,
}

pub const LOSS_LOG: &str = "losses.csv";
pub const LAST_GOOD: &str = "last_good.safetensors";
pub const FINAL: &str = "final.safetensors";

fn save_checkpoint(
    state: &StainerState,
    disc: &Discriminator,
    cfg: &TrainConfig,
    step: usize,
    path: &Path,
    extra: &serde_json::Value,
) -> Result<()> {
    let meta = serde_json::json!({
        "train": cfg,
        "step": step,
        "prompt_mode": cfg.prompt_mode,
        "run": extra,
    });
    state.save(path, disc.params().export("disc."), meta)
}

/// Reads the training section of a stainer checkpoint's metadata.
pub fn checkpoint_train_config(meta: &serde_json::Value) -> Option<TrainConfig> {
    serde_json::from_value(meta["extra"]["train"].clone()).ok()
}

/// Restores the discriminator stored with a checkpoint.
pub fn checkpoint_discriminator(tensors: &std::collections::HashMap<String, Tensor>) -> Result<Discriminator> {
    Ok(Discriminator::from_params(ParamSet::import(tensors, "disc.")?))
}

/// Trains the adapters of `state` on uniplex pairs.
///
/// Writes `losses.csv`, `last_good.safetensors` (refreshed at every
/// checkpoint) and `final.safetensors` into `out_dir`. A non-finite loss halts
/// the run, leaving the last good checkpoint in place; any change to the
/// frozen parameters is a hard failure.
pub fn train_loop(
    records: &[SampleRecord],
    state: &StainerState,
    cfg: &TrainConfig,
    out_dir: &Path,
    extra_meta: serde_json::Value,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !state.text_encoder().is_validated() && !cfg.allow_unvalidated {
        return Err(Error::Precondition(
            "pair encoder is unvalidated; pretrain it or pass allow_unvalidated".into(),
        ));
    }
    if !state.lora_attached() {
        return Err(Error::Precondition("attach LoRA adapters before training".into()));
    }
    state.verify_frozen()?;
    fs::create_dir_all(out_dir)?;
    let scales: Vec<usize> = {
        let probe = Tensor::zeros(
            (1, 3, state.config().tile_size, state.config().tile_size),
            candle_core::DType::F32,
            &Device::Cpu,
        )?;
        state
            .text_encoder()
            .image_features(&probe)?
            .iter()
            .map(|f| f.dims()[1])
            .collect()
    };
    let disc = Discriminator::new(&scales, mix_seed(cfg.seed, 0xD15C))?;
    let mut opts = Optimizers::new(state, &disc, cfg)?;
    let mut sampler = Sampler::new(records, cfg, &state.config().markers)?;
    let mut log = csv::Writer::from_path(out_dir.join(LOSS_LOG))?;
    log.write_record(["step", "l2", "perceptual", "clip", "adv_g", "adv_d", "total"])?;

    let last_good = out_dir.join(LAST_GOOD);
    save_checkpoint(state, &disc, cfg, 0, &last_good, &extra_meta)?;
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let items = sampler.batch(cfg.batch_size)?;
        let b = match train_step(state, &disc, &mut opts, &items, cfg, step) {
            Ok(b) => b,
            Err(e) => {
                log.flush()?;
                if let Error::NonFinite { step, detail } = e {
                    return Err(Error::NonFinite {
                        step,
                        detail: format!("{detail}; last good checkpoint kept at {}", last_good.display()),
                    });
                }
                return Err(e);
            }
        };
        log.serialize((step, b.l2, b.perceptual, b.clip, b.adv_g, b.adv_d, b.total))?;
        losses.push(b);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
            log.flush()?;
            state.verify_frozen()?;
            if !state.trainable().all_finite()? {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("trainable parameters diverged; last good checkpoint kept at {}", last_good.display()),
                });
            }
            save_checkpoint(state, &disc, cfg, step, &last_good, &extra_meta)?;
            log::info!("step {step}: total {:.4}", b.total);
        }
    }
    log.flush()?;
    state.verify_frozen()?;
    if !state.trainable().all_finite()? {
        return Err(Error::NonFinite {
            step: cfg.total_steps,
            detail: format!("trainable parameters diverged; last good checkpoint kept at {}", last_good.display()),
        });
    }
    let final_path = out_dir.join(FINAL);
    save_checkpoint(state, &disc, cfg, cfg.total_steps, &final_path, &extra_meta)?;
    save_checkpoint(state, &disc, cfg, cfg.total_steps, &last_good, &extra_meta)?;
    Ok(TrainOutcome {
        checkpoint: CheckpointMeta {
            path: final_path,
            step: cfg.total_steps,
            prompt_mode: cfg.prompt_mode,
            base_checksum: state.base_checksum().to_string(),
            pair_checksum: state.pair_checksum().to_string(),
        },
        losses,
        discriminator: disc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stainer::{init_base, ModelConfig};
    use crate::synthdata::{generate_dataset, TissueSpec};
    use crate::training::PairEncoder;

    fn fixture() -> (Vec<SampleRecord>, StainerState) {
        let records = generate_dataset(&TissueSpec::default(), 8, 21).unwrap();
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = init_base(&cfg, &mut rng).unwrap();
        let text = PairEncoder::new(cfg.text_embed_dim, 2).unwrap();
        let state = StainerState::new(cfg.clone(), base, text).unwrap().apply_lora(&cfg, 3).unwrap();
        (records, state)
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            checkpoint_every: 2,
            allow_unvalidated: true,
            ..Default::default()
        }
    }

    #[test]
    fn multiplex_pairing_is_rejected() {
        let (records, _) = fixture();
        let r = &records[0];
        let both = TrainItem {
            record_seed: r.seed,
            input: &r.input_tile,
            targets: r.targets.iter().map(|(m, t)| (*m, t)).collect(),
            prompt: "x".into(),
        };
        assert!(matches!(check_uniplex(&[both]), Err(Error::Precondition(_))));
        let one = |m: Marker| TrainItem {
            record_seed: r.seed,
            input: &r.input_tile,
            targets: [(m, r.target(m).unwrap())].into_iter().collect(),
            prompt: "x".into(),
        };
        assert!(check_uniplex(&[one(Marker::Nuclear)]).is_ok());
        assert!(check_uniplex(&[one(Marker::Nuclear), one(Marker::Cyto)]).is_err());
    }

    #[test]
    fn sampler_respects_mode() {
        let (records, _) = fixture();
        let cfg = TrainConfig {
            prompt_mode: TrainMode::SMPP,
            ..Default::default()
        };
        let mut s = Sampler::new(&records, &cfg, &Marker::ALL).unwrap();
        for _ in 0..20 {
            for item in s.batch(2).unwrap() {
                assert_eq!(item.marker().unwrap(), Marker::Nuclear);
                assert!(!records.iter().find(|r| r.seed == item.record_seed).unwrap().is_negative);
            }
        }
    }

    #[test]
    fn short_run_keeps_base_and_logs_every_step() {
        let (records, state) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let before = state.base().checksum().unwrap();
        let train_before = state.trainable().checksum().unwrap();
        let out = train_loop(&records, &state, &quick(3), dir.path(), serde_json::Value::Null).unwrap();
        assert_eq!(state.base().checksum().unwrap(), before);
        assert_ne!(state.trainable().checksum().unwrap(), train_before);
        assert_eq!(out.losses.len(), 3);
        for b in &out.losses {
            assert!((b.total - (b.rec + 4.0 * b.clip + 0.4 * b.adv_g)).abs() <= 1e-5);
        }
        let rows = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(rows.lines().count(), 4);
        assert!(dir.path().join(FINAL).is_file());
    }

    #[test]
    fn unvalidated_encoder_is_refused() {
        let (records, state) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            allow_unvalidated: false,
            ..quick(1)
        };
        assert!(matches!(
            train_loop(&records, &state, &cfg, dir.path(), serde_json::Value::Null),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn divergence_halts_and_keeps_last_good() {
        let (records, state) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr_generator: 1e30,
            lr_discriminator: 1e30,
            ..quick(6)
        };
        let err = train_loop(&records, &state, &cfg, dir.path(), serde_json::Value::Null).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        let (back, _) = StainerState::load(&dir.path().join(LAST_GOOD)).unwrap();
        assert!(back.trainable().all_finite().unwrap());
        assert!(!dir.path().join(FINAL).exists());
    }
}
