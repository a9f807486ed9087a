//! Downstream gland segmenter used by both evaluation protocols.

use candle_core::{Device, Tensor};
use candle_nn::ops::silu;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::masks::dice;
use super::stain::{MaskSource, StainMask};
use crate::checkpoint::{self, CheckpointKind};
use crate::error::{Error, Result};
use crate::image::{tiles_to_tensor, Mask, Tile};
use crate::nn::{init_conv, mix_seed, scalar, upsample2, Layers, ParamSet};
use crate::synthdata::{Marker, SampleRecord};

const PREFIX: &str = "seg.";

/// Which tiles a segmenter is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InputKind {
    /// Stained target tiles (paired protocol).
    Stain,
    /// Input H&E tiles (unpaired protocol).
    InputHe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub width: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            lr: 3e-3,
            width: 12,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMeta {
    pub input_kind: InputKind,
    pub width: usize,
    pub steps: usize,
    pub held_out_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    params: ParamSet,
    meta: SegMeta,
}

impl SegModel {
    fn new(input_kind: InputKind, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let w = width;
        init_conv(&mut p, "e0", 3, w, 3, 1.0, &mut rng)?;
        init_conv(&mut p, "e1", w, 2 * w, 3, 1.0, &mut rng)?;
        init_conv(&mut p, "e2", 2 * w, 4 * w, 3, 1.0, &mut rng)?;
        init_conv(&mut p, "mid", 4 * w, 4 * w, 3, 1.0, &mut rng)?;
        init_conv(&mut p, "d1", 6 * w, 2 * w, 3, 1.0, &mut rng)?;
        init_conv(&mut p, "d0", 3 * w, w, 3, 1.0, &mut rng)?;
        init_conv(&mut p, "out", w, 1, 1, 0.5, &mut rng)?;
        Ok(Self {
            params: p,
            meta: SegMeta {
                input_kind,
                width,
                steps: 0,
                held_out_dice: None,
            },
        })
    }

    pub fn meta(&self) -> &SegMeta {
        &self.meta
    }

    pub fn input_kind(&self) -> InputKind {
        self.meta.input_kind
    }

    /// Gland logits `(N, 1, H, W)` for a `[-1, 1]` batch; `H` and `W` must be multiples of 4.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("sides divisible by 4", (h, w)));
        }
        let l = Layers::base_only(&self.params);
        let e0 = silu(&l.conv("e0", x, 1)?)?;
        let e1 = silu(&l.conv("e1", &e0, 2)?)?;
        let e2 = silu(&l.conv("e2", &e1, 2)?)?;
        let m = silu(&l.conv("mid", &e2, 1)?)?;
        let d1 = silu(&l.conv("d1", &Tensor::cat(&[&upsample2(&m)?, &e1], 1)?, 1)?)?;
        let d0 = silu(&l.conv("d0", &Tensor::cat(&[&upsample2(&d1)?, &e0], 1)?, 1)?)?;
        l.conv("out", &d0, 1)
    }

    fn masks_from_logits(logits: &Tensor) -> Result<Vec<StainMask>> {
        let (n, _, h, w) = logits.dims4()?;
        let v = logits.flatten_all()?.to_vec1::<f32>()?;
        Ok((0..n)
            .map(|i| StainMask {
                pixels: Mask::from_bits(w, h, v[i * h * w..(i + 1) * h * w].iter().map(|&z| z > 0.0).collect())
                    .expect("sized from logits"),
                source: MaskSource::Segmenter,
                threshold_used: 0.5,
            })
            .collect())
    }

    /// Gland masks for several tiles at once.
    pub fn segment_many(&self, tiles: &[&Tile]) -> Result<Vec<StainMask>> {
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(32) {
            let x = tiles_to_tensor(chunk, &Device::Cpu)?;
            out.extend(Self::masks_from_logits(&self.logits(&x)?)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            CheckpointKind::Segmenter,
            &serde_json::to_value(&self.meta)?,
            &self.params.export(PREFIX),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = checkpoint::load(path)?;
        c.expect_kind(CheckpointKind::Segmenter, path)?;
        let meta: SegMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let mut params = ParamSet::import(&c.tensors, PREFIX)?;
        if params.is_empty() {
            return Err(Error::checkpoint(path, "no segmenter tensors"));
        }
        params.freeze();
        Ok(Self { params, meta })
    }
}

/// Probability-0.5 gland mask of one tile.
pub fn segment_glands(model: &SegModel, tile: &Tile) -> Result<StainMask> {
    Ok(model.segment_many(&[tile])?.remove(0))
}

/// `max(z, 0) − z·y + log(1 + e^{−|z|})`, averaged.
fn bce_with_logits(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    let soft = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((z.relu()? - (z * y)?)?.add(&soft)?.mean_all()?)
}

fn training_image(r: &SampleRecord, kind: InputKind, pick: usize) -> Result<&Tile> {
    match kind {
        InputKind::InputHe => Ok(&r.input_tile),
        InputKind::Stain => {
            let m = Marker::ALL[pick % Marker::ALL.len()];
            r.target(m)
        }
    }
}

/// Trains a gland segmenter with binary cross-entropy; the last
/// `holdout_fraction` of records is held out and scored by mean DICE.
pub fn train_gland_segmenter(records: &[SampleRecord], kind: InputKind, cfg: &SegConfig) -> Result<SegModel> {
    if cfg.batch_size == 0 || cfg.width == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::config("segmenter needs batch_size, width >= 1 and holdout in [0, 1)"));
    }
    if records.iter().all(|r| r.gland_mask.is_empty()) {
        return Err(Error::Precondition("segmenter training needs gland masks".into()));
    }
    let holdout = ((records.len() as f64 * cfg.holdout_fraction).round() as usize).min(records.len() / 2);
    let (train, held) = records.split_at(records.len() - holdout);
    let mut model = SegModel::new(kind, cfg.width, mix_seed(cfg.seed, 0x5E6))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5E7));
    let mut opt = AdamW::new(
        model.params.all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    for step in 0..cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let r = &train[rng.random_range(0..train.len())];
            images.push(training_image(r, kind, rng.random_range(0..Marker::ALL.len()))?);
            masks.push(&r.gland_mask);
        }
        let x = tiles_to_tensor(&images, &Device::Cpu)?;
        let (w, h) = masks[0].dims();
        let target: Vec<f32> = masks.iter().flat_map(|m| m.bits().iter().map(|&b| b as u8 as f32)).collect();
        let target = Tensor::from_vec(target, (masks.len(), 1, h, w), &Device::Cpu)?;
        let loss = bce_with_logits(&model.logits(&x)?, &target)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "segmenter loss".into(),
            });
        }
        opt.backward_step(&loss)?;
        if step % 200 == 0 {
            log::debug!("segmenter step {step}: bce {v:.4}");
        }
    }
    model.params.freeze();
    model.meta.steps = cfg.steps;
    if !held.is_empty() {
        let mut images = Vec::new();
        for (i, r) in held.iter().enumerate() {
            images.push(training_image(r, kind, i)?);
        }
        let pred = model.segment_many(&images)?;
        let mut total = 0.0;
        for (p, r) in pred.iter().zip(held) {
            total += dice(&p.pixels, &r.gland_mask)?;
        }
        model.meta.held_out_dice = Some(total / held.len() as f64);
    }
    Ok(model)
}
