//! Reconstruction, alignment and adversarial objectives.

use candle_core::{Tensor, D};
use candle_nn::ops::silu;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pair::PairEncoder;
use crate::error::{Error, Result};
use crate::nn::{cosine, init_conv, l2_normalize, Layers, ParamSet};

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2: f64,
    pub perceptual: f64,
    pub rec: f64,
    pub clip: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total: f64,
}

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_clip: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_clip: 4.0, w_adv: 0.4 }
    }
}

/// `total = rec + w_clip·clip + w_adv·adv_g` with `rec = l2 + perceptual`.
/// Any non-finite part is an error naming the step.
pub fn total_loss(
    l2: f64,
    perceptual: f64,
    clip: f64,
    adv_g: f64,
    adv_d: f64,
    w: LossWeights,
    step: usize,
) -> Result<LossBreakdown> {
    let parts = [("l2", l2), ("perceptual", perceptual), ("clip", clip), ("adv_g", adv_g), ("adv_d", adv_d)];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: format!("{name} = {v}"),
        });
    }
    let rec = l2 + perceptual;
    Ok(LossBreakdown {
        l2,
        perceptual,
        rec,
        clip,
        adv_g,
        adv_d,
        total: rec + w.w_clip * clip + w.w_adv * adv_g,
    })
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(b.dims(), a.dims()));
    }
    Ok(())
}

/// Mean squared error on normalized pixels.
pub fn l2_loss(gen: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(gen, gt)?;
    Ok((gen - gt)?.sqr()?.mean_all()?)
}

/// Sum over scales of the mean squared distance between channel-normalized features.
pub fn perceptual_from_features(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let mut total: Option<Tensor> = None;
    for (fa, fb) in a.iter().zip(b) {
        same_shape(fa, fb)?;
        let d = (l2_normalize(fa, 1)? - l2_normalize(fb, 1)?)?
            .sqr()?
            .sum(1)?
            .mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `(l2, perceptual)` between generated and ground-truth batches.
pub fn rec_loss(pair: &PairEncoder, gen: &Tensor, gt: &Tensor) -> Result<(Tensor, Tensor)> {
    let l2 = l2_loss(gen, gt)?;
    let p = perceptual_from_features(&pair.image_features(gen)?, &pair.image_features(gt)?)?;
    Ok((l2, p))
}

/// Mean of `1 − cos(image_embedding, prompt_embedding)` over the batch.
pub fn clip_alignment_from_embedding(img: &Tensor, text: &Tensor) -> Result<Tensor> {
    same_shape(img, text)?;
    Ok((1.0 - cosine(img, text)?)?.mean_all()?)
}

pub fn clip_alignment_loss(pair: &PairEncoder, gen: &Tensor, text: &Tensor) -> Result<Tensor> {
    clip_alignment_from_embedding(&pair.embed_images(gen)?, text)
}

/// Discriminator loss: `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_d(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// Generator loss: `−mean(D(fake))`.
pub fn hinge_g(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

const HEAD_WIDTH: usize = 16;

/// Patch discriminator: one small trainable head per frozen feature scale.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamSet,
}

impl Discriminator {
    pub fn new(scale_channels: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for (i, &c) in scale_channels.iter().enumerate() {
            init_conv(&mut p, &format!("s{i}.c1"), c, HEAD_WIDTH, 3, 1.0, &mut rng)?;
            init_conv(&mut p, &format!("s{i}.c2"), HEAD_WIDTH, 1, 1, 0.5, &mut rng)?;
        }
        Ok(Self { params: p })
    }

    pub fn from_params(params: ParamSet) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn heads(params: &ParamSet, feats: &[Tensor]) -> Result<Tensor> {
        let l = Layers::base_only(params);
        let mut out = Vec::with_capacity(feats.len());
        for (i, f) in feats.iter().enumerate() {
            let h = silu(&l.conv(&format!("s{i}.c1"), f, 1)?)?;
            let logit = l.conv(&format!("s{i}.c2"), &h, 1)?;
            out.push(logit.flatten_from(1)?);
        }
        Ok(Tensor::cat(&out, D::Minus1)?)
    }

    /// Patch logits `(N, P)` with gradients into the heads.
    pub fn logits(&self, feats: &[Tensor]) -> Result<Tensor> {
        Self::heads(&self.params, feats)
    }

    /// Patch logits through detached heads: gradients reach only `feats`.
    pub fn logits_frozen(&self, feats: &[Tensor]) -> Result<Tensor> {
        Self::heads(&self.params.frozen_view(), feats)
    }
}

/// `(adv_g, adv_d)`. `adv_g` sees detached heads; `adv_d` sees detached fakes.
pub fn adv_losses(disc: &Discriminator, fake: &[Tensor], real: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let adv_g = hinge_g(&disc.logits_frozen(fake)?)?;
    let fake_d: Vec<Tensor> = fake.iter().map(Tensor::detach).collect();
    let real_d: Vec<Tensor> = real.iter().map(Tensor::detach).collect();
    let adv_d = hinge_d(&disc.logits(&real_d)?, &disc.logits(&fake_d)?)?;
    Ok((adv_g, adv_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, seeded_normal};
    use candle_core::{Device, Var};

    #[test]
    fn default_weights_arithmetic() {
        let w = LossWeights::default();
        let b = total_loss(0.6, 0.4, 0.5, 0.25, 1.0, w, 0).unwrap();
        assert!((b.total - 3.1).abs() < 1e-12);
        assert_eq!(b.rec, 1.0);
        let b = total_loss(0.6, 0.4, 0.5, 0.25, 1.0, LossWeights { w_clip: 0.0, w_adv: 0.0 }, 0).unwrap();
        assert_eq!(b.total, b.rec);
        assert_eq!(total_loss(0., 0., 0., 0., 0., w, 0).unwrap().total, 0.0);
        assert!(matches!(total_loss(f64::NAN, 0., 0., 0., 0., w, 7), Err(Error::NonFinite { step: 7, .. })));
    }

    #[test]
    fn l2_of_constant_offset() {
        let a = seeded_normal(&[1, 3, 8, 8], 0.3, 1).unwrap();
        let b = (&a + 0.1).unwrap();
        assert!((scalar(&l2_loss(&b, &a).unwrap()).unwrap() - 0.01).abs() < 1e-6);
        assert_eq!(scalar(&l2_loss(&a, &a).unwrap()).unwrap(), 0.0);
        assert!(l2_loss(&a, &a.narrow(2, 0, 4).unwrap()).is_err());
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_identity() {
        let enc = PairEncoder::new(8, 2).unwrap();
        let a = seeded_normal(&[2, 3, 32, 32], 0.5, 1).unwrap();
        let b = seeded_normal(&[2, 3, 32, 32], 0.5, 2).unwrap();
        let (_, pab) = rec_loss(&enc, &a, &b).unwrap();
        let (_, pba) = rec_loss(&enc, &b, &a).unwrap();
        assert!((scalar(&pab).unwrap() - scalar(&pba).unwrap()).abs() < 1e-6);
        let (l, p) = rec_loss(&enc, &a, &a).unwrap();
        assert_eq!((scalar(&l).unwrap(), scalar(&p).unwrap()), (0.0, 0.0));
    }

    #[test]
    fn clip_loss_bounds() {
        let t = Tensor::new(&[[0.6f32, 0.8]], &Device::Cpu).unwrap();
        assert!(scalar(&clip_alignment_from_embedding(&t, &t).unwrap()).unwrap().abs() < 1e-6);
        let n = t.neg().unwrap();
        assert!((scalar(&clip_alignment_from_embedding(&n, &t).unwrap()).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn hinge_with_zero_logits() {
        let z = Tensor::zeros((2, 5), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert_eq!(scalar(&hinge_d(&z, &z).unwrap()).unwrap(), 2.0);
        assert_eq!(scalar(&hinge_g(&z).unwrap()).unwrap(), 0.0);
        // A separating discriminator scores lower than a blind one.
        let real = (z.ones_like().unwrap() * 2.0).unwrap();
        let fake = (z.ones_like().unwrap() * -2.0).unwrap();
        assert!(scalar(&hinge_d(&real, &fake).unwrap()).unwrap() < scalar(&hinge_d(&z, &z).unwrap()).unwrap());
    }

    #[test]
    fn adversarial_gradients_are_isolated() {
        let enc = PairEncoder::new(8, 2).unwrap();
        let disc = Discriminator::new(&[16, 32, 64], 3).unwrap();
        let gen_param = Var::from_tensor(&seeded_normal(&[1, 3, 32, 32], 0.5, 4).unwrap()).unwrap();
        let fake = enc.image_features(gen_param.as_tensor()).unwrap();
        let real = enc.image_features(&seeded_normal(&[1, 3, 32, 32], 0.5, 5).unwrap()).unwrap();
        let (g, d) = adv_losses(&disc, &fake, &real).unwrap();
        let gg = g.backward().unwrap();
        assert!(gg.get(gen_param.as_tensor()).is_some());
        for v in disc.params().all_vars() {
            assert!(gg.get(v.as_tensor()).is_none());
        }
        let gd = d.backward().unwrap();
        assert!(gd.get(gen_param.as_tensor()).is_none());
        assert!(disc.params().all_vars().iter().any(|v| gd.get(v.as_tensor()).is_some()));
    }
}
