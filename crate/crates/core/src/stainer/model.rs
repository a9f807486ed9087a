//! Encoder, prompt-conditioned UNet and decoder as pure functions of resolved layers.

use candle_core::{Device, Tensor};
use candle_nn::ops::silu;
use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_linear, upsample2, Layers, ParamSet};

pub(crate) const LATENT_SCALE: &str = "enc.latent_scale";

/// Randomly initialized base parameters for encoder, UNet and decoder.
pub fn init_base<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let ew = cfg.encoder_widths();
    let s = cfg.stages();
    let lc = cfg.latent_channels;

    init_conv(&mut p, "enc.stem", 3, ew[0], 3, 1.0, rng)?;
    for i in 0..s {
        init_conv(&mut p, &format!("enc.down{i}"), ew[i], ew[i + 1], 3, 1.0, rng)?;
    }
    init_conv(&mut p, "enc.out", ew[s], lc, 1, 0.5, rng)?;
    p.insert(LATENT_SCALE, Tensor::ones(1, candle_core::DType::F32, &Device::Cpu)?)?;

    let uw = &cfg.unet_widths;
    let last = uw.len() - 1;
    init_linear(
        &mut p,
        "unet.cond",
        cfg.text_embed_dim + cfg.time_embed_dim,
        cfg.cond_dim,
        1.0,
        rng,
    )?;
    init_conv(&mut p, "unet.in", lc, uw[0], 3, 1.0, rng)?;
    for i in 0..last {
        init_res(&mut p, &format!("unet.d{i}"), uw[i], cfg.cond_dim, rng)?;
        init_conv(&mut p, &format!("unet.down{i}"), uw[i], uw[i + 1], 3, 1.0, rng)?;
        init_conv(&mut p, &format!("unet.up{i}"), uw[i + 1] + uw[i], uw[i], 3, 1.0, rng)?;
        init_res(&mut p, &format!("unet.u{i}"), uw[i], cfg.cond_dim, rng)?;
    }
    init_res(&mut p, "unet.mid", uw[last], cfg.cond_dim, rng)?;
    init_conv(&mut p, "unet.out", uw[0], lc, 3, 0.1, rng)?;

    init_conv(&mut p, "dec.in", lc, ew[s], 3, 1.0, rng)?;
    for i in (0..s).rev() {
        init_conv(&mut p, &format!("dec.up{i}"), ew[i + 1], ew[i], 3, 1.0, rng)?;
    }
    init_conv(&mut p, "dec.out", ew[0], 3, 3, 0.5, rng)?;
    Ok(p)
}

fn init_res<R: Rng>(p: &mut ParamSet, name: &str, w: usize, cond: usize, rng: &mut R) -> Result<()> {
    init_conv(p, &format!("{name}.conv1"), w, w, 3, 1.0, rng)?;
    init_conv(p, &format!("{name}.conv2"), w, w, 3, 0.3, rng)?;
    init_linear(p, &format!("{name}.film"), cond, 2 * w, 0.1, rng)
}

/// Sinusoidal embedding of the fixed conditioning timestep, `(1, dim)`.
pub fn timestep_embedding(index: usize, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let t = index as f64;
    let mut v = vec![0f32; dim];
    for k in 0..half {
        let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v[k] = (t * f).sin() as f32;
        v[half + k] = (t * f).cos() as f32;
    }
    Ok(Tensor::from_vec(v, (1, dim), &Device::Cpu)?)
}

fn res_block(l: &Layers, name: &str, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
    let w = x.dims()[1];
    let n = x.dims()[0];
    let h = l.conv(&format!("{name}.conv1"), &silu(x)?, 1)?;
    let film = l.linear(&format!("{name}.film"), cond)?;
    let scale = (film.narrow(1, 0, w)? + 1.0)?.reshape((n, w, 1, 1))?;
    let shift = film.narrow(1, w, w)?.reshape((n, w, 1, 1))?;
    let h = h.broadcast_mul(&scale)?.broadcast_add(&shift)?;
    let h = l.conv(&format!("{name}.conv2"), &silu(&h)?, 1)?;
    Ok((x + h)?)
}

/// `x: (N, 3, H, W)` in `[-1, 1]` → latent `(N, C, H/d, W/d)` and per-stage skip features.
pub fn encode(l: &Layers, cfg: &ModelConfig, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let s = cfg.stages();
    let mut skips = Vec::with_capacity(s);
    let mut h = silu(&l.conv("enc.stem", x, 1)?)?;
    for i in 0..s {
        skips.push(h.clone());
        h = silu(&l.conv(&format!("enc.down{i}"), &h, 2)?)?;
    }
    let z = l.conv("enc.out", &h, 1)?;
    let scale = l.param(LATENT_SCALE)?;
    Ok((z.broadcast_mul(&scale.reshape((1, 1, 1, 1))?)?, skips))
}

/// Conditioning vector from prompt embeddings `(N, text_dim)`.
pub fn condition(l: &Layers, cfg: &ModelConfig, text: &Tensor) -> Result<Tensor> {
    let n = text.dims()[0];
    let temb = timestep_embedding(cfg.timestep_index, cfg.time_embed_dim)?.broadcast_as((n, cfg.time_embed_dim))?;
    let c = Tensor::cat(&[text, &temb], 1)?;
    Ok(silu(&l.linear("unet.cond", &c)?)?)
}

/// One denoising pass; returns `xn + Q(xn, c)`.
pub fn unet(l: &Layers, cfg: &ModelConfig, xn: &Tensor, text: &Tensor) -> Result<Tensor> {
    let cond = condition(l, cfg, text)?;
    let last = cfg.unet_widths.len() - 1;
    let mut h = l.conv("unet.in", xn, 1)?;
    let mut stack = Vec::with_capacity(last);
    for i in 0..last {
        h = res_block(l, &format!("unet.d{i}"), &h, &cond)?;
        stack.push(h.clone());
        h = silu(&l.conv(&format!("unet.down{i}"), &h, 2)?)?;
    }
    h = res_block(l, "unet.mid", &h, &cond)?;
    for i in (0..last).rev() {
        let skip = stack.pop().expect("one skip per level");
        h = Tensor::cat(&[&upsample2(&h)?, &skip], 1)?;
        h = silu(&l.conv(&format!("unet.up{i}"), &h, 1)?)?;
        h = res_block(l, &format!("unet.u{i}"), &h, &cond)?;
    }
    let out = l.conv("unet.out", &silu(&h)?, 1)?;
    Ok((xn + out)?)
}

/// Latent → image in `[-1, 1]`. With `skips`, each stage adds the projected
/// encoder feature of matching resolution.
pub fn decode(l: &Layers, cfg: &ModelConfig, y: &Tensor, skips: Option<&[Tensor]>) -> Result<Tensor> {
    let s = cfg.stages();
    if let Some(sk) = skips {
        if sk.len() != s {
            return Err(Error::shape(format!("{s} skip features"), sk.len()));
        }
    }
    let scale = l.param(LATENT_SCALE)?.reshape((1, 1, 1, 1))?;
    let mut h = silu(&l.conv("dec.in", &y.broadcast_div(&scale)?, 1)?)?;
    for i in (0..s).rev() {
        h = upsample2(&h)?;
        if let Some(sk) = skips {
            h = (h + l.conv(&format!("dec.skip{i}"), &sk[i], 1)?)?;
        }
        h = silu(&l.conv(&format!("dec.up{i}"), &h, 1)?)?;
    }
    Ok(l.conv("dec.out", &h, 1)?.tanh()?)
}
