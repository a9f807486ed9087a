//! Small neural-network toolkit on top of candle tensors.

mod ops;
mod params;

pub use ops::{conv2d, upsample2};
pub use params::{Init, ParamSet};

use candle_core::{Device, Tensor, D};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Resolves layer weights from a base set plus an optional adapter set.
///
/// Adapter entries named like a base entry replace it outright. Entries
/// `<layer>.lora_down` / `<layer>.lora_up` add a low-rank delta to
/// `<layer>.weight`, merged before the layer runs.
#[derive(Clone, Copy)]
pub struct Layers<'a> {
    base: &'a ParamSet,
    adapters: Option<&'a ParamSet>,
    lora_scale: f64,
}

impl<'a> Layers<'a> {
    pub fn new(base: &'a ParamSet, adapters: Option<&'a ParamSet>, lora_scale: f64) -> Self {
        Self {
            base,
            adapters,
            lora_scale,
        }
    }

    pub fn base_only(base: &'a ParamSet) -> Self {
        Self::new(base, None, 0.0)
    }

    pub fn adapters(&self) -> Option<&'a ParamSet> {
        self.adapters
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        match self.adapters {
            Some(a) if a.contains(name) => a.tensor(name),
            _ => self.base.tensor(name),
        }
    }

    fn weight(&self, layer: &str) -> Result<Tensor> {
        let w = self.param(&format!("{layer}.weight"))?;
        if let Some(a) = self.adapters {
            let down = format!("{layer}.lora_down");
            if a.contains(&down) {
                let down = a.tensor(&down)?;
                let up = a.tensor(&format!("{layer}.lora_up"))?;
                let delta = (up.matmul(&down)? * self.lora_scale)?.reshape(w.shape())?;
                return Ok((w + delta)?);
            }
        }
        Ok(w)
    }

    fn bias(&self, layer: &str) -> Result<Option<Tensor>> {
        let name = format!("{layer}.bias");
        let present = self.base.contains(&name) || self.adapters.is_some_and(|a| a.contains(&name));
        if present {
            Ok(Some(self.param(&name)?))
        } else {
            Ok(None)
        }
    }

    pub fn conv(&self, layer: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let w = self.weight(layer)?;
        let k = w.dims()[2];
        let b = self.bias(layer)?;
        Ok(conv2d(x, &w, b.as_ref(), stride, k / 2)?)
    }

    /// `x: (N, in) -> (N, out)`.
    pub fn linear(&self, layer: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.weight(layer)?;
        let y = x.matmul(&w.t()?)?;
        Ok(match self.bias(layer)? {
            Some(b) => y.broadcast_add(&b)?,
            None => y,
        })
    }
}

/// Registers a conv layer `(out, in, k, k)` with zero bias.
pub fn init_conv<R: rand::Rng>(
    p: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    p.init(&format!("{name}.weight"), &[cout, cin, k, k], Init::He(gain), rng)?;
    p.init(&format!("{name}.bias"), &[cout], Init::Zeros, rng)
}

/// Registers a linear layer `(out, in)` with zero bias.
pub fn init_linear<R: rand::Rng>(
    p: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    gain: f64,
    rng: &mut R,
) -> Result<()> {
    p.init(&format!("{name}.weight"), &[cout, cin], Init::He(gain), rng)?;
    p.init(&format!("{name}.bias"), &[cout], Init::Zeros, rng)
}

/// Unit-normalizes along `dim`.
pub fn l2_normalize(x: &Tensor, dim: usize) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(dim)? + 1e-10)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Cosine similarity along the last dimension.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a = l2_normalize(a, a.rank() - 1)?;
    let b = l2_normalize(b, b.rank() - 1)?;
    Ok((a * b)?.sum(D::Minus1)?)
}

/// Gaussian tensor drawn from a seeded ChaCha stream.
pub fn seeded_normal(shape: &[usize], std: f64, seed: u64) -> Result<Tensor> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Scalar value of a rank-0 tensor.
pub fn scalar(t: &Tensor) -> Result<f32> {
    Ok(t.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?)
}

/// Mixes a stream id into a seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
