use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// He-normal scaled by `gain`, using the trailing dimensions as fan-in.
    He(f64),
}

/// A named, ordered collection of parameters.
///
/// A frozen set hands out detached tensors, so nothing downstream can build a
/// gradient path into it.
#[derive(Clone)]
pub struct ParamSet {
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamSet")
            .field("tensors", &self.vars.len())
            .field("params", &self.num_params())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * std) as f32
                })
                .collect(),
            Init::He(gain) => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let std = gain * (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (z * std) as f32
                    })
                    .collect()
            }
        };
        self.insert(name, Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        let t = t.to_dtype(DType::F32)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Tensor for `name`; tracked for gradients unless the set is frozen.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        Ok(if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        })
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.vars.get(name).map(|v| v.dims())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen handle sharing storage with `self`: reads see later updates,
    /// but tensors it hands out are detached.
    pub fn frozen_view(&self) -> ParamSet {
        ParamSet {
            vars: self.vars.clone(),
            frozen: true,
        }
    }

    /// Independent copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamSet::new();
        for (k, v) in &self.vars {
            out.insert(k, v.as_tensor().copy()?)?;
        }
        out.frozen = self.frozen;
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if v.as_tensor()
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .any(|x| !x.is_finite())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Overwrites this set's values with those of `other` (same names and shapes).
    pub fn assign_from(&self, other: &ParamSet) -> Result<()> {
        for (k, v) in &self.vars {
            let src = other
                .vars
                .get(k)
                .ok_or_else(|| Error::config(format!("missing parameter `{k}`")))?;
            v.set(src.as_tensor())?;
        }
        Ok(())
    }

    /// Tensors keyed by `prefix + name`, for serialization.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_tensor().clone()))
            .collect()
    }

    /// Builds a set from every entry of `tensors` starting with `prefix`.
    pub fn import(tensors: &std::collections::HashMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let mut out = ParamSet::new();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(prefix) {
                out.insert(name, t.clone())?;
            }
        }
        Ok(out)
    }
}
