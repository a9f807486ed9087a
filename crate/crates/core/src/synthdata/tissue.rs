//! Procedural paired tissue tiles.
//!
//! Glands are rings of cytoplasm with elliptical nuclei spaced around the
//! ring, on a textured stroma. Every tile is rendered three times from the same
//! geometry: an H&E-like input and one IHC-like target per marker, so pairs are
//! registered by construction.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::prompts::{Marker, Polarity, PromptBank, PromptMode, PromptSpec};
use crate::error::{Error, Result};
use crate::image::{Mask, Tile};
use crate::nn::mix_seed;

/// Where the stroma texture pattern comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureSeedMode {
    /// Fresh texture for every tile.
    PerTile,
    /// One texture shared by all tiles.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorStat {
    pub mean: [f64; 3],
    /// Per-tile uniform jitter applied to each channel.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorParams {
    pub hematoxylin: ColorStat,
    pub eosin: ColorStat,
    pub dab: ColorStat,
}

impl Default for ColorParams {
    fn default() -> Self {
        Self {
            hematoxylin: ColorStat {
                mean: [70.0, 60.0, 150.0],
                jitter: 8.0,
            },
            eosin: ColorStat {
                mean: [215.0, 120.0, 170.0],
                jitter: 8.0,
            },
            dab: ColorStat {
                mean: [100.0, 70.0, 40.0],
                jitter: 10.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueSpec {
    pub tile_size: u32,
    /// Tiles must be divisible by the model's downsampling factor.
    pub downsample_factor: u32,
    pub gland_count_range: [u32; 2],
    pub nuclei_per_gland_range: [u32; 2],
    pub background_texture_seed_mode: TextureSeedMode,
    pub negative_fraction: f64,
    pub color_params: ColorParams,
}

impl Default for TissueSpec {
    fn default() -> Self {
        Self {
            tile_size: 64,
            downsample_factor: 4,
            gland_count_range: [1, 3],
            nuclei_per_gland_range: [8, 12],
            background_texture_seed_mode: TextureSeedMode::PerTile,
            negative_fraction: 0.2,
            color_params: ColorParams::default(),
        }
    }
}

impl TissueSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 32 {
            return Err(Error::config(format!("tile_size must be >= 32, got {}", self.tile_size)));
        }
        if self.downsample_factor == 0 || !self.tile_size.is_multiple_of(self.downsample_factor) {
            return Err(Error::config(format!(
                "tile_size {} is not a multiple of the downsampling factor {}",
                self.tile_size, self.downsample_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return Err(Error::config(format!(
                "negative_fraction must be in [0, 1], got {}",
                self.negative_fraction
            )));
        }
        let [g0, g1] = self.gland_count_range;
        let [n0, n1] = self.nuclei_per_gland_range;
        if g0 > g1 || n0 > n1 {
            return Err(Error::config("integer ranges must be ordered as [min, max]"));
        }
        if n0 == 0 && g1 > 0 {
            return Err(Error::config("glands need at least one nucleus"));
        }
        let cp = &self.color_params;
        for (name, c) in [("hematoxylin", cp.hematoxylin), ("eosin", cp.eosin), ("dab", cp.dab)] {
            if c.mean.iter().any(|v| !(0.0..=255.0).contains(v)) {
                return Err(Error::config(format!("{name} color mean must be an RGB triple in [0, 255]")));
            }
            if c.jitter.is_nan() || c.jitter < 0.0 {
                return Err(Error::config(format!("{name} jitter must be >= 0")));
            }
        }
        Ok(())
    }
}

/// One paired example: input, per-marker targets and compartment ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub input_tile: Tile,
    pub targets: BTreeMap<Marker, Tile>,
    pub gland_mask: Mask,
    pub nuclei_mask: Mask,
    pub cytoplasm_mask: Mask,
    pub is_negative: bool,
    /// One prompt per (marker, mode), sorted.
    pub prompts: Vec<PromptSpec>,
}

impl SampleRecord {
    pub fn prompt(&self, marker: Marker, mode: PromptMode) -> Option<&PromptSpec> {
        self.prompts.iter().find(|p| p.marker == marker && p.mode == mode)
    }

    pub fn target(&self, marker: Marker) -> Result<&Tile> {
        self.targets
            .get(&marker)
            .ok_or_else(|| Error::Precondition(format!("record {} has no {marker} target", self.seed)))
    }

    /// Ground-truth compartment mask for a marker.
    pub fn compartment(&self, marker: Marker) -> &Mask {
        match marker {
            Marker::Nuclear => &self.nuclei_mask,
            Marker::Cyto => &self.cytoplasm_mask,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        let dims = (self.input_tile.width() as usize, self.input_tile.height() as usize);
        let same = self.targets.values().all(|t| (t.width() as usize, t.height() as usize) == dims)
            && [&self.gland_mask, &self.nuclei_mask, &self.cytoplasm_mask]
                .iter()
                .all(|m| m.dims() == dims);
        if !same {
            return Err(Error::Precondition("record images differ in size".into()));
        }
        if !self.nuclei_mask.is_subset_of(&self.gland_mask)
            || !self.cytoplasm_mask.is_subset_of(&self.gland_mask)
            || !self.nuclei_mask.and(&self.cytoplasm_mask).is_empty()
        {
            return Err(Error::Precondition("compartment masks are inconsistent".into()));
        }
        let empty = self.gland_mask.is_empty();
        if self.is_negative != empty
            || (empty && !(self.nuclei_mask.is_empty() && self.cytoplasm_mask.is_empty()))
        {
            return Err(Error::Precondition("negative flag disagrees with masks".into()));
        }
        Ok(())
    }
}

/// Low-discrepancy negative assignment: consecutive seeds walk a golden-ratio
/// sequence, so any run of seeds hits the requested fraction closely.
fn seed_is_negative(seed: u64, fraction: f64) -> bool {
    let u = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) as f64 / 18_446_744_073_709_551_616.0;
    u < fraction
}

struct Gland {
    cx: f64,
    cy: f64,
    inner: f64,
    outer: f64,
    nuclei: Vec<Nucleus>,
}

struct Nucleus {
    cx: f64,
    cy: f64,
    /// Radial semi-axis.
    a: f64,
    /// Tangential semi-axis.
    b: f64,
    angle: f64,
}

impl Nucleus {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn pixels(&self, size: usize) -> Vec<(usize, usize)> {
        let r = self.a.max(self.b).ceil() as isize + 1;
        let (x0, y0) = (self.cx.floor() as isize, self.cy.floor() as isize);
        let mut out = Vec::new();
        for y in (y0 - r)..=(y0 + r) {
            for x in (x0 - r)..=(x0 + r) {
                if x >= 0
                    && y >= 0
                    && (x as usize) < size
                    && (y as usize) < size
                    && self.contains(x as f64 + 0.5, y as f64 + 0.5)
                {
                    out.push((x as usize, y as usize));
                }
            }
        }
        out
    }
}

const RING_HALF_WIDTH: f64 = 3.5;
const NUCLEUS_SPACING: f64 = 6.2;
const LAYOUT_ATTEMPTS: usize = 64;

fn ring_radius(nuclei: u32) -> f64 {
    (nuclei as f64 * NUCLEUS_SPACING / (2.0 * PI)).max(7.5)
}

fn touching(a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
    a.iter().any(|&(ax, ay)| {
        b.iter()
            .any(|&(bx, by)| ax.abs_diff(bx) <= 1 && ay.abs_diff(by) <= 1)
    })
}

fn place_nuclei(rng: &mut ChaCha8Rng, cx: f64, cy: f64, rm: f64, n: u32, size: usize) -> Vec<Nucleus> {
    let step = 2.0 * PI / n as f64;
    let phase = rng.random_range(0.0..step);
    let mut out: Vec<Nucleus> = Vec::with_capacity(n as usize);
    let mut rendered: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n as usize);
    for k in 0..n {
        let base = phase + step * k as f64;
        let mut chosen = None;
        // Jittered placement first; fall back to the unjittered slot, which is
        // always separated from its neighbours by the ring spacing.
        for attempt in 0..6 {
            let jitter = if attempt < 5 { 1.0 } else { 0.0 };
            let theta = base + jitter * rng.random_range(-0.08..0.08) * step;
            let r = rm + jitter * rng.random_range(-0.5..0.5);
            let nuc = Nucleus {
                cx: cx + r * theta.cos(),
                cy: cy + r * theta.sin(),
                a: 1.7 + jitter * rng.random_range(-0.2..0.2),
                b: 1.3 + jitter * rng.random_range(-0.15..0.15),
                angle: theta,
            };
            let px = nuc.pixels(size);
            let clash = px.is_empty() || rendered.iter().any(|p| touching(p, &px));
            if !clash || attempt == 5 {
                chosen = Some((nuc, px));
                break;
            }
        }
        let (nuc, px) = chosen.expect("loop always yields on the last attempt");
        out.push(nuc);
        rendered.push(px);
    }
    out
}

/// Greedy rejection placement, restarted from scratch until every requested
/// gland fits or the layout budget runs out; the fullest layout wins.
fn place_glands(spec: &TissueSpec, rng: &mut ChaCha8Rng, count: u32) -> Vec<Gland> {
    let size = spec.tile_size as f64;
    let radii: Vec<(u32, f64)> = (0..count)
        .map(|_| {
            let n = rng.random_range(spec.nuclei_per_gland_range[0]..=spec.nuclei_per_gland_range[1]);
            (n, ring_radius(n))
        })
        .collect();
    let mut best: Vec<(f64, f64, u32, f64)> = Vec::new();
    for _ in 0..LAYOUT_ATTEMPTS {
        let mut centers: Vec<(f64, f64, u32, f64)> = Vec::new();
        for &(n, rm) in &radii {
            let outer = rm + RING_HALF_WIDTH;
            let (lo, hi) = (outer + 1.0, size - outer - 1.0);
            if hi <= lo {
                continue;
            }
            for _ in 0..200 {
                let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
                let clear = centers.iter().all(|&(gx, gy, _, grm)| {
                    ((gx - cx).powi(2) + (gy - cy).powi(2)).sqrt() >= grm + RING_HALF_WIDTH + outer + 3.0
                });
                if clear {
                    centers.push((cx, cy, n, rm));
                    break;
                }
            }
        }
        if centers.len() > best.len() {
            best = centers;
        }
        if best.len() == radii.len() {
            break;
        }
    }
    best.into_iter()
        .map(|(cx, cy, n, rm)| Gland {
            cx,
            cy,
            inner: rm - RING_HALF_WIDTH,
            outer: rm + RING_HALF_WIDTH,
            nuclei: place_nuclei(rng, cx, cy, rm, n, spec.tile_size as usize),
        })
        .collect()
}

/// Smooth value noise in roughly `[-1, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 * scale;
            let fy = y as f64 * scale;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
            let v00 = grid[iy * g + ix];
            let v10 = grid[iy * g + ix + 1];
            let v01 = grid[(iy + 1) * g + ix];
            let v11 = grid[(iy + 1) * g + ix + 1];
            out[y * size + x] =
                (v00 * (1.0 - sx) + v10 * sx) * (1.0 - sy) + (v01 * (1.0 - sx) + v11 * sx) * sy;
        }
    }
    out
}

fn jittered(rng: &mut ChaCha8Rng, c: &ColorStat) -> [f64; 3] {
    let mut out = c.mean;
    if c.jitter > 0.0 {
        for v in &mut out {
            *v += rng.random_range(-c.jitter..=c.jitter);
        }
    }
    out
}

fn put(img: &mut RgbImage, x: usize, y: usize, c: [f64; 3], delta: f64) {
    let px = [
        (c[0] + delta).round().clamp(0.0, 255.0) as u8,
        (c[1] + delta).round().clamp(0.0, 255.0) as u8,
        (c[2] + delta).round().clamp(0.0, 255.0) as u8,
    ];
    img.put_pixel(x as u32, y as u32, Rgb(px));
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Stroma,
    Lumen,
    Cytoplasm,
    Nucleus,
}

/// Renders one tile. Deterministic for `(spec, seed)`.
pub fn generate_tile(spec: &TissueSpec, seed: u64) -> Result<SampleRecord> {
    spec.validate()?;
    let size = spec.tile_size as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7155_0E00));

    let negative_draw = seed_is_negative(seed, spec.negative_fraction);
    let count = if negative_draw {
        0
    } else {
        rng.random_range(spec.gland_count_range[0]..=spec.gland_count_range[1])
    };
    let glands = place_glands(spec, &mut rng, count);

    let mut region = vec![Region::Stroma; size * size];
    let mut gland_mask = Mask::new(size, size);
    for g in &glands {
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let r = ((px - g.cx).powi(2) + (py - g.cy).powi(2)).sqrt();
                if r <= g.outer {
                    gland_mask.set(x, y, true);
                    region[y * size + x] = if r < g.inner { Region::Lumen } else { Region::Cytoplasm };
                }
            }
        }
    }
    let mut nuclei_mask = Mask::new(size, size);
    for g in &glands {
        for n in &g.nuclei {
            for (x, y) in n.pixels(size) {
                nuclei_mask.set(x, y, true);
                region[y * size + x] = Region::Nucleus;
            }
        }
    }
    let cytoplasm_mask = Mask::from_fn(size, size, |x, y| region[y * size + x] == Region::Cytoplasm);
    let is_negative = gland_mask.is_empty();

    let cp = &spec.color_params;
    let hema = jittered(&mut rng, &cp.hematoxylin);
    let eosin = jittered(&mut rng, &cp.eosin);
    let dab = jittered(&mut rng, &cp.dab);
    let mix = |c: [f64; 3], w: f64| [c[0] * (1.0 - w) + 255.0 * w, c[1] * (1.0 - w) + 255.0 * w, c[2] * (1.0 - w) + 255.0 * w];
    let stroma_he = mix(eosin, 0.45);
    let lumen_he = [248.0, 240.0, 245.0];
    let counterstain = mix(hema, 0.45);
    let cyto_ihc = [226.0, 220.0, 232.0];
    let stroma_ihc = [238.0, 236.0, 240.0];
    let lumen_ihc = [250.0, 250.0, 252.0];

    let texture = match spec.background_texture_seed_mode {
        TextureSeedMode::PerTile => value_noise(&mut rng, size, 8),
        TextureSeedMode::Shared => value_noise(&mut ChaCha8Rng::seed_from_u64(0x5EED_7E47), size, 8),
    };
    let grain: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut input = RgbImage::new(size as u32, size as u32);
    let mut nuclear = RgbImage::new(size as u32, size as u32);
    let mut cyto = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (tex, gr) = (texture[i], grain[i]);
            match region[i] {
                Region::Stroma => {
                    put(&mut input, x, y, stroma_he, 12.0 * tex + 4.0 * gr);
                    put(&mut nuclear, x, y, stroma_ihc, 4.0 * tex + 2.0 * gr);
                    put(&mut cyto, x, y, stroma_ihc, 4.0 * tex + 2.0 * gr);
                }
                Region::Lumen => {
                    put(&mut input, x, y, lumen_he, 3.0 * gr);
                    put(&mut nuclear, x, y, lumen_ihc, 2.0 * gr);
                    put(&mut cyto, x, y, lumen_ihc, 2.0 * gr);
                }
                Region::Cytoplasm => {
                    put(&mut input, x, y, eosin, 6.0 * tex + 4.0 * gr);
                    put(&mut nuclear, x, y, cyto_ihc, 3.0 * gr);
                    put(&mut cyto, x, y, dab, 4.0 * gr);
                }
                Region::Nucleus => {
                    put(&mut input, x, y, hema, 4.0 * gr);
                    put(&mut nuclear, x, y, dab, 4.0 * gr);
                    put(&mut cyto, x, y, counterstain, 3.0 * gr);
                }
            }
        }
    }

    let bank = PromptBank::builtin();
    let polarity = Polarity::of_tile(is_negative);
    let mut prompts = Vec::new();
    for marker in Marker::ALL {
        for mode in PromptMode::ALL {
            prompts.push(bank.sample(marker, mode, polarity, &mut rng)?);
        }
    }

    let mut targets = BTreeMap::new();
    targets.insert(Marker::Nuclear, nuclear);
    targets.insert(Marker::Cyto, cyto);
    let record = SampleRecord {
        seed,
        input_tile: input,
        targets,
        gland_mask,
        nuclei_mask,
        cytoplasm_mask,
        is_negative,
        prompts,
    };
    debug_assert!(record.check_invariants().is_ok());
    Ok(record)
}

/// Per-record seeds for a dataset: consecutive within one base seed so the
/// negative fraction is met closely.
pub fn record_seeds(base_seed: u64, count: usize) -> impl Iterator<Item = u64> {
    (0..count as u64).map(move |i| (base_seed << 32).wrapping_add(i))
}

pub fn generate_dataset(spec: &TissueSpec, count: usize, base_seed: u64) -> Result<Vec<SampleRecord>> {
    record_seeds(base_seed, count)
        .map(|s| generate_tile(spec, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_record() {
        let spec = TissueSpec::default();
        let a = generate_tile(&spec, 7).unwrap();
        let b = generate_tile(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.input_tile.as_raw(), b.input_tile.as_raw());
    }

    #[test]
    fn zero_glands_means_negative() {
        let spec = TissueSpec {
            gland_count_range: [0, 0],
            negative_fraction: 0.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let r = generate_tile(&spec, seed).unwrap();
            assert!(r.is_negative);
            assert!(r.gland_mask.is_empty() && r.nuclei_mask.is_empty() && r.cytoplasm_mask.is_empty());
            assert_eq!(r.targets[&Marker::Nuclear], r.targets[&Marker::Cyto]);
            assert!(r.prompts.iter().all(|p| p.polarity == Polarity::Negative));
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let bad = [
            TissueSpec { tile_size: 16, ..Default::default() },
            TissueSpec { tile_size: 66, ..Default::default() },
            TissueSpec { negative_fraction: 1.5, ..Default::default() },
            TissueSpec { gland_count_range: [3, 1], ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(generate_tile(&spec, 0), Err(Error::Config(_))), "{spec:?}");
        }
        let mut spec = TissueSpec::default();
        spec.color_params.dab.mean = [300.0, 0.0, 0.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn records_satisfy_invariants() {
        let spec = TissueSpec::default();
        for r in generate_dataset(&spec, 40, 3).unwrap() {
            r.check_invariants().unwrap();
            assert_eq!(r.prompts.len(), 10);
        }
    }
}
