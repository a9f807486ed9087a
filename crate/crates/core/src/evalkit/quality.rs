//! Pixel fidelity and distribution distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Tile;

fn same_tile_dims(a: &Tile, b: &Tile) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::shape(a.dimensions(), b.dimensions()));
    }
    Ok(())
}

/// Mean squared error on [0, 1] intensities, times 100.
pub fn mse_pct(a: &Tile, b: &Tile) -> Result<f64> {
    same_tile_dims(a, b)?;
    let n = a.as_raw().len() as f64;
    let s: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum();
    Ok(100.0 * s / n)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a `w×h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WIN, h + 1 - SSIM_WIN);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Gaussian-windowed structural similarity averaged over channels, times 100.
pub fn ssim_pct(a: &Tile, b: &Tile) -> Result<f64> {
    same_tile_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(Error::Metric(format!("ssim needs tiles of at least {SSIM_WIN}x{SSIM_WIN}")));
    }
    let k = gaussian_window();
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.pixels().map(|p| p.0[ch] as f64).collect();
        let pb: Vec<f64> = b.pixels().map(|p| p.0[ch] as f64).collect();
        let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect() };
        let (ma, ..) = filter_valid(&pa, w, h, &k);
        let (mb, ..) = filter_valid(&pb, w, h, &k);
        let (saa, ..) = filter_valid(&prod(|x, _| x * x), w, h, &k);
        let (sbb, ..) = filter_valid(&prod(|_, y| y * y), w, h, &k);
        let (sab, ow, oh) = filter_valid(&prod(|x, y| x * y), w, h, &k);
        let mut s = 0.0;
        for i in 0..ow * oh {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            s += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += s / (ow * oh) as f64;
    }
    Ok(100.0 * total / 3.0)
}

/// Outcome of a Fréchet distance computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidValue {
    pub value: f64,
    /// Covariances were shrunk because a set had fewer than `2·dim` samples.
    pub shrunk: bool,
}

fn mean_cov(x: &[Vec<f64>], shrink: bool) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| xm.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| xm[(i, j)] - mean[j]);
    let s = centered.transpose() * &centered / n as f64;
    if !shrink {
        let unbiased = if n > 1 { &s * (n as f64 / (n - 1) as f64) } else { s };
        return (mean, unbiased);
    }
    // Ledoit-Wolf shrinkage towards a scaled identity.
    let mu = s.trace() / d as f64;
    let target = DMatrix::<f64>::identity(d, d) * mu;
    let d2 = (&s - &target).norm_squared();
    let mut b2 = 0.0;
    for i in 0..n {
        let r = centered.row(i).transpose();
        b2 += (&r * r.transpose() - &s).norm_squared();
    }
    b2 /= (n * n) as f64;
    let lambda = if d2 > 0.0 { (b2.min(d2)) / d2 } else { 1.0 };
    (mean, target * lambda + s * (1.0 - lambda))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// With fewer than `2·dim` samples in either set the covariances are unreliable:
/// `shrinkage` enables Ledoit-Wolf estimates, otherwise this is an error.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>], shrinkage: bool) -> Result<FidValue> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("fid needs at least two samples per set".into()));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Metric("fid feature vectors must share a non-zero dimension".into()));
    }
    let small = a.len() < 2 * d || b.len() < 2 * d;
    if small && !shrinkage {
        return Err(Error::Metric(format!(
            "fid with {} and {} samples in {d} dimensions needs covariance shrinkage",
            a.len(),
            b.len()
        )));
    }
    if small {
        log::warn!("fid: fewer than {} samples, using shrunk covariances", 2 * d);
    }
    let (ma, ca) = mean_cov(a, small);
    let (mb, cb) = mean_cov(b, small);
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(FidValue {
        value: value.max(0.0),
        shrunk: small,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy_tile(seed: u64) -> Tile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(32, 32, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn identical_tiles_are_perfect() {
        let t = noisy_tile(1);
        assert_eq!(mse_pct(&t, &t).unwrap(), 0.0);
        assert!((ssim_pct(&t, &t).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn mse_of_black_and_white_is_hundred() {
        let b = RgbImage::from_pixel(16, 16, Rgb([0, 0, 0]));
        let w = RgbImage::from_pixel(16, 16, Rgb([255, 255, 255]));
        assert_eq!(mse_pct(&b, &w).unwrap(), 100.0);
        assert!(ssim_pct(&b, &w).unwrap() < 1.0);
        assert!(ssim_pct(&b, &RgbImage::new(8, 8)).is_err());
    }

    #[test]
    fn ssim_drops_with_noise() {
        let t = noisy_tile(1);
        let u = noisy_tile(2);
        assert!(ssim_pct(&t, &u).unwrap() < 10.0);
    }

    fn gaussian_set(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..d).map(|_| nd.sample(&mut rng) + shift).collect()).collect()
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let a = gaussian_set(100, 4, 0.0, 1);
        assert!(fid(&a, &a, false).unwrap().value < 1e-6);
    }

    #[test]
    fn fid_matches_closed_form_for_diagonal_gaussians() {
        // Oracle: for commuting covariances FID = |Δμ|² + Σ(√a − √b)².
        let a: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0], vec![0.0, -2.0]];
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] * 3.0 + 1.0, v[1] + 2.0]).collect();
        let va = [0.5f64, 2.0];
        let vb = [4.5f64, 2.0];
        let expect = 1.0 + 4.0 + (0..2).map(|i| va[i].sqrt() - vb[i].sqrt()).map(|x| x * x).sum::<f64>();
        let big_a: Vec<Vec<f64>> = a.iter().cycle().take(400).cloned().collect();
        let big_b: Vec<Vec<f64>> = b.iter().cycle().take(400).cloned().collect();
        let exact = fid(&big_a, &big_b, false).unwrap();
        assert!(!exact.shrunk);
        // Large-n unbiased covariance converges to the population values above.
        assert!((exact.value - expect).abs() < 0.05, "{} vs {expect}", exact.value);
    }

    #[test]
    fn small_sets_need_shrinkage() {
        let a = gaussian_set(10, 8, 0.0, 1);
        let b = gaussian_set(10, 8, 0.5, 2);
        assert!(fid(&a, &b, false).is_err());
        let v = fid(&a, &b, true).unwrap();
        assert!(v.shrunk && v.value.is_finite());
        let far = gaussian_set(10, 8, 3.0, 3);
        assert!(fid(&a, &far, true).unwrap().value > v.value);
    }

    #[test]
    fn ssim_is_symmetric() {
        let (a, b) = (noisy_tile(3), noisy_tile(4));
        assert!((ssim_pct(&a, &b).unwrap() - ssim_pct(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn fid_of_a_mean_shift_is_its_squared_norm() {
        let a = gaussian_set(200, 6, 0.0, 7);
        let d = [0.5, -1.0, 0.25, 0.0, 2.0, -0.75];
        let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(d).map(|(x, s)| x + s).collect()).collect();
        let expect: f64 = d.iter().map(|x| x * x).sum();
        assert!((fid(&a, &b, false).unwrap().value - expect).abs() < 1e-3);
    }

    #[test]
    fn fid_is_nonnegative() {
        for seed in 0..50u64 {
            let a = gaussian_set(24, 4, 0.0, seed);
            let b = gaussian_set(30, 4, (seed % 5) as f64 * 0.1, seed + 100);
            assert!(fid(&a, &b, false).unwrap().value >= -1e-6);
        }
    }
}
