//! Overlap and boundary-distance metrics on binary masks.

use crate::error::{Error, Result};
use crate::image::Mask;

fn same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_dims(a, b)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.and(b).count() as f64 / (na + nb) as f64)
}

/// `|a∩b| / |a∪b|`; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    same_dims(a, b)?;
    let union = a.or(b).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.and(b).count() as f64 / union as f64)
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (w, h) = m.dims();
    let mut grid: Vec<f64> = m
        .bits()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0f64; h];
    let mut res = vec![0f64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut res[..h]);
        for y in 0..h {
            grid[y * w + x] = res[y];
        }
    }
    let mut row = vec![0f64; w];
    for y in 0..h {
        row.copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&row, &mut res[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&res[..w]);
    }
    grid
}

fn directed(a: &Mask, dt_b: &[f64]) -> f64 {
    let w = a.width();
    a.points().map(|(x, y)| dt_b[y * w + x]).fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance in pixels. Two empty masks give 0; exactly one
/// empty mask gives the image diagonal.
pub fn hausdorff(a: &Mask, b: &Mask) -> Result<f64> {
    same_dims(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (w, h) = a.dims();
            return Ok(((w * w + h * h) as f64).sqrt());
        }
        _ => {}
    }
    let ab = directed(a, &squared_distance_transform(b));
    let ba = directed(b, &squared_distance_transform(a));
    Ok(ab.max(ba).sqrt())
}

/// Square-neighbourhood dilation by `r` pixels.
pub fn dilate(m: &Mask, r: usize) -> Mask {
    let (w, h) = m.dims();
    Mask::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| m.get(xx, yy)))
    })
}
