//! Optical-density color deconvolution and DAB masks.

use nalgebra::{Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, Tile};

pub const DEFAULT_DAB_THRESHOLD: f64 = 0.15;
const MAX_CONDITION: f64 = 1e4;
const DAB_ROW: usize = 2;

/// Rows are unit optical-density vectors: hematoxylin, a residual stain, DAB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    #[serde(skip)]
    inverse: Option<Matrix3<f64>>,
}

impl StainMatrix {
    /// Normalizes each row and checks the matrix is well conditioned.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (i, r) in rows.iter().enumerate() {
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::Metric(format!("stain vector {i} has zero length")));
            }
            out[i] = [r[0] / n, r[1] / n, r[2] / n];
        }
        let m = Matrix3::from_fn(|i, j| out[i][j]);
        let sv = m.singular_values();
        let (max, min) = (sv.max(), sv.min());
        if min.is_nan() || min <= 0.0 || max / min >= MAX_CONDITION {
            return Err(Error::Metric("stain matrix is singular".into()));
        }
        let inverse = m.try_inverse().ok_or_else(|| Error::Metric("stain matrix is singular".into()))?;
        Ok(Self {
            rows: out,
            inverse: Some(inverse),
        })
    }

    /// Hematoxylin and DAB vectors with their cross product as the residual.
    pub fn hdab() -> Self {
        let h = [0.650, 0.704, 0.286];
        let d = [0.269, 0.568, 0.778];
        let c = [
            h[1] * d[2] - h[2] * d[1],
            h[2] * d[0] - h[0] * d[2],
            h[0] * d[1] - h[1] * d[0],
        ];
        Self::new([h, c, d]).expect("H-DAB matrix is well conditioned")
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.rows
    }

    pub fn condition_number(&self) -> f64 {
        let sv = Matrix3::from_fn(|i, j| self.rows[i][j]).singular_values();
        sv.max() / sv.min()
    }

    fn inverse(&self) -> Matrix3<f64> {
        self.inverse
            .unwrap_or_else(|| Matrix3::from_fn(|i, j| self.rows[i][j]).try_inverse().expect("validated"))
    }

    /// Stain concentrations of one pixel: `OD · M⁻¹` with `OD = −log10((v + 1) / 256)`.
    pub fn concentrations(&self, rgb: [u8; 3]) -> [f64; 3] {
        let od = RowVector3::from_fn(|_, j| -((rgb[j] as f64 + 1.0) / 256.0).log10());
        let c = od * self.inverse();
        [c[0], c[1], c[2]]
    }

    pub fn dab(&self, rgb: [u8; 3]) -> f64 {
        self.concentrations(rgb)[DAB_ROW]
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::hdab()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MaskSource {
    DabThresh,
    Segmenter,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainMask {
    pub pixels: Mask,
    pub source: MaskSource,
    /// Optical-density threshold, or probability cut-off for segmenter masks.
    pub threshold_used: f64,
}

/// Pixels whose DAB concentration exceeds `threshold`.
pub fn dab_mask(tile: &Tile, m: &StainMatrix, threshold: f64) -> StainMask {
    let (w, h) = (tile.width() as usize, tile.height() as usize);
    let bits = tile.pixels().map(|p| m.dab(p.0) > threshold).collect();
    let pixels = Mask::from_bits(w, h, bits).expect("sized from tile");
    StainMask {
        pixels,
        source: MaskSource::DabThresh,
        threshold_used: threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn default_matrix_rows_are_unit_and_well_conditioned() {
        let m = StainMatrix::hdab();
        for r in m.rows() {
            assert!(((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(m.condition_number() < 1e4);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let r = [0.6, 0.7, 0.3];
        assert!(StainMatrix::new([r, r, [0.1, 0.2, 0.9]]).is_err());
        assert!(StainMatrix::new([r, [0.0; 3], [0.1, 0.2, 0.9]]).is_err());
    }

    #[test]
    fn white_is_empty_and_infinite_threshold_is_empty() {
        let m = StainMatrix::hdab();
        let white = RgbImage::from_pixel(8, 8, Rgb([255, 255, 255]));
        assert!(dab_mask(&white, &m, DEFAULT_DAB_THRESHOLD).pixels.is_empty());
        let brown = RgbImage::from_pixel(8, 8, Rgb([100, 70, 40]));
        assert!(dab_mask(&brown, &m, f64::INFINITY).pixels.is_empty());
    }

    #[test]
    fn dab_render_color_is_positive() {
        // Oracle: solve OD = c·M by Cramer's rule, independent of the inverse above.
        let m = StainMatrix::hdab();
        let rows = m.rows();
        let od: Vec<f64> = [100u8, 70, 40].iter().map(|&v| -((v as f64 + 1.0) / 256.0).log10()).collect();
        let det = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        // c·M = od  ⇔  Mᵀ cᵀ = odᵀ; replace column 2 of Mᵀ (row 2 of M) by od.
        let mut r = rows;
        r[2] = [od[0], od[1], od[2]];
        let c_dab = det(r) / det(rows);
        assert!((c_dab - m.dab([100, 70, 40])).abs() < 1e-12);
        assert!(c_dab > DEFAULT_DAB_THRESHOLD, "{c_dab}");
        let brown = RgbImage::from_pixel(8, 8, Rgb([100, 70, 40]));
        assert_eq!(dab_mask(&brown, &m, DEFAULT_DAB_THRESHOLD).pixels.count(), 64);
    }

    proptest::proptest! {
        #[test]
        fn dab_mask_commutes_with_row_permutation(
            pixels in proptest::collection::vec(proptest::prelude::any::<[u8; 3]>(), 64),
            shift in 1usize..8,
        ) {
            let m = StainMatrix::hdab();
            let tile = RgbImage::from_fn(8, 8, |x, y| Rgb(pixels[(y * 8 + x) as usize]));
            let perm = |y: u32| (y + shift as u32) % 8;
            let moved = RgbImage::from_fn(8, 8, |x, y| *tile.get_pixel(x, perm(y)));
            let a = dab_mask(&tile, &m, DEFAULT_DAB_THRESHOLD).pixels;
            let b = dab_mask(&moved, &m, DEFAULT_DAB_THRESHOLD).pixels;
            for y in 0..8 {
                for x in 0..8 {
                    proptest::prop_assert_eq!(b.get(x, y), a.get(x, perm(y as u32) as usize));
                }
            }
        }
    }
}
