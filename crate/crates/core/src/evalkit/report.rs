//! Paired and unpaired evaluation of generated stains.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::masks::{dice, hausdorff, iou};
use super::quality::{fid, mse_pct, ssim_pct};
use super::segment::{InputKind, SegModel};
use super::stain::{dab_mask, StainMatrix};
use crate::error::{Error, Result};
use crate::image::{tiles_to_tensor, Tile};
use crate::nn::mix_seed;
use crate::stainer::StainerState;
use crate::synthdata::{Marker, PromptMode, SampleRecord};
use crate::training::PairEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Protocol {
    /// Ground-truth stains are available and pixel-registered.
    Paired,
    /// Only input tiles are available.
    Unpaired,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Paired => "PAIRED",
            Protocol::Unpaired => "UNPAIRED",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paired" => Ok(Protocol::Paired),
            "unpaired" => Ok(Protocol::Unpaired),
            _ => Err(Error::config(format!("unknown protocol `{s}` (paired, unpaired)"))),
        }
    }
}

/// Produces a stained tile for a record and marker.
pub trait TileGenerator {
    fn id(&self) -> String;
    fn generate(&self, record: &SampleRecord, marker: Marker) -> Result<Tile>;
}

/// Returns the ground-truth stain; scores the ideal values.
pub struct GroundTruth;

impl TileGenerator for GroundTruth {
    fn id(&self) -> String {
        "ground-truth".into()
    }

    fn generate(&self, record: &SampleRecord, marker: Marker) -> Result<Tile> {
        Ok(record.target(marker)?.clone())
    }
}

/// Queries a stainer with each record's own prompt in `mode`.
pub struct StainerGenerator<'a> {
    pub state: &'a StainerState,
    pub mode: PromptMode,
    pub seed: u64,
    pub id: String,
}

impl TileGenerator for StainerGenerator<'_> {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, record: &SampleRecord, marker: Marker) -> Result<Tile> {
        let p = record.prompt(marker, self.mode).ok_or_else(|| {
            Error::Precondition(format!("record {} has no {marker:?} prompt in {:?}", record.seed, self.mode))
        })?;
        self.state
            .virtual_stain(&record.input_tile, p, mix_seed(self.seed, record.seed))
    }
}

/// Generated tiles per record, per marker.
pub type Generated = Vec<BTreeMap<Marker, Tile>>;

pub fn generate_all(gen: &dyn TileGenerator, records: &[SampleRecord], markers: &[Marker]) -> Result<Generated> {
    records
        .iter()
        .map(|r| markers.iter().map(|&m| Ok((m, gen.generate(r, m)?))).collect())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarkerMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ssim_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fid: Option<f64>,
    pub seg_dice: f64,
    pub seg_iou: f64,
    pub seg_hausdorff: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dab_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dab_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dab_hausdorff: Option<f64>,
}

impl MarkerMetrics {
    pub const COLUMNS: [&'static str; 9] = [
        "mse_pct",
        "ssim_pct",
        "fid",
        "seg_dice",
        "seg_iou",
        "seg_hausdorff",
        "dab_dice",
        "dab_iou",
        "dab_hausdorff",
    ];

    /// Values in [`COLUMNS`](Self::COLUMNS) order.
    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.mse_pct,
            self.ssim_pct,
            self.fid,
            Some(self.seg_dice),
            Some(self.seg_iou),
            Some(self.seg_hausdorff),
            self.dab_dice,
            self.dab_iou,
            self.dab_hausdorff,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub model_id: String,
    pub tile_count: usize,
    pub stain_matrix: [[f64; 3]; 3],
    pub dab_threshold: f64,
    pub markers: BTreeMap<Marker, MarkerMetrics>,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: not a metrics report: {e}", path.display())))
    }

    /// Flat CSV, one row per marker; missing metrics are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model_id", "protocol", "tile_count", "dab_threshold", "stain_matrix", "marker"];
        header.extend(MarkerMetrics::COLUMNS);
        w.write_record(&header)?;
        let matrix = self
            .stain_matrix
            .iter()
            .flatten()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(" ");
        for (m, mm) in &self.markers {
            let mut row = vec![
                self.model_id.clone(),
                self.protocol.to_string(),
                self.tile_count.to_string(),
                self.dab_threshold.to_string(),
                matrix.clone(),
                m.as_str().to_string(),
            ];
            row.extend(mm.values().iter().map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Segmenters, feature extractor and DAB settings for an evaluation.
pub struct EvalContext<'a> {
    /// Trained on stained tiles.
    pub stain_segmenter: &'a SegModel,
    /// Trained on input tiles; required by the unpaired protocol.
    pub input_segmenter: Option<&'a SegModel>,
    /// FID features; paired protocol only.
    pub features: &'a PairEncoder,
    pub matrix: StainMatrix,
    pub dab_threshold: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn feature_rows(enc: &PairEncoder, tiles: &[&Tile]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(32) {
        let x = tiles_to_tensor(chunk, &candle_core::Device::Cpu)?;
        let f = enc.pooled_features(&x)?.to_vec2::<f32>()?;
        rows.extend(f.into_iter().map(|r| r.into_iter().map(f64::from).collect()));
    }
    Ok(rows)
}

/// Scores a generator on `records` under `protocol`.
pub fn evaluate_pairset(
    gen: &dyn TileGenerator,
    records: &[SampleRecord],
    protocol: Protocol,
    ctx: &EvalContext,
) -> Result<MetricsReport> {
    let generated = generate_all(gen, records, &Marker::ALL)?;
    evaluate_generated(&gen.id(), records, &generated, protocol, ctx)
}

/// Like [`evaluate_pairset`] on tiles generated up front.
pub fn evaluate_generated(
    model_id: &str,
    records: &[SampleRecord],
    generated: &Generated,
    protocol: Protocol,
    ctx: &EvalContext,
) -> Result<MetricsReport> {
    if records.is_empty() || generated.len() != records.len() {
        return Err(Error::Precondition(format!(
            "{} generated sets for {} records",
            generated.len(),
            records.len()
        )));
    }
    if ctx.stain_segmenter.input_kind() != InputKind::Stain {
        return Err(Error::Precondition("stain segmenter was trained on input tiles".into()));
    }
    let input_masks = match protocol {
        Protocol::Paired => {
            if let Some(r) = records.iter().find(|r| Marker::ALL.iter().any(|&m| r.target(m).is_err())) {
                return Err(Error::Precondition(format!(
                    "paired evaluation needs ground-truth stains; record {} has none",
                    r.seed
                )));
            }
            None
        }
        Protocol::Unpaired => {
            let seg = ctx
                .input_segmenter
                .ok_or_else(|| Error::Precondition("unpaired evaluation needs an input-tile segmenter".into()))?;
            if seg.input_kind() != InputKind::InputHe {
                return Err(Error::Precondition("input segmenter was trained on stained tiles".into()));
            }
            let inputs: Vec<&Tile> = records.iter().map(|r| &r.input_tile).collect();
            Some(seg.segment_many(&inputs)?)
        }
    };

    let mut markers = BTreeMap::new();
    for marker in Marker::ALL {
        let gen_tiles: Vec<&Tile> = generated
            .iter()
            .map(|g| g.get(&marker).ok_or_else(|| Error::Precondition(format!("no generated {marker:?} tile"))))
            .collect::<Result<_>>()?;
        let gen_seg = ctx.stain_segmenter.segment_many(&gen_tiles)?;
        let mut mm = MarkerMetrics::default();
        let (mut sd, mut si, mut sh) = (Vec::new(), Vec::new(), Vec::new());

        match &input_masks {
            Some(reference) => {
                for (g, r) in gen_seg.iter().zip(reference) {
                    sd.push(dice(&g.pixels, &r.pixels)?);
                    si.push(iou(&g.pixels, &r.pixels)?);
                    sh.push(hausdorff(&g.pixels, &r.pixels)?);
                }
            }
            None => {
                let gt_tiles: Vec<&Tile> = records.iter().map(|r| r.target(marker)).collect::<Result<_>>()?;
                let gt_seg = ctx.stain_segmenter.segment_many(&gt_tiles)?;
                let (mut dd, mut di, mut dh, mut mse, mut ssim) = (vec![], vec![], vec![], vec![], vec![]);
                for i in 0..records.len() {
                    let (g, t) = (gen_tiles[i], gt_tiles[i]);
                    sd.push(dice(&gen_seg[i].pixels, &gt_seg[i].pixels)?);
                    si.push(iou(&gen_seg[i].pixels, &gt_seg[i].pixels)?);
                    sh.push(hausdorff(&gen_seg[i].pixels, &gt_seg[i].pixels)?);
                    let gd = dab_mask(g, &ctx.matrix, ctx.dab_threshold).pixels;
                    let td = dab_mask(t, &ctx.matrix, ctx.dab_threshold).pixels;
                    dd.push(dice(&gd, &td)?);
                    di.push(iou(&gd, &td)?);
                    dh.push(hausdorff(&gd, &td)?);
                    mse.push(mse_pct(g, t)?);
                    ssim.push(ssim_pct(g, t)?);
                }
                mm.dab_dice = Some(mean(&dd));
                mm.dab_iou = Some(mean(&di));
                mm.dab_hausdorff = Some(mean(&dh));
                mm.mse_pct = Some(mean(&mse));
                mm.ssim_pct = Some(mean(&ssim));
                let fa = feature_rows(ctx.features, &gen_tiles)?;
                let fb = feature_rows(ctx.features, &gt_tiles)?;
                mm.fid = Some(fid(&fa, &fb, true)?.value);
            }
        }
        mm.seg_dice = mean(&sd);
        mm.seg_iou = mean(&si);
        mm.seg_hausdorff = mean(&sh);
        markers.insert(marker, mm);
    }
    Ok(MetricsReport {
        protocol,
        model_id: model_id.to_string(),
        tile_count: records.len(),
        stain_matrix: ctx.matrix.rows(),
        dab_threshold: ctx.dab_threshold,
        markers,
    })
}

/// Compartment specificity of generated DAB: does each prompt stain its own
/// compartment and not the other one, and do negative tiles stay clean?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplexScores {
    /// Mean DAB-mask DICE against the marker's compartment, prompted for that marker.
    pub matched_dice: BTreeMap<Marker, f64>,
    /// Same compartment, prompted for the other marker.
    pub cross_dice: BTreeMap<Marker, f64>,
    /// Mean DAB-positive pixel fraction on negative tiles, per prompted marker.
    pub negative_fraction: BTreeMap<Marker, f64>,
    pub positive_tiles: usize,
    pub negative_tiles: usize,
}

impl MultiplexScores {
    pub fn margin(&self, m: Marker) -> f64 {
        self.matched_dice[&m] - self.cross_dice[&m]
    }

    pub fn mean_negative_fraction(&self) -> f64 {
        mean(&self.negative_fraction.values().copied().collect::<Vec<_>>())
    }
}

/// Scores tiles generated for both markers against the compartment masks.
pub fn multiplex_scores(
    records: &[SampleRecord],
    generated: &Generated,
    matrix: &StainMatrix,
    threshold: f64,
) -> Result<MultiplexScores> {
    if generated.len() != records.len() {
        return Err(Error::shape(records.len(), generated.len()));
    }
    let mut matched: BTreeMap<Marker, Vec<f64>> = BTreeMap::new();
    let mut cross: BTreeMap<Marker, Vec<f64>> = BTreeMap::new();
    let mut neg: BTreeMap<Marker, Vec<f64>> = BTreeMap::new();
    let (mut pos_n, mut neg_n) = (0, 0);
    for (r, g) in records.iter().zip(generated) {
        let masks: BTreeMap<Marker, _> = g
            .iter()
            .map(|(&m, t)| (m, dab_mask(t, matrix, threshold).pixels))
            .collect();
        if r.is_negative {
            neg_n += 1;
            for (&m, mask) in &masks {
                neg.entry(m).or_default().push(mask.fraction());
            }
            continue;
        }
        pos_n += 1;
        for m in Marker::ALL {
            let (Some(own), Some(other)) = (masks.get(&m), Marker::ALL.iter().find(|&&o| o != m).and_then(|o| masks.get(o)))
            else {
                continue;
            };
            matched.entry(m).or_default().push(dice(own, r.compartment(m))?);
            cross.entry(m).or_default().push(dice(other, r.compartment(m))?);
        }
    }
    let avg = |m: BTreeMap<Marker, Vec<f64>>| m.into_iter().map(|(k, v)| (k, mean(&v))).collect();
    Ok(MultiplexScores {
        matched_dice: avg(matched),
        cross_dice: avg(cross),
        negative_fraction: avg(neg),
        positive_tiles: pos_n,
        negative_tiles: neg_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::segment::{train_gland_segmenter, SegConfig};
    use crate::synthdata::{generate_dataset, TissueSpec};

    #[test]
    fn ground_truth_scores_ideal_and_unpaired_is_seg_only() {
        let records = generate_dataset(&TissueSpec::default(), 12, 5).unwrap();
        let cfg = SegConfig {
            steps: 5,
            ..SegConfig::default()
        };
        let stain = train_gland_segmenter(&records, InputKind::Stain, &cfg).unwrap();
        let input = train_gland_segmenter(&records, InputKind::InputHe, &cfg).unwrap();
        let enc = PairEncoder::new(16, 1).unwrap();
        let ctx = EvalContext {
            stain_segmenter: &stain,
            input_segmenter: Some(&input),
            features: &enc,
            matrix: StainMatrix::hdab(),
            dab_threshold: 0.15,
        };
        let rep = evaluate_pairset(&GroundTruth, &records, Protocol::Paired, &ctx).unwrap();
        assert_eq!(rep.tile_count, 12);
        for mm in rep.markers.values() {
            assert_eq!((mm.seg_dice, mm.seg_iou, mm.seg_hausdorff), (1.0, 1.0, 0.0));
            assert_eq!((mm.dab_dice, mm.dab_iou, mm.dab_hausdorff), (Some(1.0), Some(1.0), Some(0.0)));
            assert_eq!(mm.mse_pct, Some(0.0));
            assert!((mm.ssim_pct.unwrap() - 100.0).abs() < 1e-4);
            assert!(mm.fid.unwrap() <= 1e-3);
        }

        let un = evaluate_pairset(&GroundTruth, &records, Protocol::Unpaired, &ctx).unwrap();
        let json = serde_json::to_value(&un).unwrap();
        for mm in json["markers"].as_object().unwrap().values() {
            let keys: Vec<&str> = mm.as_object().unwrap().keys().map(String::as_str).collect();
            assert_eq!(keys, ["seg_dice", "seg_hausdorff", "seg_iou"]);
        }

        let dir = tempfile::tempdir().unwrap();
        rep.write_json(&dir.path().join("r.json")).unwrap();
        assert_eq!(MetricsReport::read_json(&dir.path().join("r.json")).unwrap(), rep);
        un.write_csv(&dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);

        let ctx_missing = EvalContext { input_segmenter: None, ..ctx };
        assert!(evaluate_pairset(&GroundTruth, &records, Protocol::Unpaired, &ctx_missing).is_err());
    }

    #[test]
    fn ground_truth_is_compartment_specific() {
        let records = generate_dataset(&TissueSpec::default(), 40, 9).unwrap();
        let g = generate_all(&GroundTruth, &records, &Marker::ALL).unwrap();
        let s = multiplex_scores(&records, &g, &StainMatrix::hdab(), 0.15).unwrap();
        assert_eq!(s.positive_tiles + s.negative_tiles, 40);
        for m in Marker::ALL {
            assert!(s.matched_dice[&m] > 0.9, "{m:?} {}", s.matched_dice[&m]);
            assert!(s.margin(m) > 0.5);
        }
        assert!(s.mean_negative_fraction() < 0.01);
    }

    #[test]
    fn protocol_parses() {
        assert_eq!("Paired".parse::<Protocol>().unwrap(), Protocol::Paired);
        assert!("both".parse::<Protocol>().is_err());
    }
}
