//! Stain masks, mask and image metrics, gland segmentation and reports.

mod masks;
mod plots;
mod quality;
mod report;
mod segment;
mod stain;

pub use masks::{dice, dilate, hausdorff, iou, squared_distance_transform};
pub use plots::{comparison_table, plot_metric, render_comparison};
pub use quality::{fid, mse_pct, ssim_pct, FidValue};
pub use report::{
    evaluate_generated, evaluate_pairset, generate_all, multiplex_scores, EvalContext, Generated, GroundTruth,
    MarkerMetrics, MetricsReport, MultiplexScores, Protocol, StainerGenerator, TileGenerator,
};
pub use segment::{segment_glands, train_gland_segmenter, InputKind, SegConfig, SegMeta, SegModel};
pub use stain::{dab_mask, MaskSource, StainMask, StainMatrix, DEFAULT_DAB_THRESHOLD};
