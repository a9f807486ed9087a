//! Cross-report comparison table and bar charts.

use plotters::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::{MarkerMetrics, MetricsReport};
use crate::error::{Error, Result};
use crate::synthdata::Marker;

/// One row per (marker, report); only columns present in some report are shown.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let cols: Vec<usize> = (0..MarkerMetrics::COLUMNS.len())
        .filter(|&i| reports.iter().any(|r| r.markers.values().any(|m| m.values()[i].is_some())))
        .collect();
    let mut out = String::new();
    let mut header = vec!["marker", "model", "protocol", "tiles"];
    header.extend(cols.iter().map(|&i| MarkerMetrics::COLUMNS[i]));
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for marker in Marker::ALL {
        for r in reports {
            let Some(mm) = r.markers.get(&marker) else { continue };
            let vals = mm.values();
            let cells: Vec<String> = cols
                .iter()
                .map(|&i| vals[i].map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()))
                .collect();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                marker.as_str(),
                r.model_id,
                r.protocol,
                r.tile_count,
                cells.join(" | ")
            );
        }
    }
    out
}

/// Grouped bar chart of one metric: a group per marker, a bar per report.
pub fn plot_metric(reports: &[MetricsReport], metric: &str, path: &Path) -> Result<()> {
    let idx = MarkerMetrics::COLUMNS
        .iter()
        .position(|&c| c == metric)
        .ok_or_else(|| Error::config(format!("unknown metric `{metric}`")))?;
    let value = |r: &MetricsReport, m: Marker| r.markers.get(&m).and_then(|mm| mm.values()[idx]);
    let max = reports
        .iter()
        .flat_map(|r| Marker::ALL.map(|m| value(r, m)))
        .flatten()
        .fold(0.0f64, f64::max);
    let top = if max > 0.0 { max * 1.1 } else { 1.0 };
    let n = reports.len().max(1);
    let plot_err = |e: &dyn std::fmt::Display| Error::Metric(format!("plot {}: {e}", path.display()));

    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(metric, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..Marker::ALL.len() as f64, 0f64..top)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(Marker::ALL.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < Marker::ALL.len() {
                Marker::ALL[i].as_str().to_string()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(|e| plot_err(&e))?;
    let width = 0.8 / n as f64;
    for (j, r) in reports.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let bars: Vec<Rectangle<(f64, f64)>> = Marker::ALL
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| {
                let v = value(r, m)?;
                let x0 = i as f64 + 0.1 + j as f64 * width;
                Some(Rectangle::new([(x0, 0.0), (x0 + width * 0.9, v)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(|e| plot_err(&e))?
            .label(r.model_id.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Writes `comparison.md` plus one SVG per metric present in any report.
pub fn render_comparison(reports: &[MetricsReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let table = out_dir.join("comparison.md");
    std::fs::write(&table, comparison_table(reports))?;
    written.push(table);
    for (i, col) in MarkerMetrics::COLUMNS.iter().enumerate() {
        if !reports.iter().any(|r| r.markers.values().any(|m| m.values()[i].is_some())) {
            continue;
        }
        let p = out_dir.join(format!("{col}.svg"));
        plot_metric(reports, col, &p)?;
        written.push(p);
    }
    Ok(written)
}
