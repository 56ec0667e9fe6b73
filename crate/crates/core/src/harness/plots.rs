//! SVG figures rendered from a finished bundle's `runs.csv`.

use std::path::{Path, PathBuf};

use log::warn;
use plotters::prelude::*;
use serde::Serialize;

use super::{read_runs, write_csv, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::Quartiles;

/// Five-number summary of one (method, k, metric) cell; written to
/// `box_stats.csv` next to the figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxStats {
    pub metric: String,
    pub method: String,
    pub k: usize,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

type Metric = fn(&RunRecord) -> Option<f64>;

const METRICS: [(&str, Metric); 3] = [("bacc", |r| r.bacc), ("auc", |r| r.auc), ("dice", |r| r.dice)];

fn cells(runs: &[RunRecord]) -> Vec<(String, usize)> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in runs.iter().filter(|r| r.ok()) {
        let key = (r.method.clone(), r.k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys
}

pub fn box_stats(runs: &[RunRecord]) -> Vec<BoxStats> {
    let mut out = Vec::new();
    for (metric, get) in METRICS {
        for (method, k) in cells(runs) {
            let v: Vec<f64> =
                runs.iter().filter(|r| r.ok() && r.method == method && r.k == k).filter_map(get).collect();
            let Some(q) = Quartiles::of(&v) else { continue };
            out.push(BoxStats {
                metric: metric.to_string(),
                method,
                k,
                n: v.len(),
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                q1: q.q1,
                median: q.median,
                q3: q.q3,
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("plot rendering failed: {e}"))
}

fn cell_label(s: &BoxStats) -> String {
    format!("{} k={}", s.method, s.k)
}

fn box_plot(path: &Path, metric: &str, stats: &[&BoxStats]) -> Result<()> {
    let root = SVGBackend::new(path, (160 + 90 * stats.len() as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = stats.len() as f32;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} over repeats", metric.to_uppercase()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(70)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5f32..n - 0.5, 0f32..1.05f32)
        .map_err(plot_err)?;
    let labels: Vec<String> = stats.iter().map(|s| cell_label(s)).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(stats.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-3 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(metric)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(stats.iter().enumerate().map(|(i, s)| {
            let q = plotters::data::Quartiles::new(&[s.min, s.q1, s.median, s.q3, s.max]);
            Boxplot::new_vertical(i as f32, &q).width(24).style(BLUE)
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn dice_bars(path: &Path, stats: &[&BoxStats]) -> Result<()> {
    let root = SVGBackend::new(path, (160 + 90 * stats.len() as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = stats.len() as f32;
    let mut chart = ChartBuilder::on(&root)
        .caption("Median DICE", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(70)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5f32..n - 0.5, 0f32..1.05f32)
        .map_err(plot_err)?;
    let labels: Vec<String> = stats.iter().map(|s| cell_label(s)).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(stats.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-3 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("dice")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(stats.iter().enumerate().map(|(i, s)| {
            let x = i as f32;
            Rectangle::new([(x - 0.3, 0.0), (x + 0.3, s.median as f32)], GREEN.mix(0.7).filled())
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(stats.iter().enumerate().map(|(i, s)| {
            let x = i as f32;
            PathElement::new(vec![(x, s.q1 as f32), (x, s.q3 as f32)], BLACK.stroke_width(2))
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Renders box plots per metric, a DICE bar chart and `box_stats.csv` into
/// `dir` from `dir/runs.csv`. Returns the files written; a bundle without
/// successful runs yields none.
pub fn emit_plots(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let runs = read_runs(dir)?;
    let stats = box_stats(&runs);
    if stats.is_empty() {
        warn!("{} holds no successful runs; nothing to plot", dir.join("runs.csv").display());
        return Ok(Vec::new());
    }
    let mut written = Vec::new();
    let path = dir.join("box_stats.csv");
    write_csv(&path, &stats, &[])?;
    written.push(path);
    for (metric, _) in METRICS {
        let cell: Vec<&BoxStats> = stats.iter().filter(|s| s.metric == metric).collect();
        if cell.is_empty() {
            continue;
        }
        let path = dir.join(format!("{metric}_box.svg"));
        box_plot(&path, metric, &cell)?;
        written.push(path);
        if metric == "dice" {
            let path = dir.join("dice_bars.svg");
            dice_bars(&path, &cell)?;
            written.push(path);
        }
    }
    Ok(written)
}
