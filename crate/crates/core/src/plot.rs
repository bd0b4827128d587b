//! Figures from training logs and reports. Each figure is a JSON data file plus an SVG
//! rendering of it; the data file is the contract.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::dcl::{DevRecord, TrainRecord};
use crate::enhance::RtfReport;
use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub fingerprint: String,
    pub series: Vec<Series>,
}

/// Training loss (raw and smoothed) with dev losses per context.
pub fn loss_figure(train: &[TrainRecord], dev: &[DevRecord], fingerprint: &str) -> Figure {
    let raw: Vec<(f64, f64)> = train.iter().map(|r| (r.step as f64, r.loss)).collect();
    let window = (raw.len() / 50).max(1);
    let smooth = raw
        .windows(window)
        .map(|w| (w[w.len() - 1].0, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64))
        .collect();
    let mut series = vec![
        Series { label: "train".into(), points: raw },
        Series { label: format!("train (mean of {window})"), points: smooth },
    ];
    let ctx = |f: fn(&DevRecord) -> Option<f64>| dev.iter().filter_map(|d| Some((d.step as f64, f(d)?))).collect::<Vec<_>>();
    for (label, pts) in [("dev speech", ctx(|d| d.dev_loss_speech)), ("dev noise", ctx(|d| d.dev_loss_noise))] {
        if !pts.is_empty() {
            series.push(Series { label: label.into(), points: pts });
        }
    }
    Figure {
        title: "cLDM loss".into(),
        x_label: "step".into(),
        y_label: "loss".into(),
        log_y: true,
        fingerprint: fingerprint.into(),
        series,
    }
}

/// Mean enhanced and noisy SI-SDR against the number of reverse steps, one point per report.
pub fn si_sdr_figure(reports: &[EvalReport], fingerprint: &str) -> Figure {
    let mut rows: Vec<(f64, Option<f64>, Option<f64>)> = reports
        .iter()
        .map(|r| (r.summary.steps as f64, r.summary.overall.si_sdr_enhanced_mean, r.summary.overall.si_sdr_noisy_mean))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Figure {
        title: "SI-SDR vs reverse steps".into(),
        x_label: "reverse steps K".into(),
        y_label: "SI-SDR (dB)".into(),
        log_y: false,
        fingerprint: fingerprint.into(),
        series: vec![
            Series { label: "enhanced".into(), points: rows.iter().filter_map(|r| Some((r.0, r.1?))).collect() },
            Series { label: "noisy".into(), points: rows.iter().filter_map(|r| Some((r.0, r.2?))).collect() },
        ],
    }
}

pub fn rtf_figure(reports: &[RtfReport], fingerprint: &str) -> Figure {
    let mut pts: Vec<(f64, f64)> = reports.iter().map(|r| (r.steps as f64, r.rtf)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Figure {
        title: "RTF vs reverse steps".into(),
        x_label: "reverse steps K".into(),
        y_label: "real-time factor".into(),
        log_y: false,
        fingerprint: fingerprint.into(),
        series: vec![Series { label: "rtf".into(), points: pts }],
    }
}

const COLORS: [RGBColor; 5] = [BLUE, RED, GREEN, MAGENTA, CYAN];

/// Writes `{stem}.json` and `{stem}.svg` into `dir` and returns both paths.
pub fn write_figure(fig: &Figure, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = dir.join(format!("{stem}.json"));
    write_atomic(&data, &serde_json::to_vec_pretty(fig).expect("figure serializes"))?;
    let svg = dir.join(format!("{stem}.svg"));
    render(fig, &svg).map_err(|e| Error::Config(format!("rendering {}: {e}", svg.display())))?;
    Ok((data, svg))
}

fn render(fig: &Figure, path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let pts: Vec<(f64, f64)> = fig
        .series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.0.is_finite() && p.1.is_finite() && (!fig.log_y || p.1 > 0.0))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.0), b.max(p.0), c.min(p.1), d.max(p.1)),
    );
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, if fig.log_y { 0.1 } else { 0.0 }, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + y0.abs().max(1.0) * 0.1;
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    macro_rules! draw {
        ($chart:expr) => {{
            let mut chart = $chart;
            chart.configure_mesh().x_desc(fig.x_label.as_str()).y_desc(fig.y_label.as_str()).draw()?;
            for (i, s) in fig.series.iter().enumerate() {
                let color = COLORS[i % COLORS.len()];
                let valid = s.points.iter().copied().filter(|p| p.1.is_finite() && (!fig.log_y || p.1 > 0.0));
                chart
                    .draw_series(LineSeries::new(valid, &color))?
                    .label(s.label.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            }
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        }};
    }
    let mut builder = ChartBuilder::on(&root);
    builder.caption(fig.title.as_str(), ("sans-serif", 22)).margin(12).x_label_area_size(40).y_label_area_size(60);
    if fig.log_y {
        draw!(builder.build_cartesian_2d(x0..x1, (y0..y1).log_scale())?);
    } else {
        let pad = (y1 - y0) * 0.05;
        draw!(builder.build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?);
    }
    root.present()?;
    Ok(())
}

/// Reads a JSON-lines log into records, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
