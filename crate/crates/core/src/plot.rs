//! PNG plots with a companion CSV holding the plotted numbers. The PNGs carry
//! no text; series order and colours are listed in the CSV header.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{AttentionReport, DistanceCurve};
use crate::trainer::MetricRecord;

const SIZE: (u32, u32) = (640, 400);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot: {e}"))
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    (x0, x1, y0 - pad, y1 + pad)
}

fn canvas() -> Vec<u8> {
    vec![0; (SIZE.0 * SIZE.1 * 3) as usize]
}

fn save_rgb(path: &Path, buf: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let img = image::RgbImage::from_raw(SIZE.0, SIZE.1, buf).expect("buffer matches size");
    img.save(path).map_err(|e| plot_err(path, e))
}

/// Line chart of several series.
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let (x0, x1, y0, y1) = bounds(series);
    let mut buf = canvas();
    let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, y0), (x1, y0)], BLACK)))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, y0), (x0, y1)], BLACK)))
        .map_err(|e| plot_err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let style = PALETTE[i % PALETTE.len()].stroke_width(2);
        if s.dashed {
            chart
                .draw_series(DashedLineSeries::new(s.points.iter().copied(), 6, 4, style))
                .map_err(|e| plot_err(path, e))?;
        } else {
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), style))
                .map_err(|e| plot_err(path, e))?;
        }
    }
    root.present().map_err(|e| plot_err(path, e))?;
    drop(chart);
    drop(root);
    save_rgb(path, buf)
}

/// Grouped bar chart: one group per row, one bar per column.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>]) -> Result<()> {
    let cols = groups.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let top = groups.iter().flatten().copied().fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let mut buf = canvas();
    let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let width = groups.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0.0..width, 0.0..top)
        .map_err(|e| plot_err(path, e))?;
    let bar = 0.8 / cols as f64;
    for (gi, g) in groups.iter().enumerate() {
        for (ci, &v) in g.iter().enumerate() {
            let x = gi as f64 + 0.1 + ci as f64 * bar;
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x, 0.0), (x + bar * 0.9, v)],
                    PALETTE[ci % PALETTE.len()].filled(),
                )))
                .map_err(|e| plot_err(path, e))?;
        }
    }
    root.present().map_err(|e| plot_err(path, e))?;
    drop(chart);
    drop(root);
    save_rgb(path, buf)
}

/// `<stem>.csv` next to a PNG path.
pub fn companion_csv(png: &Path) -> PathBuf {
    png.with_extension("csv")
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Distance curves against `t`: global then local, calibrated solid,
/// uncalibrated dashed.
pub fn plot_distance_curve(curve: &DistanceCurve, png: &Path) -> Result<()> {
    let pick = |f: &dyn Fn(&crate::evaluation::DistanceRow) -> Option<f64>| -> Vec<(f64, f64)> {
        curve.rows.iter().filter_map(|r| f(r).map(|v| (r.t as f64, v))).collect()
    };
    let series = vec![
        Series {
            label: "global_calibrated".into(),
            points: pick(&|r| r.global_calibrated),
            dashed: false,
        },
        Series {
            label: "global_uncalibrated".into(),
            points: pick(&|r| Some(r.global_uncalibrated)),
            dashed: true,
        },
        Series {
            label: "local_calibrated".into(),
            points: pick(&|r| r.local_calibrated),
            dashed: false,
        },
        Series {
            label: "local_uncalibrated".into(),
            points: pick(&|r| Some(r.local_uncalibrated)),
            dashed: true,
        },
    ];
    write(&companion_csv(png), &curve.to_csv())?;
    line_chart(png, &series)
}

/// One bar group per decoder block, bars in segment order.
pub fn plot_attention(report: &AttentionReport, png: &Path) -> Result<()> {
    let groups: Vec<Vec<f64>> = report.blocks.iter().map(|b| b.masses.to_vec()).collect();
    write(&companion_csv(png), &report.to_csv())?;
    bar_chart(png, &groups)
}

/// Loss terms against step.
pub fn plot_losses(metrics: &[MetricRecord], png: &Path) -> Result<()> {
    let pick = |f: fn(&MetricRecord) -> f64| metrics.iter().map(|m| (m.step as f64, f(m))).collect();
    let series = vec![
        Series {
            label: "l_sd".into(),
            points: pick(|m| m.l_sd),
            dashed: false,
        },
        Series {
            label: "l_gc".into(),
            points: pick(|m| m.l_gc),
            dashed: false,
        },
        Series {
            label: "l_lc".into(),
            points: pick(|m| m.l_lc),
            dashed: false,
        },
        Series {
            label: "total".into(),
            points: pick(|m| m.total),
            dashed: true,
        },
    ];
    let mut csv = String::from("step,l_sd,l_gc,l_lc,total\n");
    for m in metrics {
        csv.push_str(&format!("{},{:.9},{:.9},{:.9},{:.9}\n", m.step, m.l_sd, m.l_gc, m.l_lc, m.total));
    }
    write(&companion_csv(png), &csv)?;
    line_chart(png, &series)
}
