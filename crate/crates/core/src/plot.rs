//! Minimal raster charts for the training log and reliability reports.
//!
//! Charts carry no text: each panel is a framed, auto-scaled plot with
//! horizontal grid lines at the quarter marks, and the panel order and series
//! colors are fixed by the caller.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::iqa::ReliabilityReport;
use crate::trainer::LOG_HEADER;

pub const PANEL_WIDTH: u32 = 640;
pub const PANEL_HEIGHT: u32 = 160;
const MARGIN: u32 = 12;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
pub const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
pub const GREEN: Rgb<u8> = Rgb([44, 160, 44]);
pub const RED: Rgb<u8> = Rgb([214, 39, 40]);
pub const GRAY: Rgb<u8> = Rgb([150, 150, 150]);

/// Series of one panel in the training-log chart, top to bottom.
pub const LOG_PANELS: [&str; 5] = ["total", "l_sup", "l_un", "l_cr", "lambda_t"];

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error("nothing to plot")]
    Empty,
}

pub type Result<T> = std::result::Result<T, PlotError>;

pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: Rgb<u8>,
}

/// One framed panel holding any number of series on shared axes.
pub struct Panel {
    pub series: Vec<Series>,
}

impl Panel {
    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let pts = self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let mut b: Option<(f64, f64, f64, f64)> = None;
        for &(x, y) in pts {
            b = Some(match b {
                None => (x, x, y, y),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
            });
        }
        b.map(|(x0, x1, y0, y1)| {
            let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
            (x0, x1, y0, y1)
        })
    }
}

/// Stacks panels vertically into one image.
pub fn render(panels: &[Panel]) -> Result<RgbImage> {
    if panels.is_empty() {
        return Err(PlotError::Empty);
    }
    let mut img = RgbImage::from_pixel(PANEL_WIDTH, PANEL_HEIGHT * panels.len() as u32, BACKGROUND);
    for (i, panel) in panels.iter().enumerate() {
        let top = i as u32 * PANEL_HEIGHT;
        let (l, r, t, b) = (MARGIN, PANEL_WIDTH - MARGIN, top + MARGIN, top + PANEL_HEIGHT - MARGIN);
        for q in 1..4 {
            let y = t + (b - t) * q / 4;
            line(&mut img, (l as f64, y as f64), (r as f64, y as f64), GRID);
        }
        for (p, q) in [((l, t), (r, t)), ((r, t), (r, b)), ((r, b), (l, b)), ((l, b), (l, t))] {
            line(&mut img, (p.0 as f64, p.1 as f64), (q.0 as f64, q.1 as f64), FRAME);
        }
        let Some((x0, x1, y0, y1)) = panel.bounds() else { continue };
        let map = |(x, y): (f64, f64)| {
            (l as f64 + (x - x0) / (x1 - x0) * (r - l) as f64, b as f64 - (y - y0) / (y1 - y0) * (b - t) as f64)
        };
        for s in &panel.series {
            let pts: Vec<(f64, f64)> =
                s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).map(map).collect();
            if pts.len() == 1 {
                line(&mut img, pts[0], pts[0], s.color);
            }
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], s.color);
            }
        }
    }
    Ok(img)
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (x, y) = ((a.0 + t * (b.0 - a.0)).round(), (a.1 + t * (b.1 - a.1)).round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| PlotError::Write { path: path.to_path_buf(), reason: e.to_string() })
}

/// One panel per entry of [`LOG_PANELS`], value against step.
pub fn plot_training_log(log_csv: &Path, out_png: &Path) -> Result<()> {
    let read_err = |e: &dyn std::fmt::Display| PlotError::Read { path: log_csv.to_path_buf(), reason: e.to_string() };
    let mut r = csv::Reader::from_path(log_csv).map_err(|e| read_err(&e))?;
    let headers = r.headers().map_err(|e| read_err(&e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| read_err(&format!("no {name} column")));
    let step = col(LOG_HEADER[0])?;
    let cols: Vec<usize> = LOG_PANELS.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cols.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| read_err(&e))?;
        let x: f64 = rec[step].parse().map_err(|_| read_err(&"non-numeric step"))?;
        for (s, &c) in series.iter_mut().zip(&cols) {
            s.push((x, rec[c].parse().map_err(|_| read_err(&"non-numeric value"))?));
        }
    }
    let colors = [BLUE, ORANGE, GREEN, RED, GRAY];
    let panels: Vec<Panel> = series
        .into_iter()
        .zip(colors)
        .map(|(points, color)| Panel { series: vec![Series { points, color }] })
        .collect();
    save(&render(&panels)?, out_png)
}

/// Top panel: each pair's score along the blend path, green when strictly
/// decreasing and red otherwise. Bottom panel: the mean score.
pub fn plot_reliability(report: &ReliabilityReport, out_png: &Path) -> Result<()> {
    if report.scores.is_empty() {
        return Err(PlotError::Empty);
    }
    let curve = |s: &[f64]| report.alpha_grid.iter().copied().zip(s.iter().copied()).collect::<Vec<_>>();
    let pairs = Panel {
        series: report
            .scores
            .iter()
            .zip(&report.per_pair_monotone)
            .map(|(s, &m)| Series { points: curve(s), color: if m { GREEN } else { RED } })
            .collect(),
    };
    let n = report.scores.len() as f64;
    let mean: Vec<f64> =
        (0..report.alpha_grid.len()).map(|i| report.scores.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let summary = Panel { series: vec![Series { points: curve(&mean), color: BLUE }] };
    save(&render(&[pairs, summary])?, out_png)
}
