//! Line plots of metric logs, rendered to PPM.
//!
//! One 480x320 image per metric column. Axes are drawn as dark lines along
//! the left and bottom margins; x spans the logged step range, y is
//! auto-scaled to the column's min/max (no text labels — the axes ranges are
//! in the file name's companion, the CSV itself).

use super::csvlog::{read_metrics, MetricRow};
use super::ppm::write_rgb_ppm;
use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

pub const PLOT_W: usize = 480;
pub const PLOT_H: usize = 320;
const MARGIN: usize = 24;

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Canvas {
        Canvas {
            px: vec![255; 3 * PLOT_W * PLOT_H],
        }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= PLOT_W as i64 || y >= PLOT_H as i64 {
            return;
        }
        let i = 3 * (y as usize * PLOT_W + x as usize);
        self.px[i..i + 3].copy_from_slice(&rgb);
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + t * (x1 - x0);
            let y = y0 + t * (y1 - y0);
            self.set(x.round() as i64, y.round() as i64, rgb);
        }
    }
}

fn plot_column(rows: &[MetricRow], value: impl Fn(&MetricRow) -> f64, path: &Path) -> Result<()> {
    let xs: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let ys: Vec<f64> = rows.iter().map(&value).collect();
    let (x_lo, x_hi) = (xs[0], *xs.last().unwrap());
    let mut y_lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut y_hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (y_hi - y_lo).abs() < 1e-300 {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let x_span = (x_hi - x_lo).max(1.0);
    let y_span = y_hi - y_lo;

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = MARGIN as f64 + (x - x_lo) / x_span * (PLOT_W - 2 * MARGIN) as f64;
        let py = (PLOT_H - MARGIN) as f64 - (y - y_lo) / y_span * (PLOT_H - 2 * MARGIN) as f64;
        (px, py)
    };

    let mut canvas = Canvas::new();
    let axis = [60u8, 60, 60];
    canvas.line(
        MARGIN as f64,
        MARGIN as f64,
        MARGIN as f64,
        (PLOT_H - MARGIN) as f64,
        axis,
    );
    canvas.line(
        MARGIN as f64,
        (PLOT_H - MARGIN) as f64,
        (PLOT_W - MARGIN) as f64,
        (PLOT_H - MARGIN) as f64,
        axis,
    );
    // x tick marks every logged point
    for x in &xs {
        let (px, _) = to_px(*x, y_lo);
        canvas.line(
            px,
            (PLOT_H - MARGIN) as f64,
            px,
            (PLOT_H - MARGIN + 4) as f64,
            axis,
        );
    }
    let series = [30u8, 80, 200];
    if xs.len() == 1 {
        let (px, py) = to_px(xs[0], ys[0]);
        canvas.set(px.round() as i64, py.round() as i64, series);
    }
    for i in 1..xs.len() {
        let (x0, y0) = to_px(xs[i - 1], ys[i - 1]);
        let (x1, y1) = to_px(xs[i], ys[i]);
        canvas.line(x0, y0, x1, y1, series);
    }
    write_rgb_ppm(path, PLOT_W, PLOT_H, &canvas.px)
}

/// Renders one plot per metric column, named `<column>.ppm`, and returns the
/// written paths.
pub fn plot_metrics(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(csv_path)?;
    if rows.is_empty() {
        return Err(Error::EmptyInput { op: "plot" });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    #[allow(clippy::type_complexity)]
    let columns: [(&str, fn(&MetricRow) -> f64); 8] = [
        ("G_Loss", |r| r.g_loss),
        ("G_ID", |r| r.g_id),
        ("G_feat_match", |r| r.g_feat_match),
        ("D_fake", |r| r.d_fake),
        ("D_real", |r| r.d_real),
        ("lambda_id", |r| r.lambda_id),
        ("lambda_rec", |r| r.lambda_rec),
        ("lr", |r| r.lr),
    ];
    let mut written = Vec::new();
    for (name, getter) in columns {
        let path = out_dir.join(format!("{name}.ppm"));
        plot_column(&rows, getter, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::csvlog::METRIC_HEADER;

    #[test]
    fn two_point_log_plots_to_valid_files() {
        let dir = std::env::temp_dir().join(format!("fswp_plot_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("m.csv");
        std::fs::write(
            &csv,
            format!("{METRIC_HEADER}\n0,1,40,19,1,1,40,2,0.0002\n100,0.5,35,17,0.9,0.8,38,1.9,0.00019\n"),
        )
        .unwrap();
        let files = plot_metrics(&csv, &dir.join("plots")).unwrap();
        assert_eq!(files.len(), 8);
        for f in &files {
            let bytes = std::fs::read(f).unwrap();
            let header = format!("P6\n{PLOT_W} {PLOT_H}\n255\n");
            assert!(bytes.starts_with(header.as_bytes()));
            assert_eq!(bytes.len(), header.len() + 3 * PLOT_W * PLOT_H);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_log_is_an_error() {
        let dir = std::env::temp_dir().join(format!("fswp_plot_e_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("empty.csv");
        std::fs::write(&csv, format!("{METRIC_HEADER}\n")).unwrap();
        assert!(plot_metrics(&csv, &dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
