//! SVG loss curves and 2-D projections of tracking embeddings.

use std::path::Path;

use nalgebra::DMatrix;
use plotters::prelude::*;

use crate::error::{Error, Result};

/// One row of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub condinst: f64,
    pub bi_track: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Projects row vectors onto their top two principal components.
/// Fewer than two distinct rows project to the origin.
pub fn pca_2d(rows: &[Vec<f32>]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("embeddings differ in length".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| f64::from(rows[i][j]));
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    if n < 2 || d == 0 {
        return Ok(vec![(0.0, 0.0); n]);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Shape("SVD did not converge".into()))?;
    // order components by singular value
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let component = |k: usize| -> Vec<f64> {
        match order.get(k) {
            Some(&r) => {
                let axis = v_t.row(r).transpose();
                // fix the sign so the largest loading is positive
                let big = axis.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
                let sign = if big < 0.0 { -1.0 } else { 1.0 };
                (&x * axis).iter().map(|v| v * sign).collect()
            }
            None => vec![0.0; n],
        }
    };
    let (a, b) = (component(0), component(1));
    Ok(a.into_iter().zip(b).collect())
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Draws the four loss series against the step index.
pub fn plot_losses(rows: &[LossRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let x_max = rows.iter().map(|r| r.step).max().unwrap_or(0) as f64 + 1.0;
    let (y_lo, y_hi) = span(rows.iter().flat_map(|r| [r.condinst, r.bi_track, r.consistency, r.total]));
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..x_max, y_lo..y_hi)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(|e| plot_err(path, e))?;
    type Series = (&'static str, fn(&LossRow) -> f64, RGBColor);
    let series: [Series; 4] = [
        ("L_condinst", |r| r.condinst, BLUE),
        ("L_bi_track", |r| r.bi_track, RED),
        ("L_consistency", |r| r.consistency, GREEN),
        ("total", |r| r.total, BLACK),
    ];
    for (name, f, color) in series {
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.step as f64, f(r))).collect();
        if points.len() == 1 {
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| plot_err(path, e))?
                .label(name);
        } else {
            chart
                .draw_series(LineSeries::new(points, color))
                .map_err(|e| plot_err(path, e))?
                .label(name);
        }
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Scatter of projected embeddings, one color per label.
pub fn plot_embeddings(points: &[(f64, f64)], labels: &[u64], path: &Path) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::Shape("one label per point required".into()));
    }
    let root = SVGBackend::new(path, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let x = span(points.iter().map(|p| p.0));
    let y = span(points.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(x.0..x.1, y.0..y.1)
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("pc1").y_desc("pc2").draw().map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(
            points
                .iter()
                .zip(labels)
                .map(|(&p, &l)| Circle::new(p, 3, Palette99::pick(l as usize).filled())),
        )
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
