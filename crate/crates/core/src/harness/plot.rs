use std::path::Path;

use image::{Rgb, RgbImage};
use plotters::prelude::*;

use super::train::RunRecord;
use super::{io_err, HarnessError};
use crate::metrics::RecallCurve;

const PALETTE: [(u8, u8, u8); 10] = [
    (230, 25, 75),
    (60, 180, 75),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (0, 128, 128),
    (170, 110, 40),
];

fn color(i: usize) -> RGBColor {
    let (r, g, b) = PALETTE[i % PALETTE.len()];
    RGBColor(r, g, b)
}

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

/// Plane (solid) and pixel (thin) recall against threshold for each
/// labeled curve, as SVG.
pub fn plot_recall_curves(curves: &[(String, RecallCurve)], x_label: &str, out: &Path) -> Result<(), HarnessError> {
    if curves.is_empty() {
        return Err(HarnessError::Plot("no recall curves".into()));
    }
    let finite = |c: &RecallCurve| c.thresholds.iter().copied().filter(|t| t.is_finite()).collect::<Vec<_>>();
    let x_max = curves
        .iter()
        .flat_map(|(_, c)| finite(c))
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let root = SVGBackend::new(out, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Recall", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("recall")
        .draw()
        .map_err(plot_err)?;
    for (i, (label, c)) in curves.iter().enumerate() {
        let col = color(i);
        let pts = |ys: &[f64]| -> Vec<(f64, f64)> {
            c.thresholds
                .iter()
                .zip(ys)
                .filter(|(t, _)| t.is_finite())
                .map(|(&t, &y)| (t, y))
                .collect()
        };
        chart
            .draw_series(LineSeries::new(pts(&c.plane_recall), col.stroke_width(2)))
            .map_err(plot_err)?
            .label(format!("{label} plane"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], col.stroke_width(2)));
        chart
            .draw_series(LineSeries::new(pts(&c.pixel_recall), col.stroke_width(1)))
            .map_err(plot_err)?
            .label(format!("{label} pixel"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], col.stroke_width(1)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Per-step total loss and per-epoch mean loss on a log scale, as SVG.
pub fn plot_loss_curve(records: &[RunRecord], out: &Path) -> Result<(), HarnessError> {
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut per_epoch_steps = 0usize;
    for r in records {
        match r {
            RunRecord::Step { step, loss, .. } => {
                per_epoch_steps = per_epoch_steps.max(*step);
                steps.push(loss.total);
            }
            RunRecord::Epoch { epoch, mean_loss, .. } => epochs.push((*epoch, mean_loss.total)),
            RunRecord::Start { .. } => {}
        }
    }
    if steps.is_empty() {
        return Err(HarnessError::Plot("run log has no step records".into()));
    }
    let positive = |v: f64| v.max(1e-6);
    let lo = steps.iter().copied().map(positive).fold(f64::INFINITY, f64::min);
    let hi = steps.iter().copied().map(positive).fold(0.0, f64::max);
    let root = SVGBackend::new(out, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..steps.len() as f64, (lo * 0.9..hi * 1.1).log_scale())
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("total loss")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(
            steps.iter().enumerate().map(|(i, &v)| (i as f64 + 1.0, positive(v))),
            color(2).stroke_width(1),
        ))
        .map_err(plot_err)?;
    let per = per_epoch_steps.max(1) as f64;
    chart
        .draw_series(LineSeries::new(
            epochs.iter().map(|&(e, v)| (e as f64 * per, positive(v))),
            color(0).stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image blended with a per-plane color; non-plane pixels are darkened.
pub fn render_mask_png(image: &[f64], mask: &[u32], width: usize, height: usize) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = y as usize * width + x as usize;
        let px = &image[p * 3..p * 3 + 3];
        match mask[p] {
            0 => Rgb([to_byte(px[0] * 0.4), to_byte(px[1] * 0.4), to_byte(px[2] * 0.4)]),
            m => {
                let (r, g, b) = PALETTE[(m as usize - 1) % PALETTE.len()];
                let mix = |a: f64, c: u8| to_byte(0.45 * a + 0.55 * c as f64 / 255.0);
                Rgb([mix(px[0], r), mix(px[1], g), mix(px[2], b)])
            }
        }
    })
}

/// One attention row over a `grid_w × grid_h` grid, upsampled to the image
/// by nearest neighbor and blended as a red heat map.
pub fn render_attention_png(image: &[f64], width: usize, height: usize, row: &[f64], grid_w: usize, grid_h: usize) -> RgbImage {
    let max = row.iter().copied().fold(0.0, f64::max).max(1e-12);
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = y as usize * width + x as usize;
        let gx = (x as usize * grid_w / width).min(grid_w - 1);
        let gy = (y as usize * grid_h / height).min(grid_h - 1);
        let a = row[gy * grid_w + gx] / max;
        let gray = (image[p * 3] + image[p * 3 + 1] + image[p * 3 + 2]) / 3.0;
        Rgb([
            to_byte(0.5 * gray + 0.5 * a),
            to_byte(0.5 * gray * (1.0 - a)),
            to_byte(0.5 * gray * (1.0 - a)),
        ])
    })
}

fn save_png(img: &RgbImage, out: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    img.save_with_format(out, image::ImageFormat::Png).map_err(plot_err)
}

pub fn plot_mask_overlay(image: &[f64], mask: &[u32], width: usize, height: usize, out: &Path) -> Result<(), HarnessError> {
    if image.len() != 3 * width * height || mask.len() != width * height {
        return Err(HarnessError::Plot("image and mask sizes differ".into()));
    }
    save_png(&render_mask_png(image, mask, width, height), out)
}

/// Writes `attention_slot_NN.png` for each listed slot.
pub fn plot_attention(
    image: &[f64],
    width: usize,
    height: usize,
    rows: &[Vec<f64>],
    grid: (usize, usize),
    slots: &[usize],
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, HarnessError> {
    let (gw, gh) = grid;
    let mut written = Vec::new();
    for &s in slots {
        let row = rows
            .get(s)
            .ok_or_else(|| HarnessError::Plot(format!("no attention row for slot {s}")))?;
        if row.len() != gw * gh {
            return Err(HarnessError::Plot(format!("attention row has {} entries, grid is {gw}x{gh}", row.len())));
        }
        let path = out_dir.join(format!("attention_slot_{s:02}.png"));
        save_png(&render_attention_png(image, width, height, row, gw, gh), &path)?;
        written.push(path);
    }
    Ok(written)
}
