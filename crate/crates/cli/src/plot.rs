//! Learning-curve image: loss on the left, train (blue) and test (red)
//! accuracy on the right.

use std::path::Path;

use anyhow::{anyhow, Result};
use mvx_core::train::TrainReport;
use plotters::prelude::*;

const W: u32 = 800;
const H: u32 = 360;

fn panel(
    area: &DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>,
    n: usize,
    y_max: f64,
    series: &[(&[f64], RGBColor)],
) -> Result<()> {
    let x_max = n.max(2) as f64;
    let mut chart = ChartBuilder::on(area)
        .margin(16)
        .build_cartesian_2d(1f64..x_max, 0f64..y_max)
        .map_err(|e| anyhow!("plot: {e}"))?;
    // light reference lines at quarters of the y range
    for q in 1..4 {
        let y = y_max * q as f64 / 4.0;
        chart
            .draw_series(LineSeries::new([(1.0, y), (x_max, y)], RGBColor(225, 225, 225)))
            .map_err(|e| anyhow!("plot: {e}"))?;
    }
    chart
        .draw_series(LineSeries::new([(1.0, 0.0), (x_max, 0.0)], BLACK))
        .map_err(|e| anyhow!("plot: {e}"))?;
    for (values, color) in series {
        chart
            .draw_series(LineSeries::new(
                values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(|e| anyhow!("plot: {e}"))?;
    }
    Ok(())
}

pub fn learning_curve(report: &TrainReport, path: &Path) -> Result<()> {
    let mut buf = vec![255u8; (W * H * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (W, H)).into_drawing_area();
        let (left, right) = root.split_horizontally(W / 2);
        let n = report.epochs();
        let loss_max = report.train_loss.iter().copied().fold(0.0, f64::max).max(1e-6) * 1.05;
        panel(&left, n, loss_max, &[(&report.train_loss, RGBColor(40, 40, 40))])?;
        panel(
            &right,
            n,
            1.0,
            &[
                (&report.train_acc, RGBColor(30, 90, 200)),
                (&report.test_acc, RGBColor(210, 50, 40)),
            ],
        )?;
        root.present().map_err(|e| anyhow!("plot: {e}"))?;
    }
    image::RgbImage::from_raw(W, H, buf)
        .ok_or_else(|| anyhow!("plot buffer has the wrong size"))?
        .save(path)?;
    Ok(())
}
