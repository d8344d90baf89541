//! Static SVG training curves.

use std::path::Path;

use plotters::prelude::*;

use crate::trainer::EpochLog;
use crate::{Error, Result};

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series<'_>]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::config(format!("{}: {e}", path.display()));
    let points = series.iter().flat_map(|s| s.2.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_label).draw().map_err(|e| plot_err(&e))?;
    for (name, color, pts) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
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

/// Write `loss.svg` and `val_dice.svg` into `dir`.
pub fn write_curves(log: &[EpochLog], dir: &Path) -> Result<()> {
    let pts = |f: fn(&EpochLog) -> Option<f64>| -> Vec<(f64, f64)> {
        log.iter().filter_map(|l| f(l).map(|v| (l.epoch as f64, v))).collect()
    };
    line_chart(
        &dir.join("loss.svg"),
        "training losses",
        "loss",
        &[
            ("segmentation (Dice)", BLUE, pts(|l| Some(l.seg_loss))),
            ("consistency", RED, pts(|l| Some(l.cons_loss))),
        ],
    )?;
    line_chart(
        &dir.join("val_dice.svg"),
        "validation Dice",
        "Dice (%)",
        &[
            ("student", BLUE, pts(|l| l.val_dice_student)),
            ("teacher", RED, pts(|l| l.val_dice_teacher)),
        ],
    )
}
