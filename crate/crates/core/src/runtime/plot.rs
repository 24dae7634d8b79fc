use std::path::Path;

use plotters::prelude::*;

use super::eval::EvalReport;
use super::train::EpochRecord;
use crate::error::{Error, Result};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Train and validation loss per epoch (total and graspness terms).
pub fn plot_losses(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut series: Vec<(&str, RGBColor, Vec<(f64, f64)>)> = vec![
        ("train total", BLUE, epochs.iter().map(|e| (e.epoch as f64, e.train.total)).collect()),
        ("train graspness", CYAN, epochs.iter().map(|e| (e.epoch as f64, e.train.graspness)).collect()),
    ];
    if epochs.iter().any(|e| e.val.is_some()) {
        let pts = |f: fn(&crate::grasp::LossTerms) -> f64| {
            epochs.iter().filter_map(|e| e.val.as_ref().map(|v| (e.epoch as f64, f(v)))).collect()
        };
        series.push(("val total", RED, pts(|v| v.total)));
        series.push(("val graspness", MAGENTA, pts(|v| v.graspness)));
    }
    let ymax = series
        .iter()
        .flat_map(|s| s.2.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold(1e-3, f64::max);
    let xmax = epochs.last().map_or(1.0, |e| e.epoch.max(1) as f64);
    let mut chart = ChartBuilder::on(&root)
        .caption("loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..xmax, 0.0..ymax * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (name, color, pts) in series {
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// GSR and DR proxies per seed as paired bars.
pub fn plot_eval(path: &Path, report: &EvalReport) -> Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = report.seeds.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!(
                "GSR {:.1}% ± {:.1}  DR {:.1}% ± {:.1}",
                100.0 * report.gsr_mean,
                100.0 * report.gsr_std,
                100.0 * report.dr_mean,
                100.0 * report.dr_std
            ),
            ("sans-serif", 18),
        )
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..n, 0.0..100.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("seed index").y_desc("%").draw().map_err(plot_err)?;
    let bars = |off: f64, color: RGBColor, f: fn(&super::eval::SeedSummary) -> f64| {
        report.seeds.iter().enumerate().map(move |(i, s)| {
            let x = i as f64 + off;
            Rectangle::new([(x, 0.0), (x + 0.35, 100.0 * f(s))], color.filled())
        })
    };
    chart
        .draw_series(bars(0.1, BLUE, |s| s.gsr))
        .map_err(plot_err)?
        .label("GSR")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], BLUE.filled()));
    chart
        .draw_series(bars(0.5, GREEN, |s| s.dr))
        .map_err(plot_err)?
        .label("DR")
        .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], GREEN.filled()));
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}
