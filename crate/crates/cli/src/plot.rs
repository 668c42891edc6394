use std::fs;
use std::path::Path;

use aerotrl::experiment::{ExperimentReport, TaskResults};
use aerotrl::heads::InputPipeline;
use aerotrl::patching::patch_trajectory;
use aerotrl::trajectory::{normalize, Trajectory};
use anyhow::{anyhow, Result};
use plotters::prelude::*;

const SIZE: (u32, u32) = (800, 560);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

type Series = (String, Vec<(f64, f64)>);

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| {
        let d = if hi > lo { (hi - lo) * 0.05 } else { 0.5 };
        (lo - d, hi + d)
    };
    (pad(x0, x1), pad(y0, y1))
}

pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

fn indexed(values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().enumerate().map(|(k, v)| ((k + 1) as f64, *v)).collect()
}

/// Loss curves, and PR curves for detection reports.
pub fn report_plots(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if !report.pretrain_curve.is_empty() {
        let pick = |f: fn(&aerotrl::experiment::CurvePoint) -> f64| -> Vec<(f64, f64)> {
            report.pretrain_curve.iter().map(|c| (c.epoch as f64, f(c))).collect()
        };
        line_chart(
            &dir.join("pretrain_loss.svg"),
            "Pretraining loss",
            "epoch",
            "loss",
            &[
                ("L_m".into(), pick(|c| c.l_m)),
                ("L_MD".into(), pick(|c| c.l_md)),
                ("L_MSE".into(), pick(|c| c.l_mse)),
            ],
        )?;
    }
    match &report.results {
        TaskResults::Ftp(f) => line_chart(&dir.join("head_loss.svg"), "FTP head loss", "epoch", "loss", &[("train".into(), indexed(&f.head_curve))])?,
        TaskResults::Fr(f) => line_chart(&dir.join("head_loss.svg"), "FR head loss", "epoch", "loss", &[("train".into(), indexed(&f.head_curve))])?,
        TaskResults::Ad(a) => {
            let curves: Vec<Series> = a.kinds.iter().map(|k| (k.kind.to_string(), indexed(&k.head_curve))).collect();
            line_chart(&dir.join("head_loss.svg"), "AD head loss", "epoch", "loss", &curves)?;
            let pr: Vec<Series> = a
                .kinds
                .iter()
                .map(|k| (format!("{} (AUPR {:.3})", k.kind, k.detection.aupr), k.pr_curve.clone()))
                .collect();
            line_chart(&dir.join("pr_curves.svg"), "Precision-recall", "recall", "precision", &pr)?;
        }
    }
    Ok(())
}

/// Horizontal track with behavioral patches drawn over it.
pub fn trajectory_overlay(traj: &Trajectory, pipeline: &InputPipeline, path: &Path) -> Result<()> {
    let patched = patch_trajectory(&normalize(traj, &pipeline.norm), &pipeline.patching)?;
    let physical = |i: usize| {
        let p = pipeline.norm.denormalize_position(patched.trajectory.points[i].position());
        (p[0], p[1])
    };
    let track: Vec<(f64, f64)> = traj.points.iter().map(|p| (p.lon, p.lat)).collect();
    let behavioral: Vec<Vec<(f64, f64)>> = patched
        .patches
        .patches
        .iter()
        .filter(|p| p.is_behavioral)
        .map(|p| p.source_indices.iter().map(|&i| physical(i)).collect())
        .collect();
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let ((x0, x1), (y0, y1)) = bounds(&[(String::new(), track.clone())]);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({} behavioral patches)", traj.id, behavioral.len()), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("lon")
        .y_desc("lat")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(LineSeries::new(track, PALETTE[0].stroke_width(1)))
        .map_err(|e| anyhow!("{e}"))?;
    for seg in behavioral {
        chart
            .draw_series(seg.into_iter().map(|p| Circle::new(p, 3, PALETTE[3].filled())))
            .map_err(|e| anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
