use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{find_task, TaskDataset};
use crate::error::{contract, Result};
use crate::numerics::{stream_id, streams, Matrix, Pca, RngStream};
use crate::objectives::ModelBank;

pub const PTA_COLOR: &str = "#1f77b4";
pub const ATA_COLOR: &str = "#d62728";
const CANVAS: f64 = 600.0;
const MARGIN: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    /// `"pta"` or `"ata"`.
    pub setup: String,
    pub task: usize,
}

/// Posterior means of both models, projected to the top two principal axes of
/// the pooled cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterExport {
    pub points: Vec<ScatterPoint>,
    pub n_per_task: usize,
    pub projection: String,
    /// Variance captured by each of the two axes.
    pub explained_variance: Vec<f64>,
}

/// Samples `n` rows per task (without replacement when possible) and embeds
/// them with `pta[t]` and the all-task flow.
pub fn export_scatter(bank: &ModelBank, data: &[TaskDataset], n: usize, seed: u64) -> Result<ScatterExport> {
    if n == 0 {
        return contract("scatter export needs at least one point per task");
    }
    let mut latents = Vec::new();
    let mut tags = Vec::new();
    for t in 1..=bank.pta.len() {
        let d = find_task(data, t)?;
        let mut rng = RngStream::new(seed, stream_id(streams::EXPORT, t as u64));
        let rows: Vec<usize> = if n <= d.len() {
            rng.sample_without_replacement(d.len(), n)
        } else {
            log::warn!("task {t} has {} rows; sampling {n} with replacement", d.len());
            (0..n).map(|_| rng.index(d.len())).collect()
        };
        let x = d.x.select_rows(&rows);
        latents.push(bank.pta(t)?.posterior(&x)?.mu);
        tags.push(("pta", t));
        latents.push(bank.ata.posterior(&x)?.mu);
        tags.push(("ata", t));
    }
    let pooled = Matrix::vcat(&latents.iter().collect::<Vec<_>>())?;
    let pca = Pca::fit(&pooled)?;
    let xy = pca.project(&pooled, 2)?;
    let mut points = Vec::with_capacity(pooled.rows());
    for (block, (setup, task)) in tags.iter().enumerate() {
        for i in 0..n {
            let r = xy.row(block * n + i);
            points.push(ScatterPoint {
                x: r[0],
                y: r.get(1).copied().unwrap_or(0.0),
                setup: (*setup).to_string(),
                task: *task,
            });
        }
    }
    Ok(ScatterExport {
        points,
        n_per_task: n,
        projection: "pca".into(),
        explained_variance: pca.eigenvalues.iter().take(2).copied().collect(),
    })
}

/// CSV with header `x,y,setup,task`.
pub fn write_csv(export: &ScatterExport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for p in &export.points {
        w.serialize(p).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> crate::IconError {
    crate::IconError::Io(std::io::Error::other(e.to_string()))
}

/// Static 600×600 scatter, one circle per point.
pub fn write_svg(export: &ScatterExport, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(export))?;
    Ok(())
}

fn render_svg(export: &ScatterExport) -> String {
    let range = |f: fn(&ScatterPoint) -> f64| {
        let lo = export.points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = export.points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (x0, xs) = range(|p| p.x);
    let (y0, ys) = range(|p| p.y);
    let span = CANVAS - 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="600" height="600" viewBox="0 0 600 600">"#
    );
    let _ = writeln!(s, r#"<rect width="600" height="600" fill="white"/>"#);
    for p in &export.points {
        let cx = MARGIN + span * (p.x - x0) / xs;
        let cy = CANVAS - MARGIN - span * (p.y - y0) / ys;
        let fill = if p.setup == "pta" { PTA_COLOR } else { ATA_COLOR };
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="1.5" fill="{fill}" fill-opacity="0.5" data-task="{}"/>"#,
            p.task
        );
    }
    s.push_str("</svg>\n");
    s
}
