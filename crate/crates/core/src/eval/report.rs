use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;
use serde::{Deserialize, Serialize};

use super::{pca_2d, DiceReport, EmbeddingSet};
use crate::{Error, Result};

/// Mean and sample standard deviation of one `(variant, M)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    pub dice_left_mean: f64,
    pub dice_left_std: f64,
    pub dice_right_mean: f64,
    pub dice_right_std: f64,
    pub mean_foreground_mean: f64,
    pub mean_foreground_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates reports over folds and seeds, one row per `(variant, M)`,
/// ordered by variant name then `M`.
pub fn summarize(reports: &[DiceReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, usize), Vec<&DiceReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.variant.as_str(), r.m)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((variant, m), rs)| {
            let col = |f: fn(&DiceReport) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (lm, ls) = col(|r| r.dice_left);
            let (rm, rsd) = col(|r| r.dice_right);
            let (fm, fs) = col(|r| r.mean_foreground);
            SummaryRow {
                variant: variant.to_string(),
                m,
                n: rs.len(),
                dice_left_mean: lm,
                dice_left_std: ls,
                dice_right_mean: rm,
                dice_right_std: rsd,
                mean_foreground_mean: fm,
                mean_foreground_std: fs,
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `variant,M,fold,seed,dice_left,dice_right,mean_foreground`
pub fn write_results_csv(reports: &[DiceReport], path: &Path) -> Result<()> {
    write_rows(reports, path)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<DiceReport>> {
    read_rows(path)
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    read_rows(path)
}

/// Writes `results.csv`, `summary.csv` and `dice_vs_m.png` into `out_dir`.
pub fn emit_report(reports: &[DiceReport], out_dir: &Path) -> Result<Vec<SummaryRow>> {
    if reports.is_empty() {
        return Err(Error::InvalidInput("no reports to emit".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_results_csv(reports, &out_dir.join("results.csv"))?;
    let summary = summarize(reports);
    write_summary_csv(&summary, &out_dir.join("summary.csv"))?;
    plot_dice_vs_m(&summary, &out_dir.join("dice_vs_m.png"))?;
    Ok(summary)
}

/// Registers a system sans-serif font with the plotting backend once.
/// Returns false when none is available; plots are then drawn unlabeled.
fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let mut candidates = vec![];
        if let Ok(p) = std::env::var("CLTCI_FONT") {
            candidates.push(p);
        }
        candidates.extend(
            [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
                "/Library/Fonts/Arial.ttf",
                "C:\\Windows\\Fonts\\arial.ttf",
            ]
            .map(String::from),
        );
        candidates.iter().any(|p| match fs::read(p) {
            Ok(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            Err(_) => false,
        })
    })
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn plot_dice_vs_m(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let labels = font_available();
    let root = BitMapBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_m = summary.iter().map(|r| r.m).max().unwrap_or(1).max(1) as f64;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if labels {
        builder
            .caption("Mean foreground Dice vs annotation budget", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d(0.0..max_m * 1.05, 0.0..1.0)
        .map_err(plot_err)?;
    if labels {
        chart
            .configure_mesh()
            .x_desc("M (annotated images)")
            .y_desc("Dice")
            .draw()
            .map_err(plot_err)?;
    } else {
        chart.configure_mesh().disable_x_mesh().disable_y_mesh().draw().map_err(plot_err)?;
    }
    let mut by_variant: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for r in summary {
        by_variant.entry(&r.variant).or_default().push(r);
    }
    for (i, (variant, rows)) in by_variant.into_iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.m as f64, r.mean_foreground_mean)).collect();
        let series = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if labels {
            series
                .label(variant.to_string())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(rows.iter().map(|r| {
                let (m, mu, sd) = (r.m as f64, r.mean_foreground_mean, r.mean_foreground_std);
                ErrorBar::new_vertical(m, (mu - sd).max(0.0), mu, (mu + sd).min(1.0), color.filled(), 6)
            }))
            .map_err(plot_err)?;
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(plot_err)?;
    }
    if labels {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Scatter of the first two principal components, one colour per patient.
pub fn plot_embeddings(emb: &EmbeddingSet, path: &Path) -> Result<()> {
    let labels = font_available();
    let xy = pca_2d(&emb.vectors)?;
    let span = |c: usize| {
        let col = xy.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad)..(hi + pad)
    };
    let root = BitMapBackend::new(path, (720, 720)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if labels {
        builder
            .caption("Encoder features by patient (PCA)", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(50);
    }
    let mut chart = builder.build_cartesian_2d(span(0), span(1)).map_err(plot_err)?;
    if labels {
        chart.configure_mesh().x_desc("PC1").y_desc("PC2").draw().map_err(plot_err)?;
    }
    let patients: Vec<&str> = {
        let mut p: Vec<&str> = emb.patient_ids.iter().map(String::as_str).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    for (c, patient) in patients.iter().enumerate() {
        let color = Palette99::pick(c).to_rgba();
        let pts: Vec<(f64, f64)> = (0..emb.len())
            .filter(|&i| emb.patient_ids[i] == *patient)
            .map(|i| (xy[[i, 0]], xy[[i, 1]]))
            .collect();
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 5, color.filled())))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
