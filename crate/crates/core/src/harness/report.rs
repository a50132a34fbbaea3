use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use plotters::prelude::*;

use super::train::RunRecord;
use crate::backbone::S3Mamba;
use crate::curriculum::write_log_csv;
use crate::data::SizeBin;
use crate::error::{io_err, Error, Result};
use crate::metrics::{format_pct, MetricReport, Metrics, METRIC_NAMES};
use crate::nn::Mode;
use crate::tcma::write_attention_tiff;

pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    report.write_csv(file)
}

/// One line of an ablation table: a variant averaged over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub report: MetricReport,
}

impl AblationRow {
    /// Average the final test reports of several runs of one variant.
    pub fn from_runs(variant: impl Into<String>, runs: &[RunRecord]) -> Self {
        let pick = |f: fn(&MetricReport) -> &Metrics| Metrics::mean(runs.iter().map(|r| f(&r.final_report)));
        Self {
            variant: variant.into(),
            seeds: runs.len(),
            report: MetricReport {
                small: pick(|r| &r.small),
                medium: pick(|r| &r.medium),
                large: pick(|r| &r.large),
                overall: pick(|r| &r.overall),
                counts: runs.first().map_or([0; 3], |r| r.final_report.counts),
            },
        }
    }
}

/// Rows are variants; columns are MIOU, DSC, ACC, SPE, SEN for S, then M,
/// then L, then overall, as percentages with two decimals.
pub fn ablation_table_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string()];
    let groups = SizeBin::ALL.map(|b| b.label()).into_iter().chain(["overall"]);
    for g in groups {
        header.extend(METRIC_NAMES.iter().map(|m| format!("{g}_{m}")));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.variant.clone()];
        for m in [&row.report.small, &row.report.medium, &row.report.large, &row.report.overall] {
            rec.extend(m.values().into_iter().map(format_pct));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Weighted training loss per epoch, one line per run.
pub fn plot_loss_curves(path: &Path, runs: &[RunRecord]) -> Result<()> {
    let max_epoch = runs.iter().map(|r| r.epochs.len()).max().unwrap_or(0).max(1);
    let max_loss = runs
        .iter()
        .flat_map(|r| r.epochs.iter().map(|e| e.weighted_loss))
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..max_epoch as f64, 0f64..max_loss * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (i, run) in runs.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                run.epochs.iter().map(|e| ((e.epoch + 1) as f64, e.weighted_loss)),
                color,
            ))
            .map_err(plot_err)?
            .label(format!("{} seed {}", run.variant, run.config.seed))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Histogram of curriculum sample weights over [0, 1] in 20 bins.
pub fn plot_weight_histogram(path: &Path, weights: &[f64]) -> Result<()> {
    const BINS: usize = 20;
    let mut counts = [0u32; BINS];
    for w in weights {
        counts[((w.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("sample weights", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d((0u32..BINS as u32).into_segmented(), 0u32..top + 1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("weight bin (x0.05)")
        .y_desc("samples")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.filled())
                .data(counts.iter().enumerate().map(|(i, &c)| (i as u32, c))),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Write each attention map of the first image in `images` as
/// `tcma_stage{i}_cls{k}.tiff`, where `i` is the checkpoint stage index.
pub fn dump_attention(dir: &Path, model: &S3Mamba, images: &Array4<f64>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (out, _) = model.forward(images, Mode::Eval)?;
    let offset = model.encoder.len();
    let mut written = Vec::new();
    for (i, att) in out.attention.iter().enumerate() {
        let Some(att) = att else { continue };
        for k in 0..att.dim().3 {
            let path = dir.join(format!("tcma_stage{}_cls{k}.tiff", offset + i));
            write_attention_tiff(&path, att.slice(ndarray::s![0, .., .., k]))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Standard per-run artefacts: `run.json`, `metrics.csv`, `curriculum.csv`,
/// `loss.svg`, `weights.svg`.
pub fn write_run_outputs(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    record.save(&dir.join("run.json"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &record.final_report)?;
    let path = dir.join("curriculum.csv");
    write_log_csv(&record.curriculum_log, fs::File::create(&path).map_err(io_err(&path))?)?;
    plot_loss_curves(&dir.join("loss.svg"), std::slice::from_ref(record))?;
    plot_weight_histogram(&dir.join("weights.svg"), &record.final_weights)?;
    Ok(())
}
