//! Pixel confusion counts, the five segmentation metrics and size-stratified
//! aggregation.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{SegSample, SizeBin, SizeBins};
use crate::error::{Error, Result};

/// Column order of every metric table.
pub const METRIC_NAMES: [&str; 5] = ["MIOU", "DSC", "ACC", "SPE", "SEN"];

/// Pixel counts for one class treated as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, cls: u8) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p == cls, g == cls) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// The five metrics; `None` marks an undefined 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: Option<f64>,
    pub dsc: Option<f64>,
    pub acc: Option<f64>,
    pub spe: Option<f64>,
    pub sen: Option<f64>,
}

impl Metrics {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.miou, self.dsc, self.acc, self.spe, self.sen]
    }

    fn from_values(v: [Option<f64>; 5]) -> Self {
        Self {
            miou: v[0],
            dsc: v[1],
            acc: v[2],
            spe: v[3],
            sen: v[4],
        }
    }

    /// Per-metric mean over the defined entries.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut sum = [0.0; 5];
        let mut n = [0usize; 5];
        for m in items {
            for (k, v) in m.values().into_iter().enumerate() {
                if let Some(v) = v {
                    sum[k] += v;
                    n[k] += 1;
                }
            }
        }
        Metrics::from_values(std::array::from_fn(|k| (n[k] > 0).then(|| sum[k] / n[k] as f64)))
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics of a single positive class.
pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        miou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        spe: ratio(c.tn, c.tn + c.fp),
        sen: ratio(c.tp, c.tp + c.fn_),
    }
}

/// Metrics of one prediction, averaged over the foreground classes
/// `1..num_classes` (undefined per-class values are skipped).
pub fn sample_metrics(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, num_classes: usize) -> Result<Metrics> {
    let per_class = (1..num_classes)
        .map(|k| confusion(pred, gt, k as u8).map(|c| compute_metrics(&c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::mean(&per_class))
}

/// Per-bin and overall means of per-sample metrics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub small: Metrics,
    pub medium: Metrics,
    pub large: Metrics,
    pub overall: Metrics,
    /// Samples contributing to S, M, L.
    pub counts: [usize; 3],
}

impl MetricReport {
    pub fn bin(&self, bin: SizeBin) -> &Metrics {
        match bin {
            SizeBin::S => &self.small,
            SizeBin::M => &self.medium,
            SizeBin::L => &self.large,
        }
    }

    /// CSV with one row per metric and columns S, M, L, overall, as
    /// percentages with two decimals; undefined cells read `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "S", "M", "L", "overall"])?;
        let cols = [&self.small, &self.medium, &self.large, &self.overall].map(Metrics::values);
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            let mut row = vec![name.to_string()];
            row.extend(cols.iter().map(|c| format_pct(c[k])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

pub fn format_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Score `preds[i]` against `samples[i]` and aggregate by size bin.
pub fn evaluate_stratified(
    preds: &[Array2<u8>],
    samples: &[SegSample],
    bins: &SizeBins,
    num_classes: usize,
) -> Result<MetricReport> {
    if preds.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut per_bin: [Vec<Metrics>; 3] = Default::default();
    let mut all = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(samples) {
        let m = sample_metrics(p.view(), s.mask.view(), num_classes)?;
        let bin = bins
            .bin_of(&s.id)
            .ok_or_else(|| Error::Config(format!("sample {} has no size bin", s.id)))?;
        per_bin[bin as usize].push(m);
        all.push(m);
    }
    Ok(MetricReport {
        small: Metrics::mean(&per_bin[0]),
        medium: Metrics::mean(&per_bin[1]),
        large: Metrics::mean(&per_bin[2]),
        overall: Metrics::mean(&all),
        counts: [per_bin[0].len(), per_bin[1].len(), per_bin[2].len()],
    })
}
