use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW};
use super::ExperimentConfig;
use crate::backbone::{sample_loss, S3Mamba};
use crate::curriculum::{CurriculumLogRow, CurriculumState, Phase};
use crate::data::{
    assign_splits, augment, generate_dataset, load_manifest, load_pairs, stratify, Dataset, SizeBins, Split,
};
use crate::error::{io_err, Error, Result};
use crate::metrics::{evaluate_stratified, MetricReport};
use crate::nn::Mode;

/// A dataset with its size bins and train/test assignment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub bins: SizeBins,
}

impl PreparedData {
    pub fn train_indices(&self) -> Vec<usize> {
        self.dataset.split_indices(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.dataset.split_indices(Split::Test)
    }
}

/// Generate or load the configured data, stratify the whole set and assign
/// per-bin splits (keeping a complete split column from a manifest).
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let nc = cfg.model.num_classes;
    let mut dataset = if let Some(m) = &d.manifest {
        load_manifest(m, nc)?
    } else if let (Some(i), Some(m)) = (&d.image_dir, &d.mask_dir) {
        load_pairs(i, m, nc)?
    } else {
        generate_dataset(d.num_samples, &d.synth, d.seed)?
    };
    let bins = stratify(&dataset)?;
    if dataset.manifest.iter().all(|r| r.split.is_some()) {
        dataset.apply_bins(&bins);
    } else {
        assign_splits(&mut dataset, &bins, d.test_fraction, d.split_seed)?;
    }
    Ok(PreparedData { dataset, bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub weighted_loss: f64,
    pub unweighted_loss: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub test: MetricReport,
    pub train: Option<MetricReport>,
}

/// Everything recorded about one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub config: ExperimentConfig,
    pub param_count: usize,
    pub epochs: Vec<EpochRecord>,
    pub curriculum_log: Vec<CurriculumLogRow>,
    pub snapshots: Vec<Snapshot>,
    /// Test-split report of the final model.
    pub final_report: MetricReport,
    /// Train-split report of the final model, when requested.
    pub final_train_report: Option<MetricReport>,
    /// Sample weights after the last epoch (train order).
    pub final_weights: Vec<f64>,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Argmax masks for `indices`, evaluated in batches.
pub fn predict(model: &S3Mamba, dataset: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        out.extend(model.predict_masks(&dataset.image_batch(chunk)?)?);
    }
    Ok(out)
}

/// Size-stratified report of `model` on the listed samples.
pub fn evaluate(
    model: &S3Mamba,
    dataset: &Dataset,
    indices: &[usize],
    bins: &SizeBins,
    batch: usize,
) -> Result<MetricReport> {
    let preds = predict(model, dataset, indices, batch)?;
    let samples: Vec<_> = indices.iter().map(|&i| dataset.samples[i].clone()).collect();
    evaluate_stratified(&preds, &samples, bins, model.config.num_classes)
}

/// Log row for a run without curriculum: all weights 1.
fn uniform_row(epoch: usize, losses: &[f64]) -> CurriculumLogRow {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    CurriculumLogRow {
        epoch,
        phase: Phase::EasyFirst,
        lambda: 0.0,
        v_min: 1.0,
        v_mean: 1.0,
        v_max: 1.0,
        regularizer: n,
        weighted_loss: mean,
        unweighted_loss: mean,
        objective: mean * n + n,
    }
}

/// Train a freshly initialized model. `progress` sees every finished epoch.
pub fn train(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(S3Mamba, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let model_cfg = cfg.effective_model();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = S3Mamba::new(&model_cfg, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let train_idx = data.train_indices();
    let test_idx = data.test_indices();
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ds = &data.dataset;
    let fractions: Vec<f64> = train_idx.iter().map(|&i| ds.samples[i].lesion_fraction).collect();
    let mut curriculum = if cfg.curriculum_on() {
        Some(CurriculumState::new(&fractions, cfg.curriculum.lambda, cfg.curriculum.scheduler)?)
    } else {
        None
    };
    let eval_batch = cfg.optim.batch_size;
    let want_train = cfg.eval.train_metrics || cfg.eval.stop_at_train_dsc.is_some();
    let snapshot = |model: &S3Mamba, epoch: usize| -> Result<Snapshot> {
        Ok(Snapshot {
            epoch,
            test: evaluate(model, ds, &test_idx, &data.bins, eval_batch)?,
            train: if want_train {
                Some(evaluate(model, ds, &train_idx, &data.bins, eval_batch)?)
            } else {
                None
            },
        })
    };

    let mut opt = AdamW::new(&cfg.optim);
    let mut epochs = Vec::new();
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let total = cfg.optim.epochs;
    let mut positions: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..total {
        let lr = cosine_lr(cfg.optim.learning_rate, cfg.optim.min_learning_rate, epoch, total);
        positions.shuffle(&mut rng);
        let mut losses = vec![0.0; train_idx.len()];
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        for batch in positions.chunks(cfg.optim.batch_size) {
            let samples: Vec<_> = batch
                .iter()
                .map(|&p| augment(&ds.samples[train_idx[p]], &cfg.data.augment, rng.random()))
                .collect();
            let views: Vec<_> = samples.iter().map(|s| s.image.view()).collect();
            let images = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
            let (out, cache) = model.forward(&images, Mode::Train)?;
            let weights: Vec<f64> = batch
                .iter()
                .map(|&p| curriculum.as_ref().map_or(1.0, |c| c.v[p]))
                .collect();
            let wsum: f64 = weights.iter().sum();
            let mut dlogits = Array4::zeros(out.logits.raw_dim());
            for (i, (&p, s)) in batch.iter().zip(&samples).enumerate() {
                let (loss, d) = sample_loss(out.logits.index_axis(Axis(0), i), s.mask.view())?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss of sample {} at epoch {epoch}", s.id)));
                }
                losses[p] = loss;
                dlogits.index_axis_mut(Axis(0), i).assign(&(d * (weights[i] / wsum)));
            }
            let grads = model.backward(&cache, &dlogits)?;
            model.absorb_batch_stats(&cache);
            norm_sum += opt.step(&mut model, &grads, lr);
            steps += 1;
            if !crate::nn::all_finite(&model) {
                return Err(Error::NonFinite(format!("parameters after a step in epoch {epoch}")));
            }
        }
        let row = match &mut curriculum {
            Some(c) => c.end_epoch(epoch, &losses)?,
            None => uniform_row(epoch, &losses),
        };
        let rec = EpochRecord {
            epoch,
            learning_rate: lr,
            weighted_loss: row.weighted_loss,
            unweighted_loss: row.unweighted_loss,
            mean_grad_norm: norm_sum / steps as f64,
        };
        progress(&rec);
        epochs.push(rec);
        log.push(row);
        let done = epoch + 1;
        if cfg.eval.every > 0 && done % cfg.eval.every == 0 && done < total {
            let snap = snapshot(&model, done)?;
            let reached = match (cfg.eval.stop_at_train_dsc, &snap.train) {
                (Some(target), Some(tr)) => tr.overall.dsc.is_some_and(|d| d >= target),
                _ => false,
            };
            snapshots.push(snap);
            if reached {
                break;
            }
        }
    }
    let last = snapshots.last().filter(|s| s.epoch == epochs.len()).cloned();
    let final_snap = match last {
        Some(s) => s,
        None => {
            let s = snapshot(&model, epochs.len())?;
            snapshots.push(s.clone());
            s
        }
    };
    let record = RunRecord {
        variant: cfg.ablation.label(),
        config: cfg.clone(),
        param_count: model.num_params(),
        epochs,
        curriculum_log: log,
        snapshots,
        final_report: final_snap.test,
        final_train_report: final_snap.train,
        final_weights: curriculum.map_or_else(|| vec![1.0; train_idx.len()], |c| c.v),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, record))
}
