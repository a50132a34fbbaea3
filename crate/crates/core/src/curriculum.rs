//! Loss-rank curriculum: size-based initial weights, rank-driven updates with
//! proximal inertia, and a plateau-triggered switch from easy to hard samples.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    EasyFirst,
    HardFocus,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::EasyFirst => "EASY_FIRST",
            Phase::HardFocus => "HARD_FOCUS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Plateau threshold on relative epoch-loss improvement.
    pub epsilon: f64,
    /// Consecutive sub-threshold epochs needed to declare a plateau.
    pub patience: usize,
    pub v_min: f64,
    /// Per-epoch growth of the hard-focus blend factor.
    pub alpha_ramp: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            patience: 5,
            v_min: 0.1,
            alpha_ramp: 0.2,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0)
            || self.patience < 1
            || !(self.v_min > 0.0 && self.v_min < 1.0)
            || !(self.alpha_ramp > 0.0 && self.alpha_ramp <= 1.0)
        {
            return Err(Error::Config(format!(
                "scheduler needs epsilon > 0, patience ≥ 1, 0 < v_min < 1, 0 < alpha_ramp ≤ 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Curriculum switch and balance factor, plus the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    /// Balance between rank-derived weights and the previous weights.
    pub lambda: f64,
    pub scheduler: SchedulerConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 0.7,
            scheduler: SchedulerConfig::default(),
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        self.scheduler.validate()
    }
}

/// `v_min + (1 − v_min)·minmax(fraction)`; equal fractions map to the midpoint.
pub fn init_weights(fractions: &[f64], v_min: f64) -> Result<Vec<f64>> {
    if fractions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lo = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(fractions
        .iter()
        .map(|&f| {
            let norm = if hi > lo { (f - lo) / (hi - lo) } else { 0.5 };
            v_min + (1.0 - v_min) * norm
        })
        .collect())
}

/// 1-based ascending ranks; equal losses are ordered by index.
pub fn rank_losses(losses: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss of sample {i}")));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; losses.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    Ok(ranks)
}

fn check_len(v: &[f64], losses: &[f64]) -> Result<()> {
    if v.len() != losses.len() {
        return Err(Error::Shape(format!("{} weights for {} losses", v.len(), losses.len())));
    }
    Ok(())
}

/// `λ·Σ 1/rank(lᵢ) + (1 − λ)·Σ vᵢ²`.
pub fn regularizer_value(v: &[f64], losses: &[f64], lambda: f64) -> Result<f64> {
    check_len(v, losses)?;
    let ranks = rank_losses(losses)?;
    let inv: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    let sq: f64 = v.iter().map(|x| x * x).sum();
    Ok(lambda * inv + (1.0 - lambda) * sq)
}

/// `Σ vᵢlᵢ / Σ vᵢ`.
pub fn weighted_epoch_loss(losses: &[f64], v: &[f64]) -> Result<f64> {
    check_len(v, losses)?;
    let den: f64 = v.iter().sum();
    if den <= 0.0 {
        return Err(Error::Config("weights sum to zero".into()));
    }
    Ok(losses.iter().zip(v).map(|(l, w)| l * w).sum::<f64>() / den)
}

/// Plateau when each of the last `patience` epoch-to-epoch relative
/// improvements falls below `epsilon`.
pub fn detect_plateau(history: &[f64], cfg: &SchedulerConfig) -> bool {
    let p = cfg.patience;
    if p == 0 || history.len() < p + 1 {
        return false;
    }
    history[history.len() - p - 1..]
        .windows(2)
        .all(|w| {
            // a zero loss cannot improve further; treat it as flat
            let rel = if w[0] > 0.0 { (w[0] - w[1]) / w[0] } else { 0.0 };
            rel < cfg.epsilon
        })
}

/// Mutable scheduler state, aligned with the dataset's canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub v: Vec<f64>,
    pub lambda: f64,
    pub phase: Phase,
    pub epoch_loss_history: Vec<f64>,
    pub last_losses: Option<Vec<f64>>,
    /// Updates performed since entering the current phase.
    pub epochs_in_phase: usize,
    pub config: SchedulerConfig,
}

/// One row of the per-epoch curriculum log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumLogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub lambda: f64,
    pub v_min: f64,
    pub v_mean: f64,
    pub v_max: f64,
    /// Regularizer evaluated on the weights used during the epoch.
    pub regularizer: f64,
    pub weighted_loss: f64,
    pub unweighted_loss: f64,
    /// Unnormalized `Σ vᵢlᵢ + g(v)`.
    pub objective: f64,
}

impl CurriculumState {
    pub fn new(fractions: &[f64], lambda: f64, config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            v: init_weights(fractions, config.v_min)?,
            lambda,
            phase: Phase::EasyFirst,
            epoch_loss_history: Vec::new(),
            last_losses: None,
            epochs_in_phase: 0,
            config,
        })
    }

    /// Current hard-focus blend factor for the next update.
    fn next_alpha(&self) -> f64 {
        (self.config.alpha_ramp * (self.epochs_in_phase + 1) as f64).min(1.0)
    }

    /// Close an epoch: log it, update weights from its losses, then check
    /// for a plateau.
    pub fn end_epoch(&mut self, epoch: usize, losses: &[f64]) -> Result<CurriculumLogRow> {
        check_len(&self.v, losses)?;
        let weighted = weighted_epoch_loss(losses, &self.v)?;
        let unweighted = losses.iter().sum::<f64>() / losses.len() as f64;
        let regularizer = regularizer_value(&self.v, losses, self.lambda)?;
        let raw_sum: f64 = losses.iter().zip(&self.v).map(|(l, w)| l * w).sum();
        let n = self.v.len() as f64;
        let row = CurriculumLogRow {
            epoch,
            phase: self.phase,
            lambda: self.lambda,
            v_min: self.v.iter().copied().fold(f64::INFINITY, f64::min),
            v_mean: self.v.iter().sum::<f64>() / n,
            v_max: self.v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            regularizer,
            weighted_loss: weighted,
            unweighted_loss: unweighted,
            objective: raw_sum + regularizer,
        };
        self.v = update_weights(self, losses)?;
        self.epochs_in_phase += 1;
        self.epoch_loss_history.push(weighted);
        self.last_losses = Some(losses.to_vec());
        if self.phase == Phase::EasyFirst && detect_plateau(&self.epoch_loss_history, &self.config) {
            self.phase = Phase::HardFocus;
            self.epochs_in_phase = 0;
        }
        Ok(row)
    }
}

/// Rank weights normalized by their maximum: `1/rank`, rank 1 → 1.
fn normalized_inverse_ranks(ranks: &[usize]) -> Vec<f64> {
    // the smallest rank is always 1, so the maximum of 1/rank is 1
    ranks.iter().map(|&r| 1.0 / r as f64).collect()
}

/// New weights after an epoch with the given per-sample losses.
///
/// Easy-first: `clamp(λ·raw + (1 − λ)·v, v_min, 1)` with `raw = 1/rank`
/// (lowest loss → 1). Hard-focus: `raw` uses descending ranks and the blend is
/// `(1 − α)·v + α·raw`, with α growing by `alpha_ramp` per update.
pub fn update_weights(state: &CurriculumState, losses: &[f64]) -> Result<Vec<f64>> {
    check_len(&state.v, losses)?;
    let lo = state.config.v_min;
    let v = match state.phase {
        Phase::EasyFirst => {
            let raw = normalized_inverse_ranks(&rank_losses(losses)?);
            let lam = state.lambda;
            raw.iter()
                .zip(&state.v)
                .map(|(r, prev)| (lam * r + (1.0 - lam) * prev).clamp(lo, 1.0))
                .collect()
        }
        Phase::HardFocus => {
            let negated: Vec<f64> = losses.iter().map(|l| -l).collect();
            let raw = normalized_inverse_ranks(&rank_losses(&negated)?);
            let alpha = state.next_alpha();
            raw.iter()
                .zip(&state.v)
                .map(|(r, prev)| ((1.0 - alpha) * prev + alpha * r).clamp(lo, 1.0))
                .collect()
        }
    };
    Ok(v)
}

pub fn write_log_csv<W: Write>(rows: &[CurriculumLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "phase",
        "lambda",
        "v_min",
        "v_mean",
        "v_max",
        "regularizer",
        "weighted_loss",
        "unweighted_loss",
        "objective",
    ])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.phase.label().to_string(),
            r.lambda.to_string(),
            format!("{:.6}", r.v_min),
            format!("{:.6}", r.v_mean),
            format!("{:.6}", r.v_max),
            format!("{:.6}", r.regularizer),
            format!("{:.6}", r.weighted_loss),
            format!("{:.6}", r.unweighted_loss),
            format!("{:.6}", r.objective),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(v: Vec<f64>, lambda: f64, phase: Phase) -> CurriculumState {
        CurriculumState {
            v,
            lambda,
            phase,
            epoch_loss_history: vec![],
            last_losses: None,
            epochs_in_phase: 0,
            config: SchedulerConfig::default(),
        }
    }

    #[test]
    fn init_endpoints_and_degenerate() {
        assert_eq!(init_weights(&[0.01, 0.10], 0.1).unwrap(), vec![0.1, 1.0]);
        assert_eq!(init_weights(&[0.2, 0.2], 0.1).unwrap(), vec![0.55, 0.55]);
        assert!(init_weights(&[], 0.1).is_err());
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_losses(&[0.3, 0.1, 0.2]).unwrap(), vec![3, 1, 2]);
        assert_eq!(rank_losses(&[0.2, 0.2]).unwrap(), vec![1, 2]);
        assert_eq!(rank_losses(&[5.0]).unwrap(), vec![1]);
        assert!(rank_losses(&[f64::NAN]).is_err());
    }

    #[test]
    fn regularizer_cases() {
        assert_eq!(regularizer_value(&[0.5, 0.5], &[0.1, 0.2], 0.5).unwrap(), 1.0);
        assert_eq!(regularizer_value(&[0.3, 0.4], &[1.0, 2.0], 0.0).unwrap(), 0.09 + 0.16);
        assert_eq!(regularizer_value(&[0.3, 0.9], &[1.0, 2.0], 1.0).unwrap(), 1.5);
    }

    #[test]
    fn easy_first_updates() {
        let s = state(vec![0.4, 0.6, 0.8], 0.0, Phase::EasyFirst);
        assert_eq!(update_weights(&s, &[0.3, 0.1, 0.2]).unwrap(), vec![0.4, 0.6, 0.8]);
        let s = state(vec![0.4, 0.6, 0.8], 1.0, Phase::EasyFirst);
        assert_eq!(update_weights(&s, &[0.3, 0.1, 0.2]).unwrap(), vec![1.0 / 3.0, 1.0, 0.5]);
    }

    #[test]
    fn hard_focus_full_blend() {
        let mut s = state(vec![0.4, 0.6, 0.8], 0.7, Phase::HardFocus);
        s.config.alpha_ramp = 1.0;
        assert_eq!(update_weights(&s, &[0.3, 0.1, 0.2]).unwrap(), vec![1.0, 1.0 / 3.0, 0.5]);
    }

    #[test]
    fn weighted_loss_cases() {
        assert!((weighted_epoch_loss(&[1.0, 0.5], &[0.2, 0.8]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(weighted_epoch_loss(&[1.0, 3.0], &[0.5, 0.5]).unwrap(), 2.0);
        assert_eq!(weighted_epoch_loss(&[1.0, 3.0], &[0.0, 1.0]).unwrap(), 3.0);
    }

    #[test]
    fn plateau_cases() {
        let cfg = SchedulerConfig {
            patience: 3,
            ..Default::default()
        };
        assert!(!detect_plateau(&[1.0, 0.5, 0.25], &cfg));
        assert!(!detect_plateau(&[1.0, 1.0, 1.0], &cfg));
        assert!(detect_plateau(&[1.0, 1.0, 1.0, 1.0], &cfg));
        // steps: 1e-3 (not below), then three of ~1e-4
        let hist = [1.0, 0.999, 0.9989, 0.9988, 0.9987];
        let first = (1..=hist.len()).find(|&t| detect_plateau(&hist[..t], &cfg));
        assert_eq!(first, Some(5));
    }

    #[test]
    fn phase_switch_is_permanent() {
        let cfg = SchedulerConfig {
            patience: 2,
            ..Default::default()
        };
        let mut s = CurriculumState::new(&[0.1, 0.2, 0.3], 0.7, cfg).unwrap();
        let losses = [0.5, 0.4, 0.3];
        for e in 0..3 {
            s.end_epoch(e, &losses).unwrap();
        }
        assert_eq!(s.phase, Phase::HardFocus);
        for e in 3..6 {
            s.end_epoch(e, &[0.1, 5.0, 0.2]).unwrap();
            assert_eq!(s.phase, Phase::HardFocus);
        }
    }

    #[test]
    fn log_csv_header() {
        let mut s = CurriculumState::new(&[0.1, 0.2], 0.7, SchedulerConfig::default()).unwrap();
        let row = s.end_epoch(0, &[0.5, 0.2]).unwrap();
        let mut buf = Vec::new();
        write_log_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,phase,lambda,v_min,v_mean,v_max,regularizer,weighted_loss"));
        assert!(text.lines().nth(1).unwrap().starts_with("0,EASY_FIRST,0.7,"));
    }
}
