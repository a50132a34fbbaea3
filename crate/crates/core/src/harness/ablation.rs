use super::config::{Ablation, ExperimentConfig};
use super::report::AblationRow;
use super::train::{prepare_data, train, EpochRecord, RunRecord};
use crate::error::Result;

/// Baseline, each component alone, and the full model.
pub fn ablation_variants() -> Vec<Ablation> {
    let only = |encf_on, tcma_on, cl_on| Ablation {
        encf_on,
        tcma_on,
        cl_on,
    };
    vec![
        Ablation::BASELINE,
        only(true, false, false),
        only(false, true, false),
        only(false, false, true),
        Ablation::FULL,
    ]
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    /// One averaged row per variant, in variant order.
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunRecord>,
}

/// Train every variant once per seed on a shared dataset and average the
/// final test reports per variant.
pub fn run_ablation(
    base: &ExperimentConfig,
    seeds: &[u64],
    variants: &[Ablation],
    progress: &mut dyn FnMut(&str, u64, &EpochRecord),
) -> Result<AblationOutcome> {
    let data = prepare_data(base)?;
    let mut rows = Vec::with_capacity(variants.len());
    let mut runs = Vec::new();
    for v in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = ExperimentConfig {
                seed,
                ablation: *v,
                ..base.clone()
            };
            let label = v.label();
            let (_, record) = train(&cfg, &data, &mut |e| progress(&label, seed, e))?;
            per_seed.push(record);
        }
        rows.push(AblationRow::from_runs(v.label(), &per_seed));
        runs.extend(per_seed);
    }
    Ok(AblationOutcome { rows, runs })
}
