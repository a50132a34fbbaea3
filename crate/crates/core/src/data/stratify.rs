use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SizeBin, Split};
use crate::error::{Error, Result};

/// Lesion-size bins: cut points plus the id → bin map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    /// Largest fraction placed in S (0 when no sample has a lesion).
    pub q30: f64,
    /// Largest fraction placed in M (falls back to `q30` when M is empty).
    pub q60: f64,
    pub assignment: BTreeMap<String, SizeBin>,
}

impl SizeBins {
    pub fn bin_of(&self, id: &str) -> Option<SizeBin> {
        self.assignment.get(id).copied()
    }

    /// Sample counts for S, M, L.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for b in self.assignment.values() {
            c[*b as usize] += 1;
        }
        c
    }

    /// Ids in `bin`, sorted.
    pub fn members(&self, bin: SizeBin) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, b)| **b == bin)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// `⌈num·n / den⌉` without floating-point rounding surprises.
fn ceil_frac(n: usize, num: usize, den: usize) -> usize {
    (num * n).div_ceil(den)
}

/// Bin samples by ascending lesion fraction: ranks up to ⌈0.3N⌉ go to S,
/// up to ⌈0.6N⌉ to M, the rest to L. Ties are ordered by id. Lesion-free
/// samples are not ranked and always land in S.
pub fn stratify(dataset: &Dataset) -> Result<SizeBins> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut assignment = BTreeMap::new();
    let mut ranked: Vec<(f64, &str)> = Vec::new();
    for s in &dataset.samples {
        if s.lesion_fraction > 0.0 {
            ranked.push((s.lesion_fraction, &s.id));
        } else {
            assignment.insert(s.id.clone(), SizeBin::S);
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let n = ranked.len();
    let (cut_s, cut_m) = (ceil_frac(n, 3, 10), ceil_frac(n, 6, 10));
    let (mut q30, mut q60) = (0.0, 0.0);
    for (rank, (frac, id)) in ranked.iter().enumerate().map(|(i, r)| (i + 1, r)) {
        let bin = if rank <= cut_s {
            q30 = *frac;
            q60 = *frac;
            SizeBin::S
        } else if rank <= cut_m {
            q60 = *frac;
            SizeBin::M
        } else {
            SizeBin::L
        };
        assignment.insert(id.to_string(), bin);
    }
    Ok(SizeBins { q30, q60, assignment })
}

/// Hold out `test_fraction` of every bin (rounded) for testing, the rest for
/// training. The draw depends only on ids, bins and `seed`.
pub fn assign_splits(dataset: &mut Dataset, bins: &SizeBins, test_fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = BTreeMap::new();
    for bin in SizeBin::ALL {
        let mut ids = bins.members(bin);
        ids.shuffle(&mut rng);
        let n_test = (ids.len() as f64 * test_fraction).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            split.insert(id.to_string(), if i < n_test { Split::Test } else { Split::Train });
        }
    }
    for r in &mut dataset.manifest {
        r.bin = bins.bin_of(&r.id);
        r.split = Some(*split.get(&r.id).ok_or_else(|| {
            Error::Config(format!("sample {} has no size bin", r.id))
        })?);
    }
    Ok(())
}
