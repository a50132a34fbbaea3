//! Oracle, identity and invariant checks shared by the focused suites and the
//! acceptance report. Each returns an [`Outcome`] instead of panicking so the
//! acceptance target can print every verdict before failing.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use s3mamba::backbone::{count_params, Encf, EnvssBlock, ModelConfig, ModulationMode, S3Mamba};
use s3mamba::curriculum::{
    detect_plateau, regularizer_value, update_weights, CurriculumState, Phase, SchedulerConfig,
};
use s3mamba::metrics::sample_metrics;
use s3mamba::nn::{count_trainable, randn, Module};
use s3mamba::tcma::{base_tensor, inverse_partition, modulate, partition};

use super::rng;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    pub fn pass(detail: impl Into<String>) -> Self {
        Self { ok: true, detail: detail.into() }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self { ok: false, detail: detail.into() }
    }

    pub fn expect(self, name: &str) {
        assert!(self.ok, "{name}: {}", self.detail);
    }
}

// ---- oracles ---------------------------------------------------------------

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class counts by nested loops, then the five ratios averaged over
/// foreground classes with undefined values skipped.
fn brute_force_metrics(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: u8) -> [Option<f64>; 5] {
    let mut per_metric: [Vec<f64>; 5] = Default::default();
    for k in 1..classes {
        let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
        for (prow, grow) in pred.iter().zip(gt) {
            for (&p, &g) in prow.iter().zip(grow) {
                if p == k && g == k {
                    tp += 1;
                } else if p == k {
                    fp += 1;
                } else if g == k {
                    fneg += 1;
                } else {
                    tn += 1;
                }
            }
        }
        let vals = [
            ratio(tp, tp + fp + fneg),
            ratio(2 * tp, 2 * tp + fp + fneg),
            ratio(tp + tn, tp + fp + tn + fneg),
            ratio(tn, tn + fp),
            ratio(tp, tp + fneg),
        ];
        for (bucket, v) in per_metric.iter_mut().zip(vals) {
            bucket.extend(v);
        }
    }
    per_metric.map(|v| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64))
}

/// Metrics against brute-force counting on random 16×16 mask pairs, exact.
pub fn metrics_brute_force(pairs: usize, seed: u64) -> Outcome {
    let mut g = rng(seed);
    for case in 0..pairs {
        let classes: u8 = if case % 4 == 3 { 3 } else { 2 };
        // vary the foreground density so empty and full masks both appear
        let density = [0.0, 0.02, 0.3, 0.7, 1.0][case % 5];
        let draw = |g: &mut super::Rng64| -> Vec<Vec<u8>> {
            (0..16)
                .map(|_| {
                    (0..16)
                        .map(|_| if g.random_bool(density) { g.random_range(1..classes) } else { 0 })
                        .collect()
                })
                .collect()
        };
        let pred = draw(&mut g);
        let gt = draw(&mut g);
        let to_arr = |m: &[Vec<u8>]| Array2::from_shape_fn((16, 16), |(r, c)| m[r][c]);
        let got = sample_metrics(to_arr(&pred).view(), to_arr(&gt).view(), classes as usize)
            .expect("same shapes")
            .values();
        let want = brute_force_metrics(&pred, &gt, classes);
        if got != want {
            return Outcome::fail(format!("pair {case}: library {got:?} vs brute force {want:?}"));
        }
    }
    Outcome::pass(format!("{pairs} pairs identical"))
}

/// Base tensor against the quadruple loop, max abs error ≤ 1e−12.
pub fn base_tensor_nested_loop(trials: usize, seed: u64) -> Outcome {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (b, p, j, c, e) = (
            g.random_range(1..3),
            g.random_range(1..5),
            g.random_range(1..10),
            g.random_range(1..4),
            g.random_range(1..6),
        );
        let po: Array4<f64> = randn((b, p, j, c), 1.0, &mut g);
        let pi: Array3<f64> = randn((b, p, j), 1.0, &mut g);
        let pe: Array4<f64> = randn((b, p, j, e), 1.0, &mut g);
        let got = base_tensor(po.view(), pi.view(), pe.view()).expect("consistent shapes");
        for bi in 0..b {
            for pp in 0..p {
                for ci in 0..c {
                    for ei in 0..e {
                        let mut acc = 0.0;
                        for jj in 0..j {
                            acc += po[[bi, pp, jj, ci]] * pi[[bi, pp, jj]] * pe[[bi, pp, jj, ei]];
                        }
                        worst = worst.max((acc - got[[bi, pp, ci, ei]]).abs());
                    }
                }
            }
        }
    }
    if worst <= 1e-12 {
        Outcome::pass(format!("{trials} shapes, max |Δ| = {worst:.2e}"))
    } else {
        Outcome::fail(format!("max |Δ| = {worst:.3e} exceeds 1e-12"))
    }
}

/// Partition layout against an explicit index formula, and exact inversion.
pub fn partition_round_trip(trials: usize, seed: u64) -> Outcome {
    let mut g = rng(seed);
    for t in 0..trials {
        let d = [1, 2, 3, 4][t % 4];
        let (th, tw) = (g.random_range(1..4), g.random_range(1..4));
        let (b, ch) = (g.random_range(1..3), g.random_range(1..4));
        let (h, w) = (th * d, tw * d);
        let x: Array4<f64> = randn((b, h, w, ch), 1.0, &mut g);
        let p = partition(x.view(), d).expect("tiles");
        for ((bi, pi, k, c), &v) in p.indexed_iter() {
            let (y, xx) = ((pi / tw) * d + k / d, (pi % tw) * d + k % d);
            if v.to_bits() != x[[bi, y, xx, c]].to_bits() {
                return Outcome::fail(format!("d={d}: patch {pi} pixel {k} is not ({y},{xx})"));
            }
        }
        let back = inverse_partition(p.view(), h, w).expect("tiles");
        if back != x {
            return Outcome::fail(format!("d={d} {h}×{w}: inverse_partition ∘ partition ≠ id"));
        }
    }
    Outcome::pass(format!("{trials} shapes bit-exact"))
}

/// `λ·Σ 1/rank + (1 − λ)·Σ v²` with ranks by pairwise counting.
fn regularizer_reference(v: &[f64], l: &[f64], lambda: f64) -> f64 {
    let rank = |i: usize| 1 + (0..l.len()).filter(|&j| l[j] < l[i] || (l[j] == l[i] && j < i)).count();
    lambda * (0..l.len()).map(|i| 1.0 / rank(i) as f64).sum::<f64>()
        + (1.0 - lambda) * v.iter().map(|x| x * x).sum::<f64>()
}

pub fn regularizer_reimplementation(trials: usize, seed: u64) -> Outcome {
    let mut g = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = g.random_range(1..60);
        let v: Vec<f64> = (0..n).map(|_| g.random_range(0.1..=1.0)).collect();
        // coarse grid so ties occur
        let l: Vec<f64> = (0..n).map(|_| g.random_range(0..20) as f64 * 0.05).collect();
        let lambda = g.random_range(0.0..=1.0);
        let got = regularizer_value(&v, &l, lambda).expect("finite inputs");
        worst = worst.max((got - regularizer_reference(&v, &l, lambda)).abs());
    }
    if worst <= 1e-12 {
        Outcome::pass(format!("{trials} vectors, max |Δ| = {worst:.2e}"))
    } else {
        Outcome::fail(format!("max |Δ| = {worst:.3e} exceeds 1e-12"))
    }
}

// ---- identities ------------------------------------------------------------

pub fn envss_zero_projection_identity(seed: u64) -> Outcome {
    let mut g = rng(seed);
    for encf in [Some(2), None] {
        let mut block = EnvssBlock::new(4, 3, 1, encf, &mut g).expect("valid block");
        block.proj.visit_mut("", &mut |_, _, mut a| a.fill(0.0));
        let x: Array4<f64> = randn((2, 3, 5, 4), 1.0, &mut g);
        let (y, _) = block.forward(&x).expect("forward");
        if y != x {
            return Outcome::fail(format!("encf {encf:?}: output differs from input"));
        }
    }
    Outcome::pass("bit-exact with and without EnCF")
}

pub fn encf_zero_init_scaling(seed: u64) -> Outcome {
    let mut g = rng(seed);
    let encf = Encf::new(8, 4, &mut g).expect("valid reduction");
    let x: Array4<f64> = randn((3, 4, 4, 8), 2.0, &mut g);
    let (y, cache) = encf.forward(&x);
    if cache.scale().iter().any(|&s| s != 0.5) {
        return Outcome::fail("channel scale is not exactly 0.5");
    }
    if y != x.mapv(|v| 1.5 * v) {
        return Outcome::fail("output is not exactly 1.5·x");
    }
    Outcome::pass("s = 0.5, output = 1.5·x exactly")
}

pub fn strict_unit_attention_identity(seed: u64) -> Outcome {
    let mut g = rng(seed);
    let mask: Array4<f64> = randn((2, 8, 8, 3), 1.0, &mut g);
    let ones = Array4::<f64>::ones((2, 8, 8, 3));
    let strict = modulate(mask.view(), ones.view(), ModulationMode::Strict).expect("shapes");
    let zeros = Array4::<f64>::zeros((2, 8, 8, 3));
    let residual = modulate(mask.view(), zeros.view(), ModulationMode::Residual).expect("shapes");
    if strict != mask {
        return Outcome::fail("strict mode with A = 1 changed the mask");
    }
    if residual != mask {
        return Outcome::fail("residual mode with A = 0 changed the mask");
    }
    Outcome::pass("strict A=1 and residual A=0 are bit-exact identities")
}

// ---- curriculum invariants -------------------------------------------------

fn random_state(g: &mut super::Rng64, n: usize, phase: Phase, equal: bool) -> CurriculumState {
    let config = SchedulerConfig {
        v_min: g.random_range(0.01..0.9),
        alpha_ramp: g.random_range(0.05..=1.0),
        ..SchedulerConfig::default()
    };
    let fractions: Vec<f64> = (0..n).map(|_| g.random_range(0.0..0.3)).collect();
    let mut s = CurriculumState::new(&fractions, g.random_range(0.0..=1.0), config).expect("valid config");
    let lo = s.config.v_min;
    let common = g.random_range(lo..=1.0);
    s.v = (0..n).map(|_| if equal { common } else { g.random_range(lo..=1.0) }).collect();
    s.phase = phase;
    s.epochs_in_phase = g.random_range(0..8);
    s
}

fn random_losses(g: &mut super::Rng64, n: usize) -> Vec<f64> {
    let scale = 10f64.powf(g.random_range(-3.0..2.0));
    (0..n).map(|_| scale * g.random_range(0.0..1.0)).collect()
}

/// Boundedness in both phases plus easy-first and hard-focus monotonicity.
pub fn curriculum_properties(vectors: usize, seed: u64) -> Outcome {
    let mut g = rng(seed);
    for case in 0..vectors {
        let n = g.random_range(1..40);
        let losses = random_losses(&mut g, n);
        for phase in [Phase::EasyFirst, Phase::HardFocus] {
            let s = random_state(&mut g, n, phase, false);
            let v = update_weights(&s, &losses).expect("finite losses");
            let lo = s.config.v_min;
            if let Some(x) = v.iter().find(|&&x| !(lo..=1.0).contains(&x)) {
                return Outcome::fail(format!("case {case} {phase:?}: weight {x} outside [{lo}, 1]"));
            }
            let s = random_state(&mut g, n, phase, true);
            let v = update_weights(&s, &losses).expect("finite losses");
            for i in 0..n {
                for j in 0..n {
                    if losses[i] >= losses[j] {
                        continue;
                    }
                    let ordered = match phase {
                        Phase::EasyFirst => v[i] >= v[j],
                        Phase::HardFocus => v[i] <= v[j],
                    };
                    if !ordered {
                        return Outcome::fail(format!(
                            "case {case} {phase:?}: l[{i}] < l[{j}] but v = {} vs {}",
                            v[i], v[j]
                        ));
                    }
                }
            }
        }
    }
    Outcome::pass(format!("{vectors} loss vectors, both phases"))
}

/// Fires on constant histories, never on geometric decay with ratio ≤ 1 − 2ε.
pub fn plateau_detector(trials: usize, seed: u64) -> Outcome {
    let cfg = SchedulerConfig {
        epsilon: 1e-3,
        patience: 5,
        ..SchedulerConfig::default()
    };
    let mut g = rng(seed);
    for _ in 0..trials {
        let c = 10f64.powf(g.random_range(-4.0..3.0));
        let len = g.random_range(cfg.patience + 1..40);
        if !detect_plateau(&vec![c; len], &cfg) {
            return Outcome::fail(format!("constant {c} over {len} epochs not detected"));
        }
        let r = g.random_range(0.01..=1.0 - 2.0 * cfg.epsilon);
        let l0 = 10f64.powf(g.random_range(-2.0..3.0));
        let hist: Vec<f64> = (0..60).map(|k| l0 * r.powi(k)).collect();
        if let Some(k) = (1..=hist.len()).find(|&k| detect_plateau(&hist[..k], &cfg)) {
            return Outcome::fail(format!("decay ratio {r} flagged after {k} epochs"));
        }
    }
    Outcome::pass(format!("{trials} constant and {trials} geometric histories"))
}

// ---- parameter count -------------------------------------------------------

pub fn param_count_configs() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("tiny", super::tiny_model_config()),
        ("desk", ModelConfig::desk()),
        (
            "desk-no-encf-no-tcma",
            ModelConfig {
                encf: false,
                tcma: s3mamba::backbone::TcmaConfig {
                    enabled: false,
                    ..Default::default()
                },
                ..ModelConfig::desk()
            },
        ),
        ("paper-scale", ModelConfig::paper_scale()),
    ]
}

pub fn param_count_agreement() -> (Outcome, usize) {
    let mut g = rng(0);
    let mut desk = 0;
    for (name, cfg) in param_count_configs() {
        let model = S3Mamba::new(&cfg, &mut g).expect("valid config");
        let (closed, walked) = (count_params(&cfg), count_trainable(&model));
        if closed != walked {
            return (Outcome::fail(format!("{name}: closed form {closed} vs traversal {walked}")), 0);
        }
        if name == "desk" {
            desk = closed;
        }
    }
    (Outcome::pass(format!("4 configs agree; desk = {desk}")), desk)
}
