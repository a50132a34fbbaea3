//! Shared oracles for the integration suites: a central finite-difference
//! checker and small fixtures.
#![allow(dead_code)]

pub mod checks;

use ndarray::{Array, Array2, Array3, Array4, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3mamba::backbone::{
    sample_loss, selective_scan_1d, selective_scan_1d_backward, Encf, EnvssBlock, ModelConfig, S3Mamba,
    ScanParams, Ss2d, TcmaConfig,
};
use s3mamba::nn::{randn, zeroed, Mode, Module};
use s3mamba::tcma::TcmaUnit;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Magnitude below which a gradient entry is compared absolutely
/// (`|a − n| ≤ tol·floor`), keeping round-off on near-zero entries from
/// dominating the relative error. Probe losses sum thousands of terms, so
/// their round-off over a 1e-4 step reaches ~1e-9.
pub const FD_FLOOR: f64 = 1e-5;
pub const FD_SEEDS: u64 = 20;

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative mismatch found by a gradient check.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst <= FD_REL_TOL
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        self.checked += 1;
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_at = at() + &format!(" analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Compare `dx` against finite differences of `loss` around `x`.
pub fn check_input<D: Dimension>(
    x: &Array<f64, D>,
    dx: &Array<f64, D>,
    loss: impl Fn(&Array<f64, D>) -> f64,
) -> GradReport {
    let mut rep = GradReport::default();
    let mut probe = x.clone();
    for (k, a) in dx.iter().enumerate() {
        let orig = x.as_slice_memory_order().expect("contiguous")[k];
        let n = central(|h| {
            probe.as_slice_memory_order_mut().expect("contiguous")[k] = orig + h;
            loss(&probe)
        });
        probe.as_slice_memory_order_mut().expect("contiguous")[k] = orig;
        rep.record(*a, n, || format!("input[{k}]"));
    }
    rep
}

fn entry_mut<M: Module>(m: &mut M, target: usize, f: impl FnOnce(&mut f64)) {
    let mut k = 0;
    let mut f = Some(f);
    m.visit_mut("", &mut |_, slot, mut a| {
        if !slot.trainable() {
            return;
        }
        let len = a.len();
        if target >= k && target < k + len {
            if let Some(f) = f.take() {
                f(a.iter_mut().nth(target - k).expect("in range"));
            }
        }
        k += len;
    });
}

fn entry_names<M: Module>(m: &M) -> Vec<String> {
    let mut names = Vec::new();
    m.visit("", &mut |name, slot, a| {
        if slot.trainable() {
            names.extend((0..a.len()).map(|i| format!("{name}[{i}]")));
        }
    });
    names
}

/// Compare every trainable entry of `grads` (or every `stride`-th one)
/// against finite differences of `loss` with respect to `model`.
pub fn check_params<M: Module + Clone>(model: &M, grads: &M, stride: usize, loss: impl Fn(&M) -> f64) -> GradReport {
    let analytic = s3mamba::nn::flatten_trainable(grads);
    let names = entry_names(model);
    let mut rep = GradReport::default();
    let mut probe = model.clone();
    for k in (0..analytic.len()).step_by(stride.max(1)) {
        let mut orig = 0.0;
        entry_mut(&mut probe, k, |v| orig = *v);
        let n = central(|h| {
            entry_mut(&mut probe, k, |v| *v = orig + h);
            loss(&probe)
        });
        entry_mut(&mut probe, k, |v| *v = orig);
        rep.record(analytic[k], n, || names[k].clone());
    }
    rep
}

/// Overwrite every trainable tensor with N(0, std²) noise so that
/// zero-initialized branches take part in the check.
pub fn randomize<M: Module>(m: &mut M, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |_, slot, mut a| {
        if slot.trainable() {
            a.iter_mut().for_each(|v| *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
    });
}

/// Σ r ⊙ y.
pub fn probe_loss<D: Dimension>(y: &Array<f64, D>, r: &Array<f64, D>) -> f64 {
    (y * r).sum()
}

// ---- per-operation checks --------------------------------------------------

pub fn grad_scan(seed: u64) -> GradReport {
    let mut g = rng(seed);
    let mut p = ScanParams::new(3, 2, 1, &mut g);
    randomize(&mut p, 0.5, &mut g);
    let u: Array2<f64> = randn((6, 3), 1.0, &mut g);
    let r: Array2<f64> = randn((6, 3), 1.0, &mut g);
    let (_, cache) = selective_scan_1d(u.view(), &p).unwrap();
    let mut grads = zeroed(&p);
    let du = selective_scan_1d_backward(&cache, r.view(), &p, &mut grads);
    let mut rep = check_input(&u, &du, |u| probe_loss(&selective_scan_1d(u.view(), &p).unwrap().0, &r));
    rep.merge(check_params(&p, &grads, 1, |p| {
        probe_loss(&selective_scan_1d(u.view(), p).unwrap().0, &r)
    }));
    rep
}

pub fn grad_ss2d(seed: u64) -> GradReport {
    let mut g = rng(seed);
    let mut m = Ss2d::new(4, 2, 1, &mut g);
    randomize(&mut m, 0.4, &mut g);
    let x: Array4<f64> = randn((2, 3, 2, 4), 1.0, &mut g);
    let (y, cache) = m.forward(&x).unwrap();
    let r: Array4<f64> = randn(y.raw_dim(), 1.0, &mut g);
    let mut grads = zeroed(&m);
    let dx = m.backward(&cache, &r, &mut grads);
    let mut rep = check_input(&x, &dx, |x| probe_loss(&m.forward(x).unwrap().0, &r));
    rep.merge(check_params(&m, &grads, 1, |m| probe_loss(&m.forward(&x).unwrap().0, &r)));
    rep
}

pub fn grad_encf(seed: u64) -> GradReport {
    let mut g = rng(seed);
    let mut m = Encf::new(4, 2, &mut g).unwrap();
    randomize(&mut m, 0.7, &mut g);
    let x: Array4<f64> = randn((2, 3, 3, 4), 1.0, &mut g);
    let (y, cache) = m.forward(&x);
    let r: Array4<f64> = randn(y.raw_dim(), 1.0, &mut g);
    let mut grads = zeroed(&m);
    let dx = m.backward(&cache, &r, &mut grads);
    let mut rep = check_input(&x, &dx, |x| probe_loss(&m.forward(x).0, &r));
    rep.merge(check_params(&m, &grads, 1, |m| probe_loss(&m.forward(&x).0, &r)));
    rep
}

pub fn grad_block(seed: u64) -> GradReport {
    let mut g = rng(seed);
    let mut m = EnvssBlock::new(4, 2, 1, Some(2), &mut g).unwrap();
    randomize(&mut m, 0.4, &mut g);
    // LayerNorm gains near zero make the check ill-conditioned; keep them near 1
    m.visit_mut("", &mut |name, _, mut a| {
        if name.ends_with("gamma") {
            a.mapv_inplace(|v| 1.0 + 0.2 * v);
        }
    });
    let x: Array4<f64> = randn((1, 3, 3, 4), 1.0, &mut g);
    let (y, cache) = m.forward(&x).unwrap();
    let r: Array4<f64> = randn(y.raw_dim(), 1.0, &mut g);
    let mut grads = zeroed(&m);
    let dx = m.backward(&cache, &r, &mut grads);
    let mut rep = check_input(&x, &dx, |x| probe_loss(&m.forward(x).unwrap().0, &r));
    rep.merge(check_params(&m, &grads, 1, |m| probe_loss(&m.forward(&x).unwrap().0, &r)));
    rep
}

pub fn small_tcma_config() -> TcmaConfig {
    TcmaConfig {
        patch_sizes: vec![1, 2, 4],
        image_channels: 2,
        edge_channels: 2,
        hidden: 3,
        ..TcmaConfig::default()
    }
}

pub fn grad_tcma(seed: u64) -> GradReport {
    let mut g = rng(seed);
    let mut unit = TcmaUnit::new(&small_tcma_config(), 3, 3, 2, &mut g);
    randomize(&mut unit, 0.5, &mut g);
    // Central differences are meaningless across a ReLU kink. A normalized
    // column over R rows satisfies |x̂| ≤ √R, so a shift beyond |γ|·√R keeps
    // each hidden unit strictly on one side: some units live, some dead.
    for (&d, mlp) in unit.patch_sizes.clone().iter().zip(unit.mlps.iter_mut()) {
        let rows = (2 * (8 / d) * (8 / d)) as f64;
        for (gam, beta) in mlp.bn.gamma.iter_mut().zip(mlp.bn.beta.iter_mut()) {
            *gam = 1.0 + 0.2 * *gam;
            let side = if g.random_bool(0.5) { 1.0 } else { -1.0 };
            *beta = side * (gam.abs() * rows.sqrt() + 0.5);
        }
    }
    // an 8×8 grid gives the coarsest scale 4 patches per image, so batch
    // statistics are not degenerate
    let image: Array4<f64> = Array4::from_shape_fn((2, 16, 16, 3), |_| g.random_range(0.0..1.0));
    let feat: Array4<f64> = randn((2, 8, 8, 3), 1.0, &mut g);
    let (out, cache) = unit.forward(&image, &feat, Mode::Train).unwrap();
    let r: Array4<f64> = randn(out.features.raw_dim(), 1.0, &mut g);
    let mut grads = zeroed(&unit);
    let dfeat = unit.backward(&cache, &r, &mut grads).unwrap();
    let f = |u: &TcmaUnit, x: &Array4<f64>| probe_loss(&u.forward(&image, x, Mode::Train).unwrap().0.features, &r);
    let mut rep = check_input(&feat, &dfeat, |x| f(&unit, x));
    rep.merge(check_params(&unit, &grads, 1, |u| f(u, &feat)));
    rep
}

pub fn grad_sample_loss(seed: u64) -> GradReport {
    let mut g = rng(seed);
    let logits: Array3<f64> = randn((5, 4, 3), 1.5, &mut g);
    let gt = Array2::from_shape_fn((5, 4), |_| g.random_range(0..3u8));
    let (_, d) = sample_loss(logits.view(), gt.view()).unwrap();
    check_input(&logits, &d, |l| sample_loss(l.view(), gt.view()).unwrap().0)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        embed_dim: 4,
        encoder_depths: vec![1, 1],
        decoder_depths: vec![1, 1],
        state_size: 2,
        se_reduction: 2,
        tcma: TcmaConfig {
            patch_sizes: vec![1, 2],
            ..small_tcma_config()
        },
        ..ModelConfig::desk()
    }
}

/// Whole-network check through the segmentation loss on a sampled subset of
/// parameters.
pub fn grad_model(seed: u64, stride: usize) -> GradReport {
    let mut g = rng(seed);
    let mut model = S3Mamba::new(&tiny_model_config(), &mut g).unwrap();
    randomize(&mut model, 0.3, &mut g);
    model.visit_mut("", &mut |name, _, mut a| {
        if name.ends_with("gamma") {
            a.mapv_inplace(|v| 1.0 + v);
        }
    });
    let image: Array4<f64> = Array4::from_shape_fn((2, 16, 16, 3), |_| g.random_range(0.0..1.0));
    let gts: Vec<Array2<u8>> = (0..2)
        .map(|_| Array2::from_shape_fn((16, 16), |_| g.random_range(0..2u8)))
        .collect();
    let loss = |m: &S3Mamba| -> (f64, Array4<f64>) {
        let (out, _) = m.forward(&image, Mode::Train).unwrap();
        let mut d = Array4::zeros(out.logits.raw_dim());
        let mut total = 0.0;
        for (i, gt) in gts.iter().enumerate() {
            let (l, dl) = sample_loss(out.logits.index_axis(ndarray::Axis(0), i), gt.view()).unwrap();
            total += l;
            d.index_axis_mut(ndarray::Axis(0), i).assign(&dl);
        }
        (total, d)
    };
    let (out, cache) = model.forward(&image, Mode::Train).unwrap();
    drop(out);
    let (_, dlogits) = loss(&model);
    let grads = model.backward(&cache, &dlogits).unwrap();
    check_params(&model, &grads, stride, |m| loss(m).0)
}
