//! Channel re-weighting with a residual path: `out = x + s ⊙ x`, where
//! `s = σ(FC₂(relu(FC₁(GAP(x)))))` is computed per sample and channel.

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, Linear, Module, Slot};

#[derive(Debug, Clone, PartialEq)]
pub struct Encf {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct EncfCache {
    x: Array4<f64>,
    pooled: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    scale: Array2<f64>,
}

impl EncfCache {
    /// The per-sample channel scale `s`, shape (B, C).
    pub fn scale(&self) -> &Array2<f64> {
        &self.scale
    }
}

impl Encf {
    /// `fc2` starts at zero so every channel scale begins at exactly 0.5.
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "channel count {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(channels, hidden, true, 2f64.sqrt(), rng),
            fc2: Linear::zeros(hidden, channels, true),
        })
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, EncfCache) {
        let (b, h, w, c) = x.dim();
        let pooled = x
            .view()
            .into_shape_with_order((b, h * w, c))
            .expect("standard layout")
            .mean_axis(Axis(1))
            .expect("non-empty spatial extent");
        let hidden_pre = self.fc1.forward(pooled.view());
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let scale = self.fc2.forward(hidden.view()).mapv(sigmoid);
        let mut out = x.clone();
        for (mut sample, s) in out.outer_iter_mut().zip(scale.outer_iter()) {
            let factor = s.mapv(|v| 1.0 + v);
            sample *= &factor;
        }
        (
            out,
            EncfCache {
                x: x.clone(),
                pooled,
                hidden_pre,
                hidden,
                scale,
            },
        )
    }

    pub fn backward(&self, cache: &EncfCache, dy: &Array4<f64>, g: &mut Encf) -> Array4<f64> {
        let (b, h, w, c) = dy.dim();
        let hw = (h * w) as f64;
        let mut dx = dy.clone();
        let mut dscale = Array2::zeros((b, c));
        for i in 0..b {
            let s = cache.scale.row(i);
            let factor = s.mapv(|v| 1.0 + v);
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            dxi *= &factor;
            let prod = &dy.index_axis(Axis(0), i) * &cache.x.index_axis(Axis(0), i);
            let summed = prod
                .into_shape_with_order((h * w, c))
                .expect("standard layout")
                .sum_axis(Axis(0));
            dscale.row_mut(i).assign(&summed);
        }
        let dlogit = &dscale * &cache.scale.mapv(|s| s * (1.0 - s));
        let mut dhidden = self.fc2.backward(cache.hidden.view(), dlogit.view(), &mut g.fc2);
        dhidden.zip_mut_with(&cache.hidden_pre, |d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
        let dpooled = self.fc1.backward(cache.pooled.view(), dhidden.view(), &mut g.fc1);
        for (mut dxi, dp) in dx.outer_iter_mut().zip(dpooled.outer_iter()) {
            let share = dp.mapv(|v| v / hw);
            dxi += &share;
        }
        dx
    }
}

impl Module for Encf {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
