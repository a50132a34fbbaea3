//! Enhanced visual state-space block.
//!
//! ```text
//! u     = LN₁(x)
//! inner = LN₂(SS2D(u))
//! z     = inner + u                 (inner residual)
//! out   = x + P(EnCF(z))            (outer residual)
//! ```
//!
//! There is no depthwise convolution. With EnCF disabled the block computes
//! `x + P(z)`.

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::encf::{Encf, EncfCache};
use super::ss2d::{Ss2d, Ss2dCache};
use crate::error::Result;
use crate::nn::{join, ops, visit_opt, visit_opt_mut, LayerNorm, LayerNormCache, Linear, Module, Slot};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvssBlock {
    pub norm_in: LayerNorm,
    pub ss2d: Ss2d,
    pub norm_scan: LayerNorm,
    pub encf: Option<Encf>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct EnvssCache {
    ln_in: LayerNormCache,
    ss2d: Ss2dCache,
    ln_scan: LayerNormCache,
    encf: Option<EncfCache>,
    proj_in: Array4<f64>,
}

impl EnvssBlock {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        state: usize,
        rank: usize,
        encf_reduction: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm_in: LayerNorm::new(channels),
            ss2d: Ss2d::new(channels, state, rank, rng),
            norm_scan: LayerNorm::new(channels),
            encf: encf_reduction
                .map(|r| Encf::new(channels, r, rng))
                .transpose()?,
            proj: Linear::new(channels, channels, true, 0.5, rng),
        })
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, EnvssCache)> {
        let (b, h, w, _) = x.dim();
        let (u_rows, ln_in) = self.norm_in.forward(ops::rows(x));
        let u = ops::unrows(u_rows, b, h, w);
        let (s, ss2d) = self.ss2d.forward(&u)?;
        let (inner, ln_scan) = self.norm_scan.forward(ops::rows(&s));
        let z = ops::unrows(inner, b, h, w) + &u;
        let (proj_in, encf) = match &self.encf {
            Some(e) => {
                let (y, c) = e.forward(&z);
                (y, Some(c))
            }
            None => (z, None),
        };
        let out = x + &ops::unrows(self.proj.forward(ops::rows(&proj_in)), b, h, w);
        Ok((
            out,
            EnvssCache {
                ln_in,
                ss2d,
                ln_scan,
                encf,
                proj_in,
            },
        ))
    }

    pub fn backward(&self, cache: &EnvssCache, dy: &Array4<f64>, g: &mut EnvssBlock) -> Array4<f64> {
        let (b, h, w, _) = dy.dim();
        let dproj_in = ops::unrows(
            self.proj.backward(ops::rows(&cache.proj_in), ops::rows(dy), &mut g.proj),
            b,
            h,
            w,
        );
        let dz = match (&self.encf, &cache.encf) {
            (Some(e), Some(c)) => e.backward(c, &dproj_in, g.encf.as_mut().expect("grad mirrors model")),
            _ => dproj_in,
        };
        let dinner = self.norm_scan.backward(&cache.ln_scan, ops::rows(&dz), &mut g.norm_scan);
        let ds = ops::unrows(dinner, b, h, w);
        let mut du = self.ss2d.backward(&cache.ss2d, &ds, &mut g.ss2d);
        du += &dz;
        let dx_norm = self.norm_in.backward(&cache.ln_in, ops::rows(&du), &mut g.norm_in);
        ops::unrows(dx_norm, b, h, w) + dy
    }
}

impl Module for EnvssBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.norm_in.visit(&join(prefix, "norm_in"), f);
        self.ss2d.visit(&join(prefix, "ss2d"), f);
        self.norm_scan.visit(&join(prefix, "norm_scan"), f);
        visit_opt(&self.encf, prefix, "encf", f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.norm_in.visit_mut(&join(prefix, "norm_in"), f);
        self.ss2d.visit_mut(&join(prefix, "ss2d"), f);
        self.norm_scan.visit_mut(&join(prefix, "norm_scan"), f);
        visit_opt_mut(&mut self.encf, prefix, "encf", f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
