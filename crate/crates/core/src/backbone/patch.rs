//! Patch embedding, merging and expansion.

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, ops, LayerNorm, LayerNormCache, Linear, Module, Slot};

/// Non-overlapping p×p patches projected to `embed_dim`, then layer-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PatchEmbedCache {
    patches: Array4<f64>,
    norm: LayerNormCache,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(patch: usize, in_ch: usize, embed: usize, rng: &mut R) -> Self {
        Self {
            patch,
            proj: Linear::new(patch * patch * in_ch, embed, true, 1.0, rng),
            norm: LayerNorm::new(embed),
        }
    }

    pub fn forward(&self, image: &Array4<f64>) -> Result<(Array4<f64>, PatchEmbedCache)> {
        let (b, h, w, c) = image.dim();
        let p = self.patch;
        if h % p != 0 || w % p != 0 || p * p * c != self.proj.input_dim() {
            return Err(Error::Shape(format!(
                "patch embedding of {p}×{p} patches cannot take a {h}×{w}×{c} image"
            )));
        }
        let patches = ops::pixel_unshuffle(image.view(), p);
        let y = self.proj.forward(ops::rows(&patches));
        let (y, norm) = self.norm.forward(y.view());
        Ok((ops::unrows(y, b, h / p, w / p), PatchEmbedCache { patches, norm }))
    }

    /// Parameter gradients only; the image needs none.
    pub fn backward(&self, cache: &PatchEmbedCache, dy: &Array4<f64>, g: &mut PatchEmbed) {
        let dproj = self.norm.backward(&cache.norm, ops::rows(dy), &mut g.norm);
        self.proj
            .backward_params(ops::rows(&cache.patches), dproj.view(), &mut g.proj);
    }
}

impl Module for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// 2×2 neighbourhood concatenation (TL, TR, BL, BR) and a linear map 4C → 2C.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMerge {
    pub proj: Linear,
}

impl PatchMerge {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(4 * channels, 2 * channels, false, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array4<f64>)> {
        let (b, h, w, _) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("cannot merge odd spatial dims {h}×{w}")));
        }
        let gathered = ops::pixel_unshuffle(x.view(), 2);
        let y = self.proj.forward(ops::rows(&gathered));
        Ok((ops::unrows(y, b, h / 2, w / 2), gathered))
    }

    pub fn backward(&self, gathered: &Array4<f64>, dy: &Array4<f64>, g: &mut PatchMerge) -> Array4<f64> {
        let (b, h, w, _) = dy.dim();
        let dg = self.proj.backward(ops::rows(gathered), ops::rows(dy), &mut g.proj);
        ops::pixel_shuffle(ops::unrows(dg, b, h, w).view(), 2)
    }
}

impl Module for PatchMerge {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Linear map C → f²·C_out followed by depth-to-space by f.
///
/// The decoder uses f = 2 with C_out = C/2 (so the projection is C → 2C);
/// the final stage uses f = 4 with C_out = C followed by a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchExpand {
    pub factor: usize,
    pub proj: Linear,
    pub norm: Option<LayerNorm>,
}

#[derive(Debug, Clone)]
pub struct PatchExpandCache {
    x: Array4<f64>,
    norm: Option<LayerNormCache>,
}

impl PatchExpand {
    /// Decoder expansion: doubles H, W and halves C.
    pub fn halving<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            factor: 2,
            proj: Linear::new(channels, 2 * channels, false, 1.0, rng),
            norm: None,
        }
    }

    /// Final expansion: multiplies H, W by `factor`, keeps C, then normalizes.
    pub fn final_stage<R: Rng + ?Sized>(channels: usize, factor: usize, rng: &mut R) -> Self {
        Self {
            factor,
            proj: Linear::new(channels, factor * factor * channels, false, 1.0, rng),
            norm: Some(LayerNorm::new(channels)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.proj.output_dim() / (self.factor * self.factor)
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, PatchExpandCache) {
        let (b, h, w, _) = x.dim();
        let f = self.factor;
        let y = ops::unrows(self.proj.forward(ops::rows(x)), b, h, w);
        let y = ops::pixel_shuffle(y.view(), f);
        match &self.norm {
            Some(norm) => {
                let (n, cache) = norm.forward(ops::rows(&y));
                (
                    ops::unrows(n, b, h * f, w * f),
                    PatchExpandCache {
                        x: x.clone(),
                        norm: Some(cache),
                    },
                )
            }
            None => (y, PatchExpandCache { x: x.clone(), norm: None }),
        }
    }

    pub fn backward(&self, cache: &PatchExpandCache, dy: &Array4<f64>, g: &mut PatchExpand) -> Array4<f64> {
        let (b, hf, wf, _) = dy.dim();
        let f = self.factor;
        let dy = match (&self.norm, &cache.norm) {
            (Some(norm), Some(c)) => ops::unrows(
                norm.backward(c, ops::rows(dy), g.norm.as_mut().expect("grad mirrors model")),
                b,
                hf,
                wf,
            ),
            _ => dy.clone(),
        };
        let dshuf = ops::pixel_unshuffle(dy.view(), f);
        let dx = self.proj.backward(ops::rows(&cache.x), ops::rows(&dshuf), &mut g.proj);
        ops::unrows(dx, b, hf / f, wf / f)
    }
}

impl Module for PatchExpand {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        crate::nn::visit_opt(&self.norm, prefix, "norm", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        crate::nn::visit_opt_mut(&mut self.norm, prefix, "norm", f);
    }
}
