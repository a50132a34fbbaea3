//! U-shaped encoder–decoder assembling embedding, blocks, merging,
//! expansion and the optional attention units.

use ndarray::{Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::block::{EnvssBlock, EnvssCache};
use super::config::ModelConfig;
use super::patch::{PatchEmbed, PatchEmbedCache, PatchExpand, PatchExpandCache, PatchMerge};
use crate::error::{Error, Result};
use crate::nn::{join, ops, visit_opt, visit_opt_mut, Linear, Mode, Module, Slot};
use crate::tcma::{TcmaCache, TcmaUnit};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStage {
    pub blocks: Vec<EnvssBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub expand: Option<PatchExpand>,
    pub blocks: Vec<EnvssBlock>,
    pub tcma: Option<TcmaUnit>,
}

/// The full segmentation network. Doubles as its own gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct S3Mamba {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub final_expand: PatchExpand,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// (B, H, W, N_c)
    pub logits: Array4<f64>,
    /// Intermediate mask of every decoder stage that carries an attention unit.
    pub masks: Vec<Option<Array4<f64>>>,
    /// Fused attention maps per decoder stage (same layout as `masks`).
    pub attention: Vec<Option<Array4<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    embed: PatchEmbedCache,
    encoder: Vec<Vec<EnvssCache>>,
    merges: Vec<Option<Array4<f64>>>,
    expands: Vec<Option<PatchExpandCache>>,
    decoder: Vec<Vec<EnvssCache>>,
    tcma: Vec<Option<TcmaCache>>,
    final_expand: PatchExpandCache,
    head_in: Array4<f64>,
}

impl S3Mamba {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let s = config.num_stages();
        let encf = config.encf.then_some(config.se_reduction);
        let embed = PatchEmbed::new(config.patch_size, config.in_channels, config.embed_dim, rng);
        let mut encoder = Vec::with_capacity(s);
        for i in 0..s {
            let c = config.stage_channels(i);
            let rank = config.effective_dt_rank(c);
            let blocks = (0..config.encoder_depths[i])
                .map(|_| EnvssBlock::new(c, config.state_size, rank, encf, rng))
                .collect::<Result<Vec<_>>>()?;
            let merge = (i + 1 < s).then(|| PatchMerge::new(c, rng));
            encoder.push(EncoderStage { blocks, merge });
        }
        let mut decoder = Vec::with_capacity(s);
        for i in 0..s {
            let level = config.decoder_level(i);
            let c = config.stage_channels(level);
            let rank = config.effective_dt_rank(c);
            let expand = (i > 0).then(|| PatchExpand::halving(config.stage_channels(level + 1), rng));
            let blocks = (0..config.decoder_depths[i])
                .map(|_| EnvssBlock::new(c, config.state_size, rank, encf, rng))
                .collect::<Result<Vec<_>>>()?;
            let tcma = config
                .tcma_at(i)
                .then(|| TcmaUnit::new(&config.tcma, config.in_channels, c, config.num_classes, rng));
            decoder.push(DecoderStage { expand, blocks, tcma });
        }
        let final_expand = PatchExpand::final_stage(config.embed_dim, config.patch_size, rng);
        let head = Linear::new(config.embed_dim, config.num_classes, true, 1.0, rng);
        Ok(Self {
            config: config.clone(),
            embed,
            encoder,
            decoder,
            final_expand,
            head,
        })
    }

    pub fn forward(&self, image: &Array4<f64>, mode: Mode) -> Result<(ForwardOutput, ForwardCache)> {
        let cfg = &self.config;
        let (b, h, w, c) = image.dim();
        if h != cfg.input_size || w != cfg.input_size || c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "model expects {0}×{0}×{1} images, got {h}×{w}×{c}",
                cfg.input_size, cfg.in_channels
            )));
        }
        let (mut x, embed) = self.embed.forward(image)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut merges = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = block.forward(&x)?;
                x = y;
                caches.push(cache);
            }
            enc_caches.push(caches);
            skips.push(x.clone());
            match &stage.merge {
                Some(m) => {
                    let (y, gathered) = m.forward(&x)?;
                    x = y;
                    merges.push(Some(gathered));
                }
                None => merges.push(None),
            }
        }

        let s = self.decoder.len();
        let mut expands = Vec::with_capacity(s);
        let mut dec_caches = Vec::with_capacity(s);
        let mut tcma_caches = Vec::with_capacity(s);
        let mut masks = Vec::with_capacity(s);
        let mut attention = Vec::with_capacity(s);
        for (i, stage) in self.decoder.iter().enumerate() {
            match &stage.expand {
                Some(e) => {
                    let (y, cache) = e.forward(&x);
                    x = y + &skips[cfg.decoder_level(i)];
                    expands.push(Some(cache));
                }
                None => expands.push(None),
            }
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, cache) = block.forward(&x)?;
                x = y;
                caches.push(cache);
            }
            dec_caches.push(caches);
            match &stage.tcma {
                Some(unit) => {
                    let (out, cache) = unit.forward(image, &x, mode)?;
                    x = out.features;
                    masks.push(Some(out.mask));
                    attention.push(Some(out.attention));
                    tcma_caches.push(Some(cache));
                }
                None => {
                    masks.push(None);
                    attention.push(None);
                    tcma_caches.push(None);
                }
            }
        }

        let (y, final_expand) = self.final_expand.forward(&x);
        let logits = ops::unrows(self.head.forward(ops::rows(&y)), b, h, w);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network logits".into()));
        }
        Ok((
            ForwardOutput {
                logits,
                masks,
                attention,
            },
            ForwardCache {
                embed,
                encoder: enc_caches,
                merges,
                expands,
                decoder: dec_caches,
                tcma: tcma_caches,
                final_expand,
                head_in: y,
            },
        ))
    }

    /// Gradients of all parameters given ∂loss/∂logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array4<f64>) -> Result<S3Mamba> {
        let mut g = crate::nn::zeroed(self);
        let (b, h, w, _) = cache.head_in.dim();
        let dhead = self
            .head
            .backward(ops::rows(&cache.head_in), ops::rows(dlogits), &mut g.head);
        let dhead = ops::unrows(dhead, b, h, w);
        let mut dx = self.final_expand.backward(&cache.final_expand, &dhead, &mut g.final_expand);

        let s = self.decoder.len();
        let mut dskips: Vec<Option<Array4<f64>>> = vec![None; s];
        for i in (0..s).rev() {
            let stage = &self.decoder[i];
            let gstage = &mut g.decoder[i];
            if let (Some(unit), Some(tc)) = (&stage.tcma, &cache.tcma[i]) {
                dx = unit.backward(tc, &dx, gstage.tcma.as_mut().expect("grad mirrors model"))?;
            }
            for (j, block) in stage.blocks.iter().enumerate().rev() {
                dx = block.backward(&cache.decoder[i][j], &dx, &mut gstage.blocks[j]);
            }
            if let (Some(e), Some(ec)) = (&stage.expand, &cache.expands[i]) {
                accumulate(&mut dskips[self.config.decoder_level(i)], &dx);
                dx = e.backward(ec, &dx, gstage.expand.as_mut().expect("grad mirrors model"));
            }
        }
        accumulate(&mut dskips[s - 1], &dx);

        let mut carry: Option<Array4<f64>> = None;
        for i in (0..self.encoder.len()).rev() {
            let stage = &self.encoder[i];
            let gstage = &mut g.encoder[i];
            let mut d = dskips[i].take().expect("every encoder stage feeds the decoder");
            if let (Some(m), Some(gathered), Some(c)) = (&stage.merge, &cache.merges[i], carry.take()) {
                d += &m.backward(gathered, &c, gstage.merge.as_mut().expect("grad mirrors model"));
            }
            for (j, block) in stage.blocks.iter().enumerate().rev() {
                d = block.backward(&cache.encoder[i][j], &d, &mut gstage.blocks[j]);
            }
            carry = Some(d);
        }
        self.embed
            .backward(&cache.embed, &carry.expect("at least one stage"), &mut g.embed);
        Ok(g)
    }

    /// Fold training-mode batch statistics into running estimates.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        for (stage, tc) in self.decoder.iter_mut().zip(&cache.tcma) {
            if let (Some(unit), Some(tc)) = (&mut stage.tcma, tc) {
                unit.absorb(tc);
            }
        }
    }

    /// Convenience evaluation-mode forward returning logits only.
    pub fn predict_logits(&self, image: &Array4<f64>) -> Result<Array4<f64>> {
        Ok(self.forward(image, Mode::Eval)?.0.logits)
    }

    pub fn num_params(&self) -> usize {
        crate::nn::count_trainable(self)
    }

    /// Argmax masks for a batch (ties → lower class index).
    pub fn predict_masks(&self, image: &Array4<f64>) -> Result<Vec<ndarray::Array2<u8>>> {
        let logits = self.predict_logits(image)?;
        Ok(logits
            .outer_iter()
            .map(|l| super::loss::argmax_mask(l))
            .collect())
    }
}

fn accumulate(slot: &mut Option<Array4<f64>>, g: &Array4<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g.clone()),
    }
}

impl Module for S3Mamba {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        let s = self.encoder.len();
        for (i, stage) in self.encoder.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            for (j, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("block{j}")), f);
            }
            visit_opt(&stage.merge, &p, "merge", f);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", s + i));
            visit_opt(&stage.expand, &p, "expand", f);
            for (j, b) in stage.blocks.iter().enumerate() {
                b.visit(&join(&p, &format!("block{j}")), f);
            }
            visit_opt(&stage.tcma, &p, "tcma", f);
        }
        self.final_expand.visit(&join(prefix, "final_expand"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        let s = self.encoder.len();
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("block{j}")), f);
            }
            visit_opt_mut(&mut stage.merge, &p, "merge", f);
        }
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", s + i));
            visit_opt_mut(&mut stage.expand, &p, "expand", f);
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(&p, &format!("block{j}")), f);
            }
            visit_opt_mut(&mut stage.tcma, &p, "tcma", f);
        }
        self.final_expand.visit_mut(&join(prefix, "final_expand"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Closed-form count of learnable scalars for a configuration.
pub fn count_params(config: &ModelConfig) -> usize {
    let nc = config.num_classes;
    let c0 = config.embed_dim;
    let p = config.patch_size;
    let n = config.state_size;
    let block = |c: usize| -> usize {
        let r = config.effective_dt_rank(c);
        let norms = 4 * c;
        let direction = c * (r + 2 * n) + r * c + c + c * n + c;
        let ss2d = c * 2 * c + 4 * direction + c * c;
        let encf = if config.encf {
            let hid = c / config.se_reduction;
            c * hid + hid + hid * c + c
        } else {
            0
        };
        norms + ss2d + encf + c * c + c
    };
    let tcma = |c: usize| -> usize {
        let t = &config.tcma;
        let (ci, e, hid) = (t.image_channels, t.edge_channels, t.hidden);
        let convs = 49 * config.in_channels * ci + ci + 9 * ci * ci + ci + 9 * e + e;
        let head = c * nc + nc;
        let mlps: usize = t
            .patch_sizes
            .iter()
            .map(|&d| d * d * (ci + nc + e) * hid + hid + 2 * hid + hid * ci * e + ci * e)
            .sum();
        convs + head + mlps + nc * c
    };
    let s = config.num_stages();
    let mut total = p * p * config.in_channels * c0 + c0 + 2 * c0;
    for i in 0..s {
        let c = config.stage_channels(i);
        total += config.encoder_depths[i] * block(c);
        if i + 1 < s {
            total += 4 * c * 2 * c;
        }
    }
    for i in 0..s {
        let level = config.decoder_level(i);
        let c = config.stage_channels(level);
        if i > 0 {
            let cin = config.stage_channels(level + 1);
            total += cin * 2 * cin;
        }
        total += config.decoder_depths[i] * block(c);
        if config.tcma_at(i) {
            total += tcma(c);
        }
    }
    total += c0 * p * p * c0 + 2 * c0;
    total += c0 * nc + nc;
    total
}

/// Split a batched tensor into per-sample (H, W, C) maps.
pub fn unbatch(x: &Array4<f64>) -> Vec<ndarray::Array3<f64>> {
    x.axis_iter(Axis(0)).map(|v| v.to_owned()).collect()
}
