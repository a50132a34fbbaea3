use std::path::Path;

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::ops::{
    base_tensor, base_tensor_backward, broadcast_patches, inverse_partition, modulate, modulate_backward,
    partition, tile_sums, weighted_aggregate,
};
use crate::backbone::{ModulationMode, TcmaConfig};
use crate::error::{io_err, Error, Result};
use crate::nn::{
    join, ops, sigmoid, BatchNorm, BatchNormCache, Conv2d, Linear, Mode, Module, Slot,
};

/// Two-layer MLP with batch normalization, ReLU and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMlp {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ScaleMlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    bn: Option<BatchNormCache>,
    hidden: Array2<f64>,
    out: Array2<f64>,
}

impl ScaleMlp {
    /// The output layer starts at zero, so initial weights are exactly 0.5.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input, hidden, true, 2f64.sqrt(), rng),
            bn: BatchNorm::new(hidden),
            fc2: Linear::zeros(hidden, output, true),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> (Array2<f64>, ScaleMlpCache) {
        let pre = self.fc1.forward(x);
        let (normed, bn) = match mode {
            Mode::Train => {
                let (y, c) = self.bn.forward_train(pre.view());
                (y, Some(c))
            }
            Mode::Eval => (self.bn.forward_eval(pre.view()), None),
        };
        let hidden = normed.mapv(|v| v.max(0.0));
        let out = self.fc2.forward(hidden.view()).mapv(sigmoid);
        let cache = ScaleMlpCache {
            x: x.to_owned(),
            pre: normed,
            bn,
            hidden,
            out: out.clone(),
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &ScaleMlpCache, dy: ArrayView2<'_, f64>, g: &mut ScaleMlp) -> Array2<f64> {
        let dlogit = &dy * &cache.out.mapv(|s| s * (1.0 - s));
        let mut dh = self.fc2.backward(cache.hidden.view(), dlogit.view(), &mut g.fc2);
        dh.zip_mut_with(&cache.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let dpre = match &cache.bn {
            Some(c) => self.bn.backward(c, dh.view(), &mut g.bn),
            // evaluation-mode normalization is affine in its input
            None => {
                let rstd = self.bn.running_var.mapv(|v| 1.0 / (v + 1e-5).sqrt());
                &dh * &(&rstd * &self.bn.gamma)
            }
        };
        self.fc1.backward(cache.x.view(), dpre.view(), &mut g.fc1)
    }
}

impl Module for ScaleMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Dynamic weights from the concatenated patch tensor A_C (B, P, d², C+N_c+E),
/// flattened per patch; returns W_D reshaped to (B, P, C, E).
pub fn dynamic_weights(
    ac: ArrayView4<'_, f64>,
    mlp: &ScaleMlp,
    image_channels: usize,
    edge_channels: usize,
    mode: Mode,
) -> Result<(Array4<f64>, ScaleMlpCache)> {
    let (b, p, j, ch) = ac.dim();
    if j * ch != mlp.fc1.input_dim() || image_channels * edge_channels != mlp.fc2.output_dim() {
        return Err(Error::Shape(format!(
            "MLP {}→{} cannot map patches of {j}×{ch} to {image_channels}×{edge_channels}",
            mlp.fc1.input_dim(),
            mlp.fc2.output_dim()
        )));
    }
    let flat = ac
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * p, j * ch))
        .expect("standard layout");
    let (wd, cache) = mlp.forward(flat.view(), mode);
    let wd = wd
        .into_shape_with_order((b, p, image_channels, edge_channels))
        .expect("row-major MLP output");
    Ok((wd, cache))
}

/// `R = F · W + b`, per-category prediction features (B, H, W, N_c).
pub fn per_category_projection(feature: &Array4<f64>, head: &Linear) -> Array4<f64> {
    let (b, h, w, _) = feature.dim();
    ops::unrows(head.forward(ops::rows(feature)), b, h, w)
}

/// Spatially aligned pyramid on one decoder grid.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    /// Embedded input image (B, Hᵢ, Wᵢ, C).
    pub image: Array4<f64>,
    /// Embedded Sobel magnitude (B, Hᵢ, Wᵢ, E).
    pub edge: Array4<f64>,
    /// Per-category features (B, Hᵢ, Wᵢ, N_c).
    pub category: Array4<f64>,
}

#[derive(Debug, Clone)]
struct PyramidCache {
    pooled: Array4<f64>,
    image_mid: Array4<f64>,
    sobel: Array4<f64>,
}

/// Average-pool the image to the feature grid, embed it (7×7 then 3×3 conv),
/// embed its Sobel magnitude (3×3 conv) and project the feature map per category.
pub fn build_pyramid(image: &Array4<f64>, feature: &Array4<f64>, unit: &TcmaUnit) -> Result<PyramidFeatures> {
    Ok(unit.pyramid(image, feature)?.0)
}

/// Learnable attention unit attached to one decoder stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TcmaUnit {
    pub patch_sizes: Vec<usize>,
    pub mode: ModulationMode,
    pub image_conv7: Conv2d,
    pub image_conv3: Conv2d,
    pub edge_conv: Conv2d,
    pub category_head: Linear,
    pub mlps: Vec<ScaleMlp>,
    /// (N_c → C): projects the modulated mask back into decoder features.
    pub back_proj: Linear,
}

/// What a unit hands back to the decoder.
#[derive(Debug, Clone)]
pub struct TcmaOutput {
    /// Decoder features after adding the projected modulated mask.
    pub features: Array4<f64>,
    /// The stage's intermediate mask (per-category features).
    pub mask: Array4<f64>,
    /// Fused attention maps Aᵏ (B, Hᵢ, Wᵢ, N_c).
    pub attention: Array4<f64>,
}

#[derive(Debug, Clone)]
struct ScaleCache {
    d: usize,
    po: Array4<f64>,
    pi: Array4<f64>,
    pe: Array4<f64>,
    wd: Array4<f64>,
    base: Vec<Array4<f64>>,
    mlp: ScaleMlpCache,
}

#[derive(Debug, Clone)]
pub struct TcmaCache {
    feature: Array4<f64>,
    pyramid: PyramidFeatures,
    pyramid_cache: PyramidCache,
    scales: Vec<ScaleCache>,
    attention: Array4<f64>,
    modulated: Array4<f64>,
}

impl TcmaCache {
    pub(crate) fn batch_norm_caches(&self) -> impl Iterator<Item = (usize, &BatchNormCache)> {
        self.scales
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.mlp.bn.as_ref().map(|c| (i, c)))
    }
}

impl TcmaUnit {
    pub fn new<R: Rng + ?Sized>(
        cfg: &TcmaConfig,
        in_channels: usize,
        feature_channels: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let (c, e) = (cfg.image_channels, cfg.edge_channels);
        let total = c + num_classes + e;
        Self {
            patch_sizes: cfg.patch_sizes.clone(),
            mode: cfg.mode,
            image_conv7: Conv2d::new(7, in_channels, c, rng),
            image_conv3: Conv2d::new(3, c, c, rng),
            edge_conv: Conv2d::new(3, 1, e, rng),
            category_head: Linear::new(feature_channels, num_classes, true, 0.1, rng),
            mlps: cfg
                .patch_sizes
                .iter()
                .map(|&d| ScaleMlp::new(d * d * total, cfg.hidden, c * e, rng))
                .collect(),
            back_proj: Linear::zeros(num_classes, feature_channels, false),
        }
    }

    pub fn image_channels(&self) -> usize {
        self.image_conv3.output_dim()
    }

    pub fn edge_channels(&self) -> usize {
        self.edge_conv.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.category_head.output_dim()
    }

    fn pyramid(&self, image: &Array4<f64>, feature: &Array4<f64>) -> Result<(PyramidFeatures, PyramidCache)> {
        let (b, h, w, _) = image.dim();
        let (fb, fh, fw, _) = feature.dim();
        if b != fb || fh == 0 || h % fh != 0 || w % fw != 0 || h / fh != w / fw {
            return Err(Error::Shape(format!(
                "image {:?} cannot be pooled onto feature grid {:?}",
                image.dim(),
                feature.dim()
            )));
        }
        let pooled = ops::avg_pool(image.view(), h / fh);
        let image_mid = self.image_conv7.forward(pooled.view());
        let image_feat = self.image_conv3.forward(image_mid.view());
        let mut sobel = Array4::zeros((b, fh, fw, 1));
        for bi in 0..b {
            let gray = pooled
                .index_axis(Axis(0), bi)
                .mean_axis(Axis(2))
                .expect("at least one image channel");
            sobel
                .slice_mut(s![bi, .., .., 0])
                .assign(&ops::sobel_magnitude(gray.view()));
        }
        let edge = self.edge_conv.forward(sobel.view());
        let category = per_category_projection(feature, &self.category_head);
        Ok((
            PyramidFeatures {
                image: image_feat,
                edge,
                category,
            },
            PyramidCache {
                pooled,
                image_mid,
                sobel,
            },
        ))
    }

    pub fn forward(&self, image: &Array4<f64>, feature: &Array4<f64>, mode: Mode) -> Result<(TcmaOutput, TcmaCache)> {
        let (b, h, w, _) = feature.dim();
        let (pyr, pyramid_cache) = self.pyramid(image, feature)?;
        let nc = self.num_classes();
        let (c, e) = (self.image_channels(), self.edge_channels());
        let mut attention = Array4::<f64>::zeros((b, h, w, nc));
        let mut scales = Vec::with_capacity(self.patch_sizes.len());
        for (&d, mlp) in self.patch_sizes.iter().zip(&self.mlps) {
            let po = partition(pyr.image.view(), d)?;
            let pi = partition(pyr.category.view(), d)?;
            let pe = partition(pyr.edge.view(), d)?;
            let ac = concatenate(Axis(3), &[po.view(), pi.view(), pe.view()]).expect("matching patch dims");
            let (wd, mlp_cache) = dynamic_weights(ac.view(), mlp, c, e, mode)?;
            let mut base = Vec::with_capacity(nc);
            for k in 0..nc {
                let ab = base_tensor(po.view(), pi.slice(s![.., .., .., k]), pe.view())?;
                let per_patch = weighted_aggregate(ab.view(), wd.view())?;
                let pixels = broadcast_patches(per_patch.view(), d, h, w)?;
                let mut dst = attention.slice_mut(s![.., .., .., k]);
                dst += &pixels;
                base.push(ab);
            }
            scales.push(ScaleCache {
                d,
                po,
                pi,
                pe,
                wd,
                base,
                mlp: mlp_cache,
            });
        }
        if !attention.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("TCMA attention map".into()));
        }
        let mask = pyr.category.clone();
        let modulated = modulate(mask.view(), attention.view(), self.mode)?;
        let features = feature + &ops::unrows(self.back_proj.forward(ops::rows(&modulated)), b, h, w);
        Ok((
            TcmaOutput {
                features,
                mask,
                attention: attention.clone(),
            },
            TcmaCache {
                feature: feature.clone(),
                pyramid: pyr,
                pyramid_cache,
                scales,
                attention,
                modulated,
            },
        ))
    }

    /// Returns the gradient with respect to the decoder features.
    pub fn backward(&self, cache: &TcmaCache, dy: &Array4<f64>, g: &mut TcmaUnit) -> Result<Array4<f64>> {
        let (b, h, w, _) = dy.dim();
        let nc = self.num_classes();
        let (c, e) = (self.image_channels(), self.edge_channels());
        let dmod = ops::unrows(
            self.back_proj.backward(ops::rows(&cache.modulated), ops::rows(dy), &mut g.back_proj),
            b,
            h,
            w,
        );
        let (mut dcat, dattn) = modulate_backward(
            cache.pyramid.category.view(),
            cache.attention.view(),
            self.mode,
            dmod.view(),
        )?;
        let mut dimage = Array4::<f64>::zeros(cache.pyramid.image.raw_dim());
        let mut dedge = Array4::<f64>::zeros(cache.pyramid.edge.raw_dim());

        for (sc, (mlp, gmlp)) in cache.scales.iter().zip(self.mlps.iter().zip(g.mlps.iter_mut())) {
            let d = sc.d;
            let mut dwd = Array4::<f64>::zeros(sc.wd.raw_dim());
            let mut dpo = Array4::<f64>::zeros(sc.po.raw_dim());
            let mut dpi = Array4::<f64>::zeros(sc.pi.raw_dim());
            let mut dpe = Array4::<f64>::zeros(sc.pe.raw_dim());
            for k in 0..nc {
                let dpatch = tile_sums(dattn.slice(s![.., .., .., k]), d);
                let scale = dpatch.insert_axis(Axis(2)).insert_axis(Axis(3));
                let dab = &sc.wd * &scale;
                dwd += &(&sc.base[k] * &scale);
                let (a, bk, cc) = base_tensor_backward(sc.po.view(), sc.pi.slice(s![.., .., .., k]), sc.pe.view(), dab.view());
                dpo += &a;
                let mut dst = dpi.slice_mut(s![.., .., .., k]);
                dst += &bk;
                dpe += &cc;
            }
            let (pb, pp, pj, _) = sc.po.dim();
            let flat_dwd = dwd
                .into_shape_with_order((pb * pp, c * e))
                .expect("row-major weights");
            let dac = mlp.backward(&sc.mlp, flat_dwd.view(), gmlp);
            let dac = dac
                .into_shape_with_order((pb, pp, pj, c + nc + e))
                .expect("row-major patches");
            dpo += &dac.slice(s![.., .., .., ..c]);
            dpi += &dac.slice(s![.., .., .., c..c + nc]);
            dpe += &dac.slice(s![.., .., .., c + nc..]);
            dimage += &inverse_partition(dpo.view(), h, w)?;
            dcat += &inverse_partition(dpi.view(), h, w)?;
            dedge += &inverse_partition(dpe.view(), h, w)?;
        }

        let dfeat_head = self
            .category_head
            .backward(ops::rows(&cache.feature), ops::rows(&dcat), &mut g.category_head);
        self.edge_conv
            .backward(cache.pyramid_cache.sobel.view(), dedge.view(), &mut g.edge_conv, false);
        let dmid = self
            .image_conv3
            .backward(cache.pyramid_cache.image_mid.view(), dimage.view(), &mut g.image_conv3, true)
            .expect("input gradient requested");
        self.image_conv7
            .backward(cache.pyramid_cache.pooled.view(), dmid.view(), &mut g.image_conv7, false);
        Ok(dy + &ops::unrows(dfeat_head, b, h, w))
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn absorb(&mut self, cache: &TcmaCache) {
        for (i, bn) in cache.batch_norm_caches() {
            self.mlps[i].bn.absorb(bn);
        }
    }
}

impl Module for TcmaUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.image_conv7.visit(&join(prefix, "image_conv7"), f);
        self.image_conv3.visit(&join(prefix, "image_conv3"), f);
        self.edge_conv.visit(&join(prefix, "edge_conv"), f);
        self.category_head.visit(&join(prefix, "category_head"), f);
        for (d, m) in self.patch_sizes.iter().zip(&self.mlps) {
            m.visit(&join(prefix, &format!("mlp_d{d}")), f);
        }
        self.back_proj.visit(&join(prefix, "back_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.image_conv7.visit_mut(&join(prefix, "image_conv7"), f);
        self.image_conv3.visit_mut(&join(prefix, "image_conv3"), f);
        self.edge_conv.visit_mut(&join(prefix, "edge_conv"), f);
        self.category_head.visit_mut(&join(prefix, "category_head"), f);
        for (d, m) in self.patch_sizes.iter().zip(self.mlps.iter_mut()) {
            m.visit_mut(&join(prefix, &format!("mlp_d{d}")), f);
        }
        self.back_proj.visit_mut(&join(prefix, "back_proj"), f);
    }
}

/// Write one attention map as a 32-bit float grayscale TIFF.
pub fn write_attention_tiff(path: &Path, map: ArrayView2<'_, f64>) -> Result<()> {
    use tiff::encoder::{colortype::Gray32Float, TiffEncoder};
    let (h, w) = map.dim();
    let data: Vec<f32> = map.iter().map(|&v| v as f32).collect();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut enc = TiffEncoder::new(std::io::BufWriter::new(file)).map_err(|e| Error::Tiff(e.to_string()))?;
    enc.write_image::<Gray32Float>(w as u32, h as u32, &data)
        .map_err(|e| Error::Tiff(e.to_string()))?;
    Ok(())
}
