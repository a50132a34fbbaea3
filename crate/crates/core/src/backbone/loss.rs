//! Per-sample segmentation loss: `0.5·CE + 0.5·(1 − soft Dice)`.
//!
//! Cross-entropy is averaged over pixels. Soft Dice is averaged over the
//! foreground classes 1..N_c with additive smoothing of 1.

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1.0;

/// Row-wise softmax over the class axis.
pub fn softmax(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let mut p = logits.to_owned();
    for mut px in p.lanes_mut(Axis(2)) {
        let m = px.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        px.mapv_inplace(|v| (v - m).exp());
        let s = px.sum();
        px /= s;
    }
    p
}

/// Loss value and its gradient with respect to the logits.
pub fn sample_loss(logits: ArrayView3<'_, f64>, gt: ArrayView2<'_, u8>) -> Result<(f64, Array3<f64>)> {
    let (h, w, nc) = logits.dim();
    if gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "logits {h}×{w} vs mask {:?}",
            gt.dim()
        )));
    }
    if nc < 2 {
        return Err(Error::Shape("loss needs at least two classes".into()));
    }
    let npix = (h * w) as f64;
    let p = softmax(logits);

    let mut ce = 0.0;
    let mut inter = vec![0.0; nc];
    let mut psum = vec![0.0; nc];
    let mut gsum = vec![0.0; nc];
    for ((y, x), &label) in gt.indexed_iter() {
        let label = label as usize;
        if label >= nc {
            return Err(Error::Shape(format!("label {label} ≥ class count {nc}")));
        }
        ce -= p[[y, x, label]].max(f64::MIN_POSITIVE).ln();
        for k in 0..nc {
            psum[k] += p[[y, x, k]];
        }
        inter[label] += p[[y, x, label]];
        gsum[label] += 1.0;
    }
    ce /= npix;

    let fg = (nc - 1) as f64;
    let mut dice_mean = 0.0;
    for k in 1..nc {
        dice_mean += (2.0 * inter[k] + DICE_SMOOTH) / (psum[k] + gsum[k] + DICE_SMOOTH);
    }
    dice_mean /= fg;
    let loss = 0.5 * ce + 0.5 * (1.0 - dice_mean);

    // ∂loss/∂p, then through the softmax Jacobian.
    let mut dp = Array3::<f64>::zeros((h, w, nc));
    for ((y, x), &label) in gt.indexed_iter() {
        let label = label as usize;
        dp[[y, x, label]] -= 0.5 / (npix * p[[y, x, label]].max(f64::MIN_POSITIVE));
        for k in 1..nc {
            let denom = psum[k] + gsum[k] + DICE_SMOOTH;
            let num = 2.0 * inter[k] + DICE_SMOOTH;
            let g = if label == k { 1.0 } else { 0.0 };
            let ddice = (2.0 * g) / denom - num / (denom * denom);
            dp[[y, x, k]] -= 0.5 / fg * ddice;
        }
    }
    let mut dz = Array3::zeros((h, w, nc));
    for ((mut out, pp), dd) in dz
        .lanes_mut(Axis(2))
        .into_iter()
        .zip(p.lanes(Axis(2)))
        .zip(dp.lanes(Axis(2)))
    {
        let dot = pp.dot(&dd);
        for k in 0..nc {
            out[k] = pp[k] * (dd[k] - dot);
        }
    }
    Ok((loss, dz))
}

/// `1 − mean foreground soft Dice` for given class probabilities (H, W, N_c).
pub fn soft_dice_term(probs: ArrayView3<'_, f64>, gt: ArrayView2<'_, u8>) -> f64 {
    let nc = probs.dim().2;
    let mut total = 0.0;
    for k in 1..nc {
        let (mut inter, mut sum) = (0.0, 0.0);
        for ((y, x), &l) in gt.indexed_iter() {
            let g = if l as usize == k { 1.0 } else { 0.0 };
            inter += probs[[y, x, k]] * g;
            sum += probs[[y, x, k]] + g;
        }
        total += (2.0 * inter + DICE_SMOOTH) / (sum + DICE_SMOOTH);
    }
    1.0 - total / (nc - 1) as f64
}

/// Cross-entropy term alone, for diagnostics.
pub fn cross_entropy(logits: ArrayView3<'_, f64>, gt: ArrayView2<'_, u8>) -> f64 {
    let p = softmax(logits);
    let n = gt.len() as f64;
    gt.indexed_iter()
        .map(|((y, x), &l)| -p[[y, x, l as usize]].ln())
        .sum::<f64>()
        / n
}

/// Argmax decoding with ties resolved to the lower class index.
pub fn argmax_mask(logits: ArrayView3<'_, f64>) -> ndarray::Array2<u8> {
    let (h, w, _) = logits.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let px = logits.slice(ndarray::s![y, x, ..]);
        let mut best = 0;
        for k in 1..px.len() {
            if px[k] > px[best] {
                best = k;
            }
        }
        best as u8
    })
}
