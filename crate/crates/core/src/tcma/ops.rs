//! Pure tensor operations behind the cross-feature attention.
//!
//! Patch tensors have shape (B, P, d², ch): `P` non-overlapping d×d tiles in
//! row-major tile order, pixels row-major within each tile.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};

use crate::backbone::ModulationMode;
use crate::error::{Error, Result};
use crate::nn::ops::{avg_pool, avg_pool_backward, upsample_nearest, upsample_nearest_backward};

fn check_tiles(h: usize, w: usize, d: usize) -> Result<()> {
    if d == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
        return Err(Error::Shape(format!("patch side {d} does not tile {h}×{w}")));
    }
    Ok(())
}

/// (B, H, W, ch) → (B, H·W/d², d², ch).
pub fn partition(x: ArrayView4<'_, f64>, d: usize) -> Result<Array4<f64>> {
    let (b, h, w, ch) = x.dim();
    check_tiles(h, w, d)?;
    let (th, tw) = (h / d, w / d);
    let mut out = Array4::zeros((b, th * tw, d * d, ch));
    for bi in 0..b {
        for ty in 0..th {
            for tx in 0..tw {
                let p = ty * tw + tx;
                for i in 0..d {
                    for j in 0..d {
                        out.slice_mut(s![bi, p, i * d + j, ..])
                            .assign(&x.slice(s![bi, ty * d + i, tx * d + j, ..]));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`partition`].
pub fn inverse_partition(p: ArrayView4<'_, f64>, h: usize, w: usize) -> Result<Array4<f64>> {
    let (b, np, dd, ch) = p.dim();
    let d = (dd as f64).sqrt().round() as usize;
    if d * d != dd {
        return Err(Error::Shape(format!("{dd} pixels per patch is not a square")));
    }
    check_tiles(h, w, d)?;
    let tw = w / d;
    if np != (h / d) * tw {
        return Err(Error::Shape(format!("{np} patches cannot tile {h}×{w} with side {d}")));
    }
    let mut out = Array4::zeros((b, h, w, ch));
    for bi in 0..b {
        for pi in 0..np {
            let (ty, tx) = (pi / tw, pi % tw);
            for i in 0..d {
                for j in 0..d {
                    out.slice_mut(s![bi, ty * d + i, tx * d + j, ..])
                        .assign(&p.slice(s![bi, pi, i * d + j, ..]));
                }
            }
        }
    }
    Ok(out)
}

/// `A_B[b,p,c,e] = Σ_j P_O[b,p,j,c] · P_I[b,p,j] · P_E[b,p,j,e]`.
pub fn base_tensor(
    po: ArrayView4<'_, f64>,
    pi: ArrayView3<'_, f64>,
    pe: ArrayView4<'_, f64>,
) -> Result<Array4<f64>> {
    let (b, np, j, c) = po.dim();
    let e = pe.dim().3;
    if pi.dim() != (b, np, j) || pe.dim().0 != b || pe.dim().1 != np || pe.dim().2 != j {
        return Err(Error::Shape(format!(
            "base tensor factors disagree: {:?} / {:?} / {:?}",
            po.dim(),
            pi.dim(),
            pe.dim()
        )));
    }
    let mut out = Array4::zeros((b, np, c, e));
    for bi in 0..b {
        for p in 0..np {
            // (C × J) · diag(P_I) · (J × E)
            let o = po.slice(s![bi, p, .., ..]);
            let weighted = &pe.slice(s![bi, p, .., ..]) * &pi.slice(s![bi, p, ..]).insert_axis(Axis(1));
            out.slice_mut(s![bi, p, .., ..]).assign(&o.t().dot(&weighted));
        }
    }
    Ok(out)
}

/// Gradients of [`base_tensor`] with respect to its three factors.
pub fn base_tensor_backward(
    po: ArrayView4<'_, f64>,
    pi: ArrayView3<'_, f64>,
    pe: ArrayView4<'_, f64>,
    dab: ArrayView4<'_, f64>,
) -> (Array4<f64>, Array3<f64>, Array4<f64>) {
    let (b, np, _, _) = po.dim();
    let mut dpo = Array4::zeros(po.raw_dim());
    let mut dpi = Array3::zeros(pi.raw_dim());
    let mut dpe = Array4::zeros(pe.raw_dim());
    for bi in 0..b {
        for p in 0..np {
            let o = po.slice(s![bi, p, .., ..]);
            let ed = pe.slice(s![bi, p, .., ..]);
            let wgt = pi.slice(s![bi, p, ..]);
            let g = dab.slice(s![bi, p, .., ..]);
            // t[j,e] = Σ_c O[j,c]·G[c,e]
            let t = o.dot(&g);
            // u[j,c] = Σ_e G[c,e]·E[j,e]
            let u = ed.dot(&g.t());
            let col = wgt.insert_axis(Axis(1));
            dpo.slice_mut(s![bi, p, .., ..]).assign(&(&u * &col));
            dpe.slice_mut(s![bi, p, .., ..]).assign(&(&t * &col));
            dpi.slice_mut(s![bi, p, ..])
                .assign(&(&t * &ed).sum_axis(Axis(1)));
        }
    }
    (dpo, dpi, dpe)
}

/// `A[b,p] = Σ_{c,e} A_B[b,p,c,e] · W_D[b,p,c,e]`.
pub fn weighted_aggregate(ab: ArrayView4<'_, f64>, wd: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
    if ab.dim() != wd.dim() {
        return Err(Error::Shape(format!(
            "base tensor {:?} vs dynamic weights {:?}",
            ab.dim(),
            wd.dim()
        )));
    }
    let (b, np, _, _) = ab.dim();
    Ok(Array2::from_shape_fn((b, np), |(bi, p)| {
        ab.slice(s![bi, p, .., ..])
            .iter()
            .zip(wd.slice(s![bi, p, .., ..]).iter())
            .map(|(x, y)| x * y)
            .sum()
    }))
}

/// Repeat each patch scalar over its d×d tile: (B, P) → (B, H, W).
pub fn broadcast_patches(map: ArrayView2<'_, f64>, d: usize, h: usize, w: usize) -> Result<Array3<f64>> {
    check_tiles(h, w, d)?;
    let tw = w / d;
    if map.ncols() != (h / d) * tw {
        return Err(Error::Shape(format!("{} patches do not tile {h}×{w}", map.ncols())));
    }
    Ok(Array3::from_shape_fn((map.nrows(), h, w), |(b, y, x)| {
        map[[b, (y / d) * tw + x / d]]
    }))
}

/// Adjoint of [`broadcast_patches`]: sum each tile.
pub fn tile_sums(x: ArrayView3<'_, f64>, d: usize) -> Array2<f64> {
    let (b, h, w) = x.dim();
    let tw = w / d;
    let mut out = Array2::zeros((b, (h / d) * tw));
    for ((bi, y, xx), v) in x.indexed_iter() {
        out[[bi, (y / d) * tw + xx / d]] += v;
    }
    out
}

/// Sum of per-scale patch maps broadcast back to the pixel grid.
pub fn fuse_scales(maps: &[(usize, Array2<f64>)], h: usize, w: usize) -> Result<Array3<f64>> {
    let b = maps.first().map_or(0, |(_, m)| m.nrows());
    let mut out = Array3::zeros((b, h, w));
    for (d, m) in maps {
        out += &broadcast_patches(m.view(), *d, h, w)?;
    }
    Ok(out)
}

/// Modulate a decoder mask (B, H, W, N_c) with attention maps (B, Hᵢ, Wᵢ, N_c).
///
/// The mask is average-pooled to Hᵢ×Wᵢ, multiplied channel-wise by `A`
/// (strict) or `1 + A` (residual), then upsampled back by nearest neighbour.
pub fn modulate(
    mask: ArrayView4<'_, f64>,
    attention: ArrayView4<'_, f64>,
    mode: ModulationMode,
) -> Result<Array4<f64>> {
    let f = pool_factor(mask, attention)?;
    let pooled = avg_pool(mask, f);
    let gain = attention_gain(attention, mode);
    Ok(upsample_nearest((&pooled * &gain).view(), f))
}

/// Gradients of [`modulate`] with respect to (mask, attention).
pub fn modulate_backward(
    mask: ArrayView4<'_, f64>,
    attention: ArrayView4<'_, f64>,
    mode: ModulationMode,
    dy: ArrayView4<'_, f64>,
) -> Result<(Array4<f64>, Array4<f64>)> {
    let f = pool_factor(mask, attention)?;
    let pooled = avg_pool(mask, f);
    let dprod = upsample_nearest_backward(dy, f);
    let gain = attention_gain(attention, mode);
    let dmask = avg_pool_backward((&dprod * &gain).view(), f);
    Ok((dmask, &dprod * &pooled))
}

fn attention_gain(attention: ArrayView4<'_, f64>, mode: ModulationMode) -> Array4<f64> {
    match mode {
        ModulationMode::Strict => attention.to_owned(),
        ModulationMode::Residual => attention.mapv(|a| 1.0 + a),
    }
}

fn pool_factor(mask: ArrayView4<'_, f64>, attention: ArrayView4<'_, f64>) -> Result<usize> {
    let (b, h, w, c) = mask.dim();
    let (ab, ah, aw, ac) = attention.dim();
    if b != ab || c != ac || ah == 0 || h % ah != 0 || w % aw != 0 || h / ah != w / aw {
        return Err(Error::Shape(format!(
            "mask {:?} cannot be pooled onto attention {:?}",
            mask.dim(),
            attention.dim()
        )));
    }
    Ok(h / ah)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    #[test]
    fn partition_enumerates_tiles_row_major() {
        let x = Array::from_iter((0..16).map(|v| v as f64))
            .into_shape_with_order((1, 4, 4, 1))
            .unwrap();
        let p = partition(x.view(), 2).unwrap();
        assert_eq!(p.dim(), (1, 4, 4, 1));
        assert_eq!(p.slice(s![0, 0, .., 0]).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.slice(s![0, 1, .., 0]).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        let whole = partition(x.view(), 4).unwrap();
        assert_eq!(whole.dim(), (1, 1, 16, 1));
        assert_eq!(whole.slice(s![0, 0, .., 0]).to_vec(), (0..16).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn partition_rejects_indivisible_side() {
        assert!(partition(Array4::<f64>::zeros((1, 6, 6, 1)).view(), 4).is_err());
    }

    #[test]
    fn base_tensor_hand_fixture() {
        let po = array![1.0, 2.0].into_shape_with_order((1, 1, 2, 1)).unwrap();
        let pi = array![1.0, 1.0].into_shape_with_order((1, 1, 2)).unwrap();
        let pe = array![1.0, 3.0].into_shape_with_order((1, 1, 2, 1)).unwrap();
        let ab = base_tensor(po.view(), pi.view(), pe.view()).unwrap();
        assert_eq!(ab[[0, 0, 0, 0]], 7.0);
    }

    #[test]
    fn aggregate_hand_fixture() {
        let ab = array![[1.0, 2.0], [3.0, 4.0]].into_shape_with_order((1, 1, 2, 2)).unwrap();
        let wd = Array4::from_elem((1, 1, 2, 2), 0.5);
        assert_eq!(weighted_aggregate(ab.view(), wd.view()).unwrap()[[0, 0]], 5.0);
        let ones = Array4::from_elem((1, 1, 2, 2), 1.0);
        assert_eq!(weighted_aggregate(ab.view(), ones.view()).unwrap()[[0, 0]], 10.0);
        let zeros = Array4::zeros((1, 1, 2, 2));
        assert_eq!(weighted_aggregate(ab.view(), zeros.view()).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn fuse_two_scales_by_hand() {
        // 4×4 grid: scale 2 has four patches, scale 4 one.
        let s2 = array![[1.0, 2.0, 3.0, 4.0]];
        let s4 = array![[10.0]];
        let fused = fuse_scales(&[(2, s2), (4, s4)], 4, 4).unwrap();
        let expect = array![
            [11.0, 11.0, 12.0, 12.0],
            [11.0, 11.0, 12.0, 12.0],
            [13.0, 13.0, 14.0, 14.0],
            [13.0, 13.0, 14.0, 14.0]
        ];
        assert_eq!(fused.index_axis(Axis(0), 0), expect);
    }

    #[test]
    fn strict_modulation_hand_product() {
        let m = array![[3.0, 5.0], [7.0, 11.0]].into_shape_with_order((1, 2, 2, 1)).unwrap();
        let a = array![[2.0, 0.0], [1.0, 1.0]].into_shape_with_order((1, 2, 2, 1)).unwrap();
        let out = modulate(m.view(), a.view(), ModulationMode::Strict).unwrap();
        assert_eq!(out.into_raw_vec_and_offset().0, vec![6.0, 0.0, 7.0, 11.0]);
    }

    #[test]
    fn modulation_pools_then_upsamples() {
        let m = Array::from_iter((0..16).map(|v| v as f64))
            .into_shape_with_order((1, 4, 4, 1))
            .unwrap();
        let a = Array4::from_elem((1, 2, 2, 1), 1.0);
        let out = modulate(m.view(), a.view(), ModulationMode::Strict).unwrap();
        // top-left cell mean of {0,1,4,5}
        assert_eq!(out[[0, 1, 1, 0]], 2.5);
        assert_eq!(out[[0, 0, 0, 0]], 2.5);
    }
}
