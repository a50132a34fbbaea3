//! Four-directional 2-D selective scan.

use ndarray::{s, Array2, Array4, ArrayView4, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::scan::{selective_scan_1d, selective_scan_1d_backward, ScanCache, ScanParams};
use crate::error::{Error, Result};
use crate::nn::{join, ops, silu, silu_grad, Linear, Module, Slot};

/// Scan orders over an H×W grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    /// Row-major, left to right.
    RowForward,
    /// Row-major, right to left (reverse of `RowForward`).
    RowBackward,
    /// Column-major, top to bottom.
    ColForward,
    /// Column-major, bottom to top.
    ColBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColForward,
        ScanDirection::ColBackward,
    ];

    /// Row-major pixel indices in scan order.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row: Vec<usize> = (0..h * w).collect();
        let col: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
        match self {
            ScanDirection::RowForward => row,
            ScanDirection::RowBackward => row.into_iter().rev().collect(),
            ScanDirection::ColForward => col,
            ScanDirection::ColBackward => col.into_iter().rev().collect(),
        }
    }
}

/// In-projection to (scan input, gate), four direction-specific scans,
/// summation, SiLU gating and out-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Ss2d {
    /// (C, 2·D): first D columns feed the scans, last D the gate.
    pub in_proj: Linear,
    pub directions: Vec<ScanParams>,
    /// (D, C)
    pub out_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct Ss2dCache {
    x_rows: Array2<f64>,
    xs: Array4<f64>,
    z: Array2<f64>,
    summed: Array2<f64>,
    gated: Array2<f64>,
    scans: Vec<Vec<ScanCache>>,
}

impl Ss2d {
    pub fn new<R: Rng + ?Sized>(channels: usize, state: usize, rank: usize, rng: &mut R) -> Self {
        let inner = channels;
        Self {
            in_proj: Linear::new(channels, 2 * inner, false, 1.0, rng),
            directions: (0..4).map(|_| ScanParams::new(inner, state, rank, rng)).collect(),
            out_proj: Linear::new(inner, channels, false, 1.0, rng),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.out_proj.input_dim()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Ss2dCache)> {
        let (b, h, w, c) = x.dim();
        if c != self.in_proj.input_dim() {
            return Err(Error::Shape(format!(
                "ss2d expects {} channels, got {c}",
                self.in_proj.input_dim()
            )));
        }
        let d = self.inner_dim();
        let x_rows = ops::rows(x).to_owned();
        let xz = self.in_proj.forward(x_rows.view());
        let xs = ops::unrows(xz.slice(s![.., ..d]).to_owned(), b, h, w);
        let z = xz.slice(s![.., d..]).to_owned();
        let (core, scans) = scan_sum(xs.view(), &self.directions)?;
        let summed = ops::rows(&core).to_owned();
        let gated = &summed * &z.mapv(silu);
        let out = self.out_proj.forward(gated.view());
        Ok((
            ops::unrows(out, b, h, w),
            Ss2dCache {
                x_rows,
                xs,
                z,
                summed,
                gated,
                scans,
            },
        ))
    }

    pub fn backward(&self, cache: &Ss2dCache, dy: &Array4<f64>, g: &mut Ss2d) -> Array4<f64> {
        let (b, h, w, _) = dy.dim();
        let d = self.inner_dim();
        let dgated = self.out_proj.backward(cache.gated.view(), ops::rows(dy), &mut g.out_proj);
        let dsummed = &dgated * &cache.z.mapv(silu);
        let dz = &dgated * &cache.summed * &cache.z.mapv(silu_grad);
        let dcore = ops::unrows(dsummed, b, h, w);
        let dxs = scan_sum_backward(cache.xs.view(), &dcore, &cache.scans, &self.directions, &mut g.directions);
        let mut dxz = Array2::zeros((b * h * w, 2 * d));
        dxz.slice_mut(s![.., ..d]).assign(&ops::rows(&dxs));
        dxz.slice_mut(s![.., d..]).assign(&dz);
        let dx = self.in_proj.backward(cache.x_rows.view(), dxz.view(), &mut g.in_proj);
        ops::unrows(dx, b, h, w)
    }
}

/// Sum of the four directional scans, each re-aligned to the spatial layout.
pub fn scan_sum(
    xs: ArrayView4<'_, f64>,
    dirs: &[ScanParams],
) -> Result<(Array4<f64>, Vec<Vec<ScanCache>>)> {
    let (b, h, w, d) = xs.dim();
    let mut out = Array4::zeros((b, h, w, d));
    let mut caches = Vec::with_capacity(b);
    let orders: Vec<Vec<usize>> = ScanDirection::ALL.iter().map(|dir| dir.order(h, w)).collect();
    for bi in 0..b {
        let flat = xs
            .slice(s![bi, .., .., ..])
            .to_owned()
            .into_shape_with_order((h * w, d))
            .expect("row-major sample");
        let mut acc = Array2::<f64>::zeros((h * w, d));
        let mut per_dir = Vec::with_capacity(4);
        for (order, params) in orders.iter().zip(dirs) {
            let seq = flat.select(ndarray::Axis(0), order);
            let (y, cache) = selective_scan_1d(seq.view(), params)?;
            for (t, &pix) in order.iter().enumerate() {
                let mut dst = acc.row_mut(pix);
                dst += &y.row(t);
            }
            per_dir.push(cache);
        }
        out.slice_mut(s![bi, .., .., ..])
            .assign(&acc.into_shape_with_order((h, w, d)).expect("row-major"));
        caches.push(per_dir);
    }
    Ok((out, caches))
}

pub fn scan_sum_backward(
    xs: ArrayView4<'_, f64>,
    dy: &Array4<f64>,
    caches: &[Vec<ScanCache>],
    dirs: &[ScanParams],
    grads: &mut [ScanParams],
) -> Array4<f64> {
    let (b, h, w, d) = xs.dim();
    let orders: Vec<Vec<usize>> = ScanDirection::ALL.iter().map(|dir| dir.order(h, w)).collect();
    let mut dx = Array4::zeros((b, h, w, d));
    for bi in 0..b {
        let dflat = dy
            .slice(s![bi, .., .., ..])
            .to_owned()
            .into_shape_with_order((h * w, d))
            .expect("row-major sample");
        let mut acc = Array2::<f64>::zeros((h * w, d));
        for (k, order) in orders.iter().enumerate() {
            let dseq = dflat.select(ndarray::Axis(0), order);
            let du = selective_scan_1d_backward(&caches[bi][k], dseq.view(), &dirs[k], &mut grads[k]);
            for (t, &pix) in order.iter().enumerate() {
                let mut dst = acc.row_mut(pix);
                dst += &du.row(t);
            }
        }
        dx.slice_mut(s![bi, .., .., ..])
            .assign(&acc.into_shape_with_order((h, w, d)).expect("row-major"));
    }
    dx
}

impl Module for Ss2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        for (k, d) in self.directions.iter().enumerate() {
            d.visit(&join(prefix, &format!("dir{k}")), f);
        }
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        for (k, d) in self.directions.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dir{k}")), f);
        }
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_dirs(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<ScanParams> {
        (0..4)
            .map(|_| {
                let mut p = ScanParams::new(d, n, 1, rng);
                p.x_proj.slice_mut(s![.., 1 + n..]).fill(0.0);
                p
            })
            .collect()
    }

    #[test]
    fn orders_are_permutations() {
        for dir in ScanDirection::ALL {
            let mut o = dir.order(3, 4);
            o.sort_unstable();
            assert_eq!(o, (0..12).collect::<Vec<_>>());
        }
        assert_eq!(ScanDirection::ColForward.order(2, 3), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn identity_configuration_sums_to_four_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs = identity_dirs(3, 2, &mut rng);
        let x = randn((2, 3, 4, 3), 1.0, &mut rng);
        let (y, _) = scan_sum(x.view(), &dirs).unwrap();
        assert!((&y - &(&x * 4.0)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_projections_give_gated_four_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 2;
        let mut ss = Ss2d::new(c, 2, 1, &mut rng);
        ss.directions = identity_dirs(c, 2, &mut rng);
        ss.in_proj.w.fill(0.0);
        for i in 0..c {
            ss.in_proj.w[[i, i]] = 1.0;
            ss.in_proj.w[[i, c + i]] = 1.0;
        }
        ss.out_proj.w = Array2::eye(c);
        let x = randn((1, 2, 2, c), 1.0, &mut rng);
        let (y, _) = ss.forward(&x).unwrap();
        let expect = x.mapv(|v| 4.0 * v * silu(v));
        assert!((&y - &expect).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_pixel_directions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ScanParams::new(3, 2, 1, &mut rng);
        let dirs = vec![p.clone(), p.clone(), p.clone(), p];
        let x = randn((1, 1, 1, 3), 1.0, &mut rng);
        let (y, _) = scan_sum(x.view(), &dirs).unwrap();
        let (single, _) = selective_scan_1d(x.view().into_shape_with_order((1, 3)).unwrap(), &dirs[0]).unwrap();
        for k in 0..3 {
            assert!((y[[0, 0, 0, k]] - 4.0 * single[[0, k]]).abs() < 1e-12);
        }
    }
}
