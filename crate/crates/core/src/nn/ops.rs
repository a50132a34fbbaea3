//! Parameter-free tensor rearrangements and their adjoints (NHWC layout).

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4};

/// View a (B, H, W, C) map as (B·H·W, C) rows.
pub fn rows(x: &Array4<f64>) -> ArrayView2<'_, f64> {
    let c = x.shape()[3];
    x.view()
        .into_shape_with_order((x.len() / c.max(1), c))
        .expect("standard layout feature map")
}

/// Inverse of [`rows`].
pub fn unrows(x: Array2<f64>, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = x.ncols();
    let x = if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().into_owned()
    };
    x.into_shape_with_order((b, h, w, c))
        .expect("row count matches b·h·w")
}

/// Depth-to-space: (B, H, W, f²·C) → (B, f·H, f·W, C).
///
/// Channel group `g = i·f + j` lands at sub-pixel (i, j) of each f×f cell.
pub fn pixel_shuffle(x: ArrayView4<'_, f64>, f: usize) -> Array4<f64> {
    let (b, h, w, cf) = x.dim();
    assert_eq!(cf % (f * f), 0, "channels not divisible by factor²");
    let c = cf / (f * f);
    let mut out = Array4::zeros((b, h * f, w * f, c));
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for i in 0..f {
                    for j in 0..f {
                        let g = i * f + j;
                        out.slice_mut(s![bi, y * f + i, xx * f + j, ..])
                            .assign(&x.slice(s![bi, y, xx, g * c..(g + 1) * c]));
                    }
                }
            }
        }
    }
    out
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
///
/// For f = 2 the channel groups are the 2×2 neighbours in order TL, TR, BL, BR.
pub fn pixel_unshuffle(x: ArrayView4<'_, f64>, f: usize) -> Array4<f64> {
    let (b, hf, wf, c) = x.dim();
    assert!(hf % f == 0 && wf % f == 0, "spatial dims not divisible by factor");
    let (h, w) = (hf / f, wf / f);
    let mut out = Array4::zeros((b, h, w, c * f * f));
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for i in 0..f {
                    for j in 0..f {
                        let g = i * f + j;
                        out.slice_mut(s![bi, y, xx, g * c..(g + 1) * c])
                            .assign(&x.slice(s![bi, y * f + i, xx * f + j, ..]));
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping f×f average pooling.
pub fn avg_pool(x: ArrayView4<'_, f64>, f: usize) -> Array4<f64> {
    if f == 1 {
        return x.to_owned();
    }
    let (b, hf, wf, c) = x.dim();
    assert!(hf % f == 0 && wf % f == 0, "spatial dims not divisible by pool factor");
    let (h, w) = (hf / f, wf / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = Array4::zeros((b, h, w, c));
    for bi in 0..b {
        for y in 0..hf {
            for xx in 0..wf {
                let mut dst = out.slice_mut(s![bi, y / f, xx / f, ..]);
                dst.scaled_add(inv, &x.slice(s![bi, y, xx, ..]));
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]: spread each gradient uniformly over its cell.
pub fn avg_pool_backward(dy: ArrayView4<'_, f64>, f: usize) -> Array4<f64> {
    let mut dx = upsample_nearest(dy, f);
    if f > 1 {
        dx /= (f * f) as f64;
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: ArrayView4<'_, f64>, f: usize) -> Array4<f64> {
    if f == 1 {
        return x.to_owned();
    }
    let (b, h, w, c) = x.dim();
    let mut out = Array4::zeros((b, h * f, w * f, c));
    for bi in 0..b {
        for y in 0..h * f {
            for xx in 0..w * f {
                out.slice_mut(s![bi, y, xx, ..])
                    .assign(&x.slice(s![bi, y / f, xx / f, ..]));
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sum over each f×f cell.
pub fn upsample_nearest_backward(dy: ArrayView4<'_, f64>, f: usize) -> Array4<f64> {
    let mut dx = avg_pool(dy, f);
    if f > 1 {
        dx *= (f * f) as f64;
    }
    dx
}

/// Sobel gradient magnitude of a single-channel image with replicated borders.
pub fn sobel_magnitude(img: ArrayView2<'_, f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        img[[yy, xx]]
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let (mut gx, mut gy) = (0.0, 0.0);
        for (k, wgt) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
            // differences first so constant regions cancel exactly
            gx += wgt * (at(y + k, x + 1) - at(y + k, x - 1));
            gy += wgt * (at(y + 1, x + k) - at(y - 1, x + k));
        }
        (gx * gx + gy * gy).sqrt()
    })
}
