use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, randn, Module, Slot};

/// Square-kernel 2-D convolution, stride 1, zero "same" padding, NHWC layout.
///
/// The kernel is stored as (k, k, in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(k: usize, input: usize, output: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel side must be odd");
        let fan_in = (k * k * input) as f64;
        Self {
            w: randn((k, k, input, output), 1.0 / fan_in.sqrt(), rng),
            b: Array1::zeros(output),
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[3]
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, f64> {
        let k = self.kernel();
        self.w
            .view()
            .into_shape_with_order((k * k * self.input_dim(), self.output_dim()))
            .expect("contiguous kernel")
    }

    /// Patch matrix with one row per output pixel, columns ordered (ky, kx, c).
    fn im2col(&self, x: ArrayView3<'_, f64>) -> Array2<f64> {
        let (h, w, c) = x.dim();
        let k = self.kernel();
        let r = (k / 2) as isize;
        let mut cols = Array2::zeros((h * w, k * k * c));
        for y in 0..h {
            for xx in 0..w {
                let mut row = cols.row_mut(y * w + xx);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * c;
                        row.slice_mut(s![base..base + c])
                            .assign(&x.slice(s![sy as usize, sx as usize, ..]));
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
        let c = self.input_dim();
        let k = self.kernel();
        let r = (k / 2) as isize;
        let mut dx = Array3::zeros((h, w, c));
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row(y * w + xx);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (ky * k + kx) * c;
                        let mut dst = dx.slice_mut(s![sy as usize, sx as usize, ..]);
                        dst += &row.slice(s![base..base + c]);
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Array4<f64> {
        let (b, h, w, _) = x.dim();
        let mut out = Array4::zeros((b, h, w, self.output_dim()));
        for (xi, mut oi) in x.outer_iter().zip(out.outer_iter_mut()) {
            let y = self.im2col(xi).dot(&self.w2()) + &self.b;
            oi.assign(
                &y.into_shape_with_order((h, w, self.output_dim()))
                    .expect("row-major conv output"),
            );
        }
        out
    }

    /// Accumulates kernel gradients; returns `dx` when `need_input_grad`.
    pub fn backward(
        &self,
        x: ArrayView4<'_, f64>,
        dy: ArrayView4<'_, f64>,
        g: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (b, h, w, cin) = x.dim();
        let k = self.kernel();
        let cout = self.output_dim();
        let mut dx = need_input_grad.then(|| Array4::zeros((b, h, w, cin)));
        for i in 0..b {
            let cols = self.im2col(x.index_axis(Axis(0), i));
            let dyi = dy
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((h * w, cout))
                .expect("row-major dy");
            let dw = cols.t().dot(&dyi);
            g.w += &dw
                .into_shape_with_order((k, k, cin, cout))
                .expect("kernel shape");
            g.b += &dyi.sum_axis(Axis(0));
            if let Some(dx) = &mut dx {
                let dcols = dyi.dot(&self.w2().t());
                dx.index_axis_mut(Axis(0), i).assign(&self.col2im(&dcols, h, w));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), Slot::Weight, self.w.view().into_dyn());
        f(&join(prefix, "bias"), Slot::Bias, self.b.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), Slot::Weight, self.w.view_mut().into_dyn());
        f(&join(prefix, "bias"), Slot::Bias, self.b.view_mut().into_dyn());
    }
}
