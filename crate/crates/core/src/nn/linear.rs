use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, randn, Module, Slot};

/// Affine map over the last axis: `y = x·w + b`, with `w` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Option<Array1<f64>>,
}

impl Linear {
    /// Variance-scaled Gaussian init (std = gain / sqrt(fan_in)).
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (input.max(1) as f64).sqrt();
        Self {
            w: randn((input, output), std, rng),
            b: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        if let Some(b) = &self.b {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        g: &mut Linear,
    ) -> Array2<f64> {
        self.backward_params(x, dy, g);
        dy.dot(&self.w.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>, g: &mut Linear) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g.w);
        if let Some(gb) = &mut g.b {
            *gb += &dy.sum_axis(Axis(0));
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "weight"), Slot::Weight, self.w.view().into_dyn());
        if let Some(b) = &self.b {
            f(&join(prefix, "bias"), Slot::Bias, b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "weight"), Slot::Weight, self.w.view_mut().into_dyn());
        if let Some(b) = &mut self.b {
            f(&join(prefix, "bias"), Slot::Bias, b.view_mut().into_dyn());
        }
    }
}
