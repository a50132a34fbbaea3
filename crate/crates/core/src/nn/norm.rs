use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};

use super::{join, Module, Slot};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-row normalization over the channel axis with a learned affine.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / c;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            *r = 1.0 / (var + LN_EPS).sqrt();
            row *= *r;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: ArrayView2<'_, f64>,
        g: &mut LayerNorm,
    ) -> Array2<f64> {
        g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let c = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for ((mut out, (dh, xh)), r) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows().into_iter().zip(cache.xhat.rows()))
            .zip(cache.rstd.iter())
        {
            let mean_dh = dh.sum() / c;
            let mean_dhx = dh.dot(&xh) / c;
            Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &d, &x| *o = r * (d - mean_dh - x * mean_dhx));
        }
        dx
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "gamma"), Slot::Bias, self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), Slot::Bias, self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "gamma"), Slot::Bias, self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), Slot::Bias, self.beta.view_mut().into_dyn());
    }
}

/// Batch normalization over rows (feature axis = columns).
///
/// Training mode normalizes with the statistics of the rows it is given and
/// reports them in the cache; [`BatchNorm::absorb`] folds them into the
/// running estimates used in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
    mean: Array1<f64>,
    var_unbiased: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    pub fn forward_train(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let rstd = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = &centered * &rstd;
        let y = &xhat * &self.gamma + &self.beta;
        let var_unbiased = if x.nrows() > 1 {
            &var * (n / (n - 1.0))
        } else {
            var.clone()
        };
        (
            y,
            BatchNormCache {
                xhat,
                rstd,
                mean,
                var_unbiased,
            },
        )
    }

    pub fn forward_eval(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let rstd = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (&x - &self.running_mean) * &rstd * &self.gamma + &self.beta
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache,
        dy: ArrayView2<'_, f64>,
        g: &mut BatchNorm,
    ) -> Array2<f64> {
        let n = dy.nrows() as f64;
        g.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let sum_dh = dxhat.sum_axis(Axis(0));
        let sum_dhx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * n - &sum_dh - &cache.xhat * &sum_dhx;
        dx *= &(&cache.rstd / n);
        dx
    }

    /// Exponential-moving-average update of the running statistics.
    pub fn absorb(&mut self, cache: &BatchNormCache) {
        Zip::from(&mut self.running_mean)
            .and(&cache.mean)
            .for_each(|r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        Zip::from(&mut self.running_var)
            .and(&cache.var_unbiased)
            .for_each(|r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "gamma"), Slot::Bias, self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), Slot::Bias, self.beta.view().into_dyn());
        f(&join(prefix, "running_mean"), Slot::Buffer, self.running_mean.view().into_dyn());
        f(&join(prefix, "running_var"), Slot::Buffer, self.running_var.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "gamma"), Slot::Bias, self.gamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), Slot::Bias, self.beta.view_mut().into_dyn());
        f(&join(prefix, "running_mean"), Slot::Buffer, self.running_mean.view_mut().into_dyn());
        f(&join(prefix, "running_var"), Slot::Buffer, self.running_var.view_mut().into_dyn());
    }
}
