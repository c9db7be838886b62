use ndarray::{Array4, Ix1};

use super::{join, real, Param, Parameterized, Real};
use crate::{Error, Result};

/// Batch normalisation with frozen running statistics (inference only).
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F: Real> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub eps: f64,
}

impl<F: Real> BatchNorm2d<F> {
    /// Identity-initialised normalisation over `channels`.
    pub fn new(channels: usize) -> Self {
        let mut weight = Param::zeros(&[channels]);
        weight.value.fill(F::one());
        let mut running_var = Param::zeros(&[channels]);
        running_var.value.fill(F::one());
        Self {
            weight,
            bias: Param::zeros(&[channels]),
            running_mean: Param::zeros(&[channels]),
            running_var,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn infer(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let c = x.dim().1;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels received {c}",
                self.channels()
            )));
        }
        fn v<F: Real>(p: &Param<F>) -> ndarray::ArrayView1<'_, F> {
            p.value.view().into_dimensionality::<Ix1>().expect("1-d")
        }
        let (g, b, m, var) = (v(&self.weight), v(&self.bias), v(&self.running_mean), v(&self.running_var));
        let eps: F = real(self.eps);
        let mut out = x.clone();
        for mut img in out.outer_iter_mut() {
            for (ch, mut plane) in img.outer_iter_mut().enumerate() {
                let scale = g[ch] / (var[ch] + eps).sqrt();
                let shift = b[ch] - m[ch] * scale;
                plane.mapv_inplace(|v| v * scale + shift);
            }
        }
        Ok(out)
    }
}

impl<F: Real> Parameterized<F> for BatchNorm2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
