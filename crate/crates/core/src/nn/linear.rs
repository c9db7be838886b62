use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Ix2};
use rand::Rng;

use super::{join, Param, Parameterized, Real};
use crate::{Error, Result};

/// Fully connected layer `y = x·Wᵀ + b` over a batch of row vectors.
#[derive(Clone, Debug)]
pub struct Linear<F: Real> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Array2<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he_normal(&[outputs, inputs], inputs, rng),
            bias: Param::zeros(&[outputs]),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn infer(&self, x: &Array2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.inputs() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        let mut y = Array2::<F>::zeros((x.nrows(), self.outputs()));
        general_mat_mul(F::one(), x, &self.w().t(), F::zero(), &mut y);
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        y += &b;
        Ok(y)
    }

    pub fn forward(&mut self, x: &Array2<F>) -> Result<Array2<F>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Result<Array2<F>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("linear backward without forward".into()))?;
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
            general_mat_mul(F::one(), &dy.t(), &x, F::one(), &mut gw);
        }
        {
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("1-d");
            gb += &dy.sum_axis(ndarray::Axis(0));
        }
        let mut dx = Array2::<F>::zeros(x.raw_dim());
        general_mat_mul(F::one(), dy, &self.w(), F::zero(), &mut dx);
        Ok(dx)
    }
}

impl<F: Real> Parameterized<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
