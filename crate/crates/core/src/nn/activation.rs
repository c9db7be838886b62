use ndarray::{Array, Dimension};
use rand::Rng;

use super::{real, Real};

/// Pointwise activation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
    /// Leaky rectifier with the given negative-side slope.
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn apply<F: Real, D: Dimension>(&self, x: &Array<F, D>) -> Array<F, D> {
        match *self {
            Activation::Relu => x.mapv(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::LeakyRelu(slope) => {
                let s: F = real(slope);
                x.mapv(|v| if v > F::zero() { v } else { v * s })
            }
            Activation::Identity => x.clone(),
        }
    }

    /// Gradient through the activation given its *input* `x`.
    pub fn backward<F: Real, D: Dimension>(&self, x: &Array<F, D>, dy: &Array<F, D>) -> Array<F, D> {
        match *self {
            Activation::Relu => {
                let mut g = dy.clone();
                g.zip_mut_with(x, |g, &v| {
                    if v <= F::zero() {
                        *g = F::zero()
                    }
                });
                g
            }
            Activation::LeakyRelu(slope) => {
                let s: F = real(slope);
                let mut g = dy.clone();
                g.zip_mut_with(x, |g, &v| {
                    if v <= F::zero() {
                        *g = *g * s
                    }
                });
                g
            }
            Activation::Identity => dy.clone(),
        }
    }
}

/// Inverted dropout: kept units are scaled by `1/(1−rate)` so inference is a no-op.
#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate }
    }

    /// Sample a keep-mask (already scaled) shaped like `like`.
    pub fn mask<F: Real, D: Dimension, R: Rng + ?Sized>(&self, like: &Array<F, D>, rng: &mut R) -> Array<F, D> {
        if self.rate == 0.0 {
            return Array::from_elem(like.raw_dim(), F::one());
        }
        let scale: F = real(1.0 / (1.0 - self.rate));
        Array::from_shape_simple_fn(like.raw_dim(), || {
            if rng.random::<f64>() >= self.rate {
                scale
            } else {
                F::zero()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;

    #[test]
    fn leaky_relu_slope() {
        let x = arr1(&[-2.0_f64, 0.0, 3.0]);
        let y = Activation::LeakyRelu(0.3).apply(&x);
        assert!((y[0] + 0.6).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[2], 3.0);
        let g = Activation::LeakyRelu(0.3).backward(&x, &arr1(&[1.0, 1.0, 1.0]));
        assert_eq!(g.to_vec(), vec![0.3, 0.3, 1.0]);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let d = Dropout::new(0.6);
        let x = ndarray::Array1::<f64>::ones(200_000);
        let m = d.mask(&x, &mut rng);
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
