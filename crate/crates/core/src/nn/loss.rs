use ndarray::{Array1, Array4, Axis};

use super::{real, Real};
use crate::{Error, Result};

/// Softmax across the channel axis of an NCHW score tensor.
pub fn softmax_channels<F: Real>(scores: &Array4<F>) -> Array4<F> {
    let mut out = scores.clone();
    for mut lane in out.lanes_mut(Axis(1)) {
        let max = lane.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean per-location cross-entropy; every location of sample `n` carries
/// label `labels[n]`. Returns the loss and its gradient w.r.t. `scores`.
pub fn cross_entropy_2d<F: Real>(scores: &Array4<F>, labels: &[usize]) -> Result<(F, Array4<F>)> {
    let (n, k, h, w) = scores.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_channels(scores);
    let count: F = real((n * h * w) as f64);
    let tiny: F = real(1e-12);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                loss -= probs[[i, label, y, x]].max(tiny).ln();
                grad[[i, label, y, x]] -= F::one();
            }
        }
    }
    grad.mapv_inplace(|g| g / count);
    Ok((loss / count, grad))
}

fn check_pair<F: Real>(pred: &Array1<F>, target: &Array1<F>) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction/target lengths {} and {} must match and be non-zero",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean squared error and its gradient.
pub fn mse<F: Real>(pred: &Array1<F>, target: &Array1<F>) -> Result<(F, Array1<F>)> {
    check_pair(pred, target)?;
    let n: F = real(pred.len() as f64);
    let diff = pred - target;
    let loss = diff.mapv(|d| d * d).sum() / n;
    let grad = diff.mapv(|d| d * real::<F>(2.0) / n);
    Ok((loss, grad))
}

/// Root of the batch mean squared error, and its gradient (zero at a perfect fit).
pub fn rmse<F: Real>(pred: &Array1<F>, target: &Array1<F>) -> Result<(F, Array1<F>)> {
    let (m, g) = mse(pred, target)?;
    let r = m.sqrt();
    if r == F::zero() {
        return Ok((r, Array1::zeros(pred.len())));
    }
    let scale = real::<F>(0.5) / r;
    Ok((r, g.mapv(|v| v * scale)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};

    #[test]
    fn rmse_of_perfect_fit_is_zero() {
        let (l, g) = rmse(&arr1(&[1.0_f64, 2.0]), &arr1(&[1.0, 2.0])).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmse_gradient_matches_finite_difference() {
        let p = arr1(&[1.5_f64, -0.5, 4.0]);
        let t = arr1(&[1.0_f64, 0.5, 2.0]);
        let (_, g) = rmse(&p, &t).unwrap();
        for i in 0..3 {
            let mut a = p.clone();
            a[i] += 1e-6;
            let mut b = p.clone();
            b[i] -= 1e-6;
            let fd = (rmse(&a, &t).unwrap().0 - rmse(&b, &t).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let s = Array::from_shape_fn((2, 2, 2, 3), |(a, b, c, d)| (a + 2 * b + c) as f64 * 0.3 - d as f64 * 0.2);
        let labels = [1, 0];
        let (_, g) = cross_entropy_2d(&s, &labels).unwrap();
        for idx in [(0, 0, 1, 2), (1, 1, 0, 0)] {
            let mut a = s.clone();
            a[idx] += 1e-6;
            let mut b = s.clone();
            b[idx] -= 1e-6;
            let fd = (cross_entropy_2d(&a, &labels).unwrap().0 - cross_entropy_2d(&b, &labels).unwrap().0) / 2e-6;
            assert!((fd - g[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_pairs_sum_to_one() {
        let s = Array::from_shape_fn((1, 2, 3, 3), |(_, b, c, d)| (b * 40) as f64 - (c * d) as f64);
        let p = softmax_channels(&s);
        for y in 0..3 {
            for x in 0..3 {
                assert!((p[[0, 0, y, x]] + p[[0, 1, y, x]] - 1.0).abs() < 1e-12);
            }
        }
    }
}
