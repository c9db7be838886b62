//! Attention pooling operators and their gradients.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};

use crate::nn::resize::resize_bilinear;
use crate::nn::{real, Real};
use crate::{Error, Result};

fn check_spatial<F>(volume: &ArrayView3<F>, prob: &ArrayView2<F>) -> Result<()> {
    let (_, h, w) = volume.dim();
    if prob.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "probability map is {:?} but the feature grid is {h}×{w}",
            prob.dim()
        )));
    }
    Ok(())
}

/// Bilinearly resample a probability map onto an `h×w` feature grid.
pub fn resample_probability<F: Real>(prob: ArrayView2<F>, h: usize, w: usize) -> Array2<F> {
    if prob.dim() == (h, w) {
        return prob.to_owned();
    }
    resize_bilinear(prob, h, w)
}

/// `volume ⊙ prob`, broadcasting the map over channels.
pub fn weight_volume<F: Real>(volume: ArrayView3<F>, prob: ArrayView2<F>) -> Result<Array3<F>> {
    check_spatial(&volume, &prob)?;
    let mut out = volume.to_owned();
    for mut plane in out.outer_iter_mut() {
        plane *= &prob;
    }
    Ok(out)
}

/// Global weighted average pooling: `out[c] = Σ volume[c]·prob / (h·w)`.
pub fn gwap<F: Real>(volume: ArrayView3<F>, prob: ArrayView2<F>) -> Result<Array1<F>> {
    check_spatial(&volume, &prob)?;
    let (c, h, w) = volume.dim();
    let norm: F = real((h * w) as f64);
    let mut out = Array1::<F>::zeros(c);
    for (o, plane) in out.iter_mut().zip(volume.outer_iter()) {
        *o = Zip::from(&plane).and(&prob).fold(F::zero(), |acc, &v, &p| acc + v * p) / norm;
    }
    Ok(out)
}

/// Gradients of [`gwap`] w.r.t. the volume and the map, given `d out`.
pub fn gwap_backward<F: Real>(
    volume: ArrayView3<F>,
    prob: ArrayView2<F>,
    dout: ArrayView1<F>,
) -> Result<(Array3<F>, Array2<F>)> {
    check_spatial(&volume, &prob)?;
    let (c, h, w) = volume.dim();
    if dout.len() != c {
        return Err(Error::Shape(format!("gradient has {} entries for {c} channels", dout.len())));
    }
    let norm: F = real((h * w) as f64);
    let mut dvol = Array3::<F>::zeros((c, h, w));
    let mut dprob = Array2::<F>::zeros((h, w));
    for ((mut dplane, plane), &g) in dvol.outer_iter_mut().zip(volume.outer_iter()).zip(dout.iter()) {
        let s = g / norm;
        Zip::from(&mut dplane).and(&prob).for_each(|d, &p| *d = p * s);
        Zip::from(&mut dprob).and(&plane).for_each(|d, &v| *d += v * s);
    }
    Ok((dvol, dprob))
}

/// Cross-channel parametric pooling: a `1×1` convolution to one map,
/// `out[y, x] = bias + Σ_c weight[c]·volume[c, y, x]`.
pub fn ccpp<F: Real>(volume: ArrayView3<F>, weight: ArrayView1<F>, bias: F) -> Result<Array2<F>> {
    let (c, h, w) = volume.dim();
    if weight.len() != c {
        return Err(Error::Shape(format!(
            "1×1 convolution has {} weights for {c} channels",
            weight.len()
        )));
    }
    let mut out = Array2::<F>::from_elem((h, w), bias);
    for (plane, &wc) in volume.outer_iter().zip(weight.iter()) {
        out.scaled_add(wc, &plane);
    }
    Ok(out)
}

/// Gradients of [`ccpp`] w.r.t. the volume, the weights and the bias.
pub fn ccpp_backward<F: Real>(
    volume: ArrayView3<F>,
    weight: ArrayView1<F>,
    dout: ArrayView2<F>,
) -> Result<(Array3<F>, Array1<F>, F)> {
    let (c, h, w) = volume.dim();
    if weight.len() != c || dout.dim() != (h, w) {
        return Err(Error::Shape("ccpp gradient shapes do not match the forward pass".into()));
    }
    let mut dvol = Array3::<F>::zeros((c, h, w));
    for (mut dplane, &wc) in dvol.outer_iter_mut().zip(weight.iter()) {
        dplane.assign(&dout);
        dplane *= wc;
    }
    let dweight = Array1::from_iter(
        volume
            .outer_iter()
            .map(|plane| Zip::from(&plane).and(&dout).fold(F::zero(), |a, &v, &g| a + v * g)),
    );
    Ok((dvol, dweight, dout.sum()))
}

/// [`ccpp`] applied to `volume ⊙ prob`.
pub fn ccpp_attention<F: Real>(
    volume: ArrayView3<F>,
    prob: ArrayView2<F>,
    weight: ArrayView1<F>,
    bias: F,
) -> Result<Array2<F>> {
    ccpp(weight_volume(volume, prob)?.view(), weight, bias)
}

/// Gradients of [`ccpp_attention`]: `(d volume, d prob, d weight, d bias)`.
pub fn ccpp_attention_backward<F: Real>(
    volume: ArrayView3<F>,
    prob: ArrayView2<F>,
    weight: ArrayView1<F>,
    dout: ArrayView2<F>,
) -> Result<(Array3<F>, Array2<F>, Array1<F>, F)> {
    let weighted = weight_volume(volume, prob)?;
    let (dweighted, dweight, dbias) = ccpp_backward(weighted.view(), weight, dout)?;
    let dvol = weight_volume(dweighted.view(), prob)?;
    let mut dprob = Array2::<F>::zeros(prob.dim());
    for (dplane, plane) in dweighted.outer_iter().zip(volume.outer_iter()) {
        Zip::from(&mut dprob).and(&dplane).and(&plane).for_each(|d, &g, &v| *d += g * v);
    }
    Ok((dvol, dprob, dweight, dbias))
}

/// Unweighted global average pooling.
pub fn global_average<F: Real>(volume: ArrayView3<F>) -> Array1<F> {
    let (_, h, w) = volume.dim();
    volume.sum_axis(Axis(2)).sum_axis(Axis(1)) / real::<F>((h * w) as f64)
}
