use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, Axis};
use rand::Rng;

use super::{join, real, Param, Parameterized, Real};
use crate::{Error, Result};

/// Spatial output length of a convolution or pooling window:
/// `floor((n_in + 2·padding − kernel) / stride) + 1`.
pub fn output_size(n_in: usize, padding: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Domain(format!(
            "kernel ({kernel}) and stride ({stride}) must be positive"
        )));
    }
    let padded = n_in + 2 * padding;
    if padded < kernel {
        return Err(Error::Domain(format!(
            "kernel {kernel} larger than padded input {padded} (n_in={n_in}, padding={padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

// Budget for one im2col buffer during chunked inference, in elements.
const INFER_CHUNK_ELEMS: usize = 1 << 22;

/// Unfold output rows `oy0..oy1` of one `C×H×W` image into columns of `dst`.
///
/// `dst` is row-major with leading dimension `ld`; the block is written at
/// column offset `col0`, one row per `(channel, ki, kj)` tap.
#[allow(clippy::too_many_arguments)]
pub fn im2col_into<F: Real>(
    x: ArrayView3<F>,
    kernel: usize,
    stride: usize,
    padding: usize,
    oy0: usize,
    oy1: usize,
    wo: usize,
    dst: &mut [F],
    ld: usize,
    col0: usize,
) {
    let (c, h, w) = x.dim();
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.as_standard_layout().to_owned();
            owned.as_slice().expect("standard layout")
        }
    };
    let pad = padding as isize;
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let base = row * ld + col0;
                for (idx, oy) in (oy0..oy1).enumerate() {
                    let out = &mut dst[base + idx * wo..base + (idx + 1) * wo];
                    let iy = (oy * stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        out.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kj as isize - pad;
                    if stride == 1 {
                        // valid ox satisfy 0 <= ox + shift < w
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                        out[..lo].fill(F::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                        if hi.max(lo) < wo {
                            out[hi.max(lo)..].fill(F::zero());
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + shift;
                            *o = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Real>(
    cols: &[F],
    ld: usize,
    col0: usize,
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    (ho, wo): (usize, usize),
    dx: &mut [F],
) {
    let pad = padding as isize;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ch * kernel + ki) * kernel + kj;
                let base = row * ld + col0;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[base + oy * wo..base + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

struct ConvCache<F> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

/// 2-D convolution with square kernels, computed as im2col + GEMM.
pub struct Conv2d<F: Real> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache<F>>,
}

impl<F: Real> Clone for Conv2d<F> {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            cache: None,
        }
    }
}

impl<F: Real> std::fmt::Debug for Conv2d<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Conv2d({}→{}, k={}, s={}, p={})",
            self.in_channels, self.out_channels, self.kernel, self.stride, self.padding
        )
    }
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            output_size(h, self.padding, self.kernel, self.stride)?,
            output_size(w, self.padding, self.kernel, self.stride)?,
        ))
    }

    fn taps(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, c: usize) -> Result<()> {
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{self:?} received {c} input channels"
            )));
        }
        Ok(())
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.taps()))
            .expect("contiguous conv weight")
    }

    /// Forward pass without caching; chunks large images to bound memory.
    pub fn infer(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        self.check_input(c)?;
        let (ho, wo) = self.output_hw(h, w)?;
        let taps = self.taps();
        let wm = self.weight_matrix();
        let bias = &self.bias.value;
        let mut out = Array4::<F>::zeros((n, self.out_channels, ho, wo));
        let rows_per_chunk = (INFER_CHUNK_ELEMS / (taps * wo).max(1)).clamp(1, ho.max(1));
        let mut cols = Array2::<F>::zeros((taps, rows_per_chunk * wo));
        let mut y = Array2::<F>::zeros((self.out_channels, rows_per_chunk * wo));
        for i in 0..n {
            let img = x.index_axis(Axis(0), i);
            let mut oy0 = 0;
            while oy0 < ho {
                let oy1 = (oy0 + rows_per_chunk).min(ho);
                let len = (oy1 - oy0) * wo;
                let ld = rows_per_chunk * wo;
                im2col_into(
                    img,
                    self.kernel,
                    self.stride,
                    self.padding,
                    oy0,
                    oy1,
                    wo,
                    cols.as_slice_mut().expect("owned"),
                    ld,
                    0,
                );
                let cview = cols.slice(ndarray::s![.., ..len]);
                let mut yview = y.slice_mut(ndarray::s![.., ..len]);
                general_mat_mul(F::one(), &wm, &cview, F::zero(), &mut yview);
                for o in 0..self.out_channels {
                    let b = bias[o];
                    let mut dst = out.slice_mut(ndarray::s![i, o, oy0..oy1, ..]);
                    let src = y.slice(ndarray::s![o, ..len]);
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d = *s + b;
                    }
                }
                oy0 = oy1;
            }
        }
        Ok(out)
    }

    /// Training forward pass; caches the unfolded input for [`Self::backward`].
    pub fn forward(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        self.check_input(c)?;
        let (ho, wo) = self.output_hw(h, w)?;
        let l = ho * wo;
        let taps = self.taps();
        let mut cols = Array2::<F>::zeros((taps, n * l));
        {
            let dst = cols.as_slice_mut().expect("owned");
            for i in 0..n {
                im2col_into(
                    x.index_axis(Axis(0), i),
                    self.kernel,
                    self.stride,
                    self.padding,
                    0,
                    ho,
                    wo,
                    dst,
                    n * l,
                    i * l,
                );
            }
        }
        let mut y = Array2::<F>::zeros((self.out_channels, n * l));
        general_mat_mul(F::one(), &self.weight_matrix(), &cols, F::zero(), &mut y);
        let mut out = Array4::<F>::zeros((n, self.out_channels, ho, wo));
        for i in 0..n {
            for o in 0..self.out_channels {
                let b = self.bias.value[o];
                let src = y.slice(ndarray::s![o, i * l..(i + 1) * l]);
                let mut dst = out.slice_mut(ndarray::s![i, o, .., ..]);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = *s + b;
                }
            }
        }
        self.cache = Some(ConvCache {
            cols,
            input_dim: (n, c, h, w),
        });
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Array4<F>, need_input_grad: bool) -> Result<Option<Array4<F>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape(format!("{self:?}: backward without forward")))?;
        let (n, c, h, w) = cache.input_dim;
        let (dn, o, ho, wo) = dy.dim();
        if dn != n || o != self.out_channels {
            return Err(Error::Shape(format!(
                "{self:?}: gradient shape {:?} does not match forward batch {n}",
                dy.dim()
            )));
        }
        let l = ho * wo;
        let taps = self.taps();
        let mut dym = Array2::<F>::zeros((o, n * l));
        for i in 0..n {
            for oc in 0..o {
                let src = dy.slice(ndarray::s![i, oc, .., ..]);
                let mut dst = dym.slice_mut(ndarray::s![oc, i * l..(i + 1) * l]);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = *s;
                }
            }
        }
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((o, taps))
                .expect("contiguous grad");
            general_mat_mul(F::one(), &dym, &cache.cols.t(), F::one(), &mut gw);
        }
        for (oc, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dym.row(oc).sum();
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dcols = Array2::<F>::zeros((taps, n * l));
        general_mat_mul(F::one(), &self.weight_matrix().t(), &dym, F::zero(), &mut dcols);
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let dcs = dcols.as_slice().expect("owned");
        for i in 0..n {
            let mut plane = dx.index_axis_mut(Axis(0), i);
            col2im_add(
                dcs,
                n * l,
                i * l,
                (c, h, w),
                self.kernel,
                self.stride,
                self.padding,
                (ho, wo),
                plane.as_slice_mut().expect("owned"),
            );
        }
        Ok(Some(dx))
    }

    /// Sets every bias to `v`.
    pub fn fill_bias(&mut self, v: f64) {
        self.bias.value.fill(real(v));
    }
}

impl<F: Real> Parameterized<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
