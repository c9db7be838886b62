use ndarray::Array4;

use super::{output_size, Real};
use crate::{Error, Result};

/// Max pooling; padded taps never win the max.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    // flat `y*w + x` argmax per output, plus the input dims
    cache: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
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

    fn run<F: Real>(&self, x: &Array4<F>, mut argmax: Option<&mut Vec<u32>>) -> Result<Array4<F>> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w)?;
        let mut out = Array4::<F>::zeros((n, c, ho, wo));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("owned");
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(n * c * ho * wo);
        }
        let pad = self.padding as isize;
        for plane_idx in 0..n * c {
            let plane = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oy in 0..ho {
                let y0 = (oy * self.stride) as isize - pad;
                for ox in 0..wo {
                    let x0 = (ox * self.stride) as isize - pad;
                    let mut best = F::neg_infinity();
                    let mut best_idx = u32::MAX;
                    for ky in 0..self.kernel as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel as isize {
                            let ix = x0 + kx;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let flat = iy as usize * w + ix as usize;
                            let v = plane[flat];
                            if v > best || best_idx == u32::MAX {
                                best = v;
                                best_idx = flat as u32;
                            }
                        }
                    }
                    if best_idx == u32::MAX {
                        return Err(Error::Shape("pooling window entirely in padding".into()));
                    }
                    dst[(plane_idx * ho + oy) * wo + ox] = best;
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best_idx);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn infer<F: Real>(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.run(x, None)
    }

    pub fn forward<F: Real>(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        let mut idx = Vec::new();
        let out = self.run(x, Some(&mut idx))?;
        self.cache = Some((idx, x.dim()));
        Ok(out)
    }

    pub fn backward<F: Real>(&mut self, dy: &Array4<F>) -> Result<Array4<F>> {
        let (idx, (n, c, h, w)) = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("max-pool backward without forward".into()))?;
        let (_, _, ho, wo) = dy.dim();
        let mut dx = Array4::<F>::zeros((n, c, h, w));
        let dys = dy.as_standard_layout();
        let g = dys.as_slice().expect("standard layout");
        let d = dx.as_slice_mut().expect("owned");
        for plane_idx in 0..n * c {
            for k in 0..ho * wo {
                let o = plane_idx * ho * wo + k;
                d[plane_idx * h * w + idx[o] as usize] += g[o];
            }
        }
        Ok(dx)
    }
}

/// Average pooling without padding (inference only).
pub fn avg_pool2d<F: Real>(x: &Array4<F>, kernel: usize, stride: usize) -> Result<Array4<F>> {
    let (n, c, h, w) = x.dim();
    let ho = output_size(h, 0, kernel, stride)?;
    let wo = output_size(w, 0, kernel, stride)?;
    let norm = F::from_usize(kernel * kernel).expect("small");
    let mut out = Array4::<F>::zeros((n, c, ho, wo));
    for ((i, ch, oy, ox), o) in out.indexed_iter_mut() {
        let mut acc = F::zero();
        for ky in 0..kernel {
            for kx in 0..kernel {
                acc += x[[i, ch, oy * stride + ky, ox * stride + kx]];
            }
        }
        *o = acc / norm;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn max_pool_forward_backward() {
        let x = Array::from_shape_vec((1, 1, 4, 4), (0..16).map(|v| v as f64).collect()).unwrap();
        let mut pool = MaxPool2d::new(2, 2, 0);
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = pool.backward(&Array4::from_elem((1, 1, 2, 2), 1.0)).unwrap();
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn floor_division_for_odd_sizes() {
        let pool = MaxPool2d::new(2, 2, 0);
        assert_eq!(pool.output_hw(21, 35).unwrap(), (10, 17));
        let padded = MaxPool2d::new(3, 2, 1);
        assert_eq!(padded.output_hw(168, 168).unwrap(), (84, 84));
    }

    #[test]
    fn average_pool() {
        let x = Array::from_shape_vec((1, 1, 2, 4), vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[2.0, 6.0]);
    }
}
