//! Bilinear resampling of single-channel maps.

use ndarray::{Array2, ArrayView2};

use super::{real, Real};

#[inline]
fn lerp_index(t: f64, n: usize) -> (usize, usize, f64) {
    let t = t.clamp(0.0, (n - 1) as f64);
    let i0 = t.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, t - i0 as f64)
}

/// Sample `src` bilinearly at continuous source coordinates produced by
/// `map_y(out_y)` / `map_x(out_x)`; coordinates outside the grid clamp to the edge.
pub fn resample<F: Real>(
    src: ArrayView2<F>,
    out_h: usize,
    out_w: usize,
    map_y: impl Fn(usize) -> f64,
    map_x: impl Fn(usize) -> f64,
) -> Array2<F> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0, "cannot resample an empty map");
    let xs: Vec<_> = (0..out_w).map(|x| lerp_index(map_x(x), w)).collect();
    let mut out = Array2::<F>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = lerp_index(map_y(oy), h);
        let (fy, gy): (F, F) = (real(fy), real(1.0 - fy));
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (fx, gx): (F, F) = (real(fx), real(1.0 - fx));
            let top = src[[y0, x0]] * gx + src[[y0, x1]] * fx;
            let bottom = src[[y1, x0]] * gx + src[[y1, x1]] * fx;
            out[[oy, ox]] = top * gy + bottom * fy;
        }
    }
    out
}

/// Resize with pixel-centre alignment (`align_corners = false`).
pub fn resize_bilinear<F: Real>(src: ArrayView2<F>, out_h: usize, out_w: usize) -> Array2<F> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    resample(
        src,
        out_h,
        out_w,
        |y| (y as f64 + 0.5) * sy - 0.5,
        |x| (x as f64 + 0.5) * sx - 0.5,
    )
}

/// Place grid values at pixel positions `offset + stride·i` and interpolate
/// bilinearly between them to fill an `out_h × out_w` image.
pub fn upsample_grid<F: Real>(
    src: ArrayView2<F>,
    stride: f64,
    offset: f64,
    out_h: usize,
    out_w: usize,
) -> Array2<F> {
    resample(
        src,
        out_h,
        out_w,
        |y| (y as f64 - offset) / stride,
        |x| (x as f64 - offset) / stride,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn constant_maps_stay_constant() {
        let src = Array2::from_elem((5, 7), 0.25_f64);
        assert!(resize_bilinear(src.view(), 33, 12).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(upsample_grid(src.view(), 8.0, 31.5, 96, 96).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_resize() {
        let src = arr2(&[[1.0_f64, 2.0], [3.0, 4.0]]);
        assert_eq!(resize_bilinear(src.view(), 2, 2), src);
    }

    #[test]
    fn grid_points_land_on_their_pixels() {
        let src = arr2(&[[0.0_f64, 1.0], [2.0, 3.0]]);
        let up = upsample_grid(src.view(), 8.0, 4.0, 16, 16);
        assert_eq!(up[[4, 4]], 0.0);
        assert_eq!(up[[4, 12]], 1.0);
        assert_eq!(up[[12, 12]], 3.0);
        assert!((up[[8, 4]] - 1.0).abs() < 1e-12);
    }
}
