//! Label-preserving geometric augmentation.

use image::{imageops, GrayImage, ImageBuffer, Pixel, RgbImage};

use super::ImageTile;
use crate::{Error, Result};

/// The five isometries used to expand counting data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Isometry {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate270,
}

impl Isometry {
    pub const ALL: [Isometry; 5] = [
        Isometry::Identity,
        Isometry::FlipHorizontal,
        Isometry::FlipVertical,
        Isometry::Rotate90,
        Isometry::Rotate270,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Isometry::Identity => "orig",
            Isometry::FlipHorizontal => "hflip",
            Isometry::FlipVertical => "vflip",
            Isometry::Rotate90 => "rot90",
            Isometry::Rotate270 => "rot270",
        }
    }

    pub fn apply<P: Pixel + 'static>(self, img: &ImageBuffer<P, Vec<P::Subpixel>>) -> ImageBuffer<P, Vec<P::Subpixel>> {
        match self {
            Isometry::Identity => img.clone(),
            Isometry::FlipHorizontal => imageops::flip_horizontal(img),
            Isometry::FlipVertical => imageops::flip_vertical(img),
            Isometry::Rotate90 => imageops::rotate90(img),
            Isometry::Rotate270 => imageops::rotate270(img),
        }
    }
}

/// Original, horizontal flip, vertical flip, and rotations by 90° and 270°,
/// all carrying the original count; masks get the identical transform.
pub fn augment_counting(tile: &ImageTile) -> Vec<ImageTile> {
    Isometry::ALL
        .iter()
        .map(|&iso| ImageTile {
            id: if iso == Isometry::Identity {
                tile.id.clone()
            } else {
                format!("{}#{}", tile.id, iso.tag())
            },
            pixels: iso.apply(&tile.pixels),
            count: tile.count,
            geo_bounds: tile.geo_bounds,
            mask: tile.mask.as_ref().map(|m| iso.apply(m)),
            meters_per_pixel: tile.meters_per_pixel,
        })
        .collect()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn rotate_source(x: u32, y: u32, w: u32, h: u32, degrees: f64) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    // inverse rotation maps output pixels back into the source
    (cx + c * dx + s * dy, cy - s * dx + c * dy)
}

/// Rotate about the centre keeping the input size; samples that fall outside
/// the source are filled by mirror reflection across the border.
pub fn rotate_reflect(img: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = rotate_source(x, y, w, h, degrees);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let xi = [reflect(x0 as isize, w as usize), reflect(x0 as isize + 1, w as usize)];
        let yi = [reflect(y0 as isize, h as usize), reflect(y0 as isize + 1, h as usize)];
        let mut px = [0u8; 3];
        for (ch, out) in px.iter_mut().enumerate() {
            let v = |xx: usize, yy: usize| f64::from(img.get_pixel(xx as u32, yy as u32).0[ch]);
            let top = v(xi[0], yi[0]) * (1.0 - fx) + v(xi[1], yi[0]) * fx;
            let bottom = v(xi[0], yi[1]) * (1.0 - fx) + v(xi[1], yi[1]) * fx;
            *out = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    })
}

fn rotate_mask_reflect(mask: &GrayImage, degrees: f64) -> GrayImage {
    let (w, h) = mask.dimensions();
    GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = rotate_source(x, y, w, h, degrees);
        let xi = reflect(sx.round() as isize, w as usize);
        let yi = reflect(sy.round() as isize, h as usize);
        *mask.get_pixel(xi as u32, yi as u32)
    })
}

/// Patch augmentations: original, horizontal flip, vertical flip, and
/// rotations by +45° and −45° with reflection fill.
pub fn augment_patch_pixels(patch: &RgbImage) -> [RgbImage; 5] {
    [
        patch.clone(),
        imageops::flip_horizontal(patch),
        imageops::flip_vertical(patch),
        rotate_reflect(patch, 45.0),
        rotate_reflect(patch, -45.0),
    ]
}

/// [`augment_patch_pixels`] on a square tile; labels, counts and masks follow.
pub fn augment_patch(patch: &ImageTile) -> Result<Vec<ImageTile>> {
    if patch.width() != patch.height() {
        return Err(Error::Domain(format!(
            "patch {} is {}×{}, expected a square",
            patch.id,
            patch.width(),
            patch.height()
        )));
    }
    let tags = ["orig", "hflip", "vflip", "rot45", "rot315"];
    let masks: Option<[GrayImage; 5]> = patch.mask.as_ref().map(|m| {
        [
            m.clone(),
            imageops::flip_horizontal(m),
            imageops::flip_vertical(m),
            rotate_mask_reflect(m, 45.0),
            rotate_mask_reflect(m, -45.0),
        ]
    });
    Ok(augment_patch_pixels(&patch.pixels)
        .into_iter()
        .enumerate()
        .map(|(i, pixels)| ImageTile {
            id: if i == 0 {
                patch.id.clone()
            } else {
                format!("{}#{}", patch.id, tags[i])
            },
            pixels,
            count: patch.count,
            geo_bounds: patch.geo_bounds,
            mask: masks.as_ref().map(|m| m[i].clone()),
            meters_per_pixel: patch.meters_per_pixel,
        })
        .collect())
}
