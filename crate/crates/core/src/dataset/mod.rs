//! Tiles, count bands, manifests, augmentation and image providers.

mod augment;
mod manifest;

pub use augment::{augment_counting, augment_patch, augment_patch_pixels, rotate_reflect, Isometry};
pub use manifest::{load_manifest, Manifest, ManifestEntry, Split};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, RgbImage};

use crate::ssnet::ProbabilityMap;
use crate::{Error, Result};

/// Ground resolution of zoom-19 imagery.
pub const ZOOM19_METERS_PER_PIXEL: f64 = 0.3;
/// Side of a counting tile in pixels.
pub const TILE_SIZE_PX: usize = 336;
pub const MASK_BUILT: u8 = 255;

/// Geographic extent of a tile, in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl GeoBounds {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let ok = [lat_min, lat_max, lon_min, lon_max].iter().all(|v| v.is_finite())
            && lat_min <= lat_max
            && lon_min <= lon_max
            && (-90.0..=90.0).contains(&lat_min)
            && (-90.0..=90.0).contains(&lat_max)
            && (-180.0..=180.0).contains(&lon_min)
            && (-180.0..=180.0).contains(&lon_max);
        if !ok {
            return Err(Error::Domain(format!(
                "invalid geo bounds lat [{lat_min}, {lat_max}] lon [{lon_min}, {lon_max}]"
            )));
        }
        Ok(Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        })
    }
}

impl fmt::Display for GeoBounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.lat_min, self.lat_max, self.lon_min, self.lon_max)
    }
}

impl FromStr for GeoBounds {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Domain(format!("geo bounds '{s}': {e}")))?;
        match parts[..] {
            [a, b, c, d] => GeoBounds::new(a, b, c, d),
            _ => Err(Error::Domain(format!(
                "geo bounds '{s}' must be lat_min,lat_max,lon_min,lon_max"
            ))),
        }
    }
}

/// An RGB raster with its ground-truth building count.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    pub id: String,
    pub pixels: RgbImage,
    pub count: u32,
    pub geo_bounds: Option<GeoBounds>,
    /// Binary footprint mask, `0` non-built and `255` built.
    pub mask: Option<GrayImage>,
    pub meters_per_pixel: f64,
}

impl ImageTile {
    pub fn new(id: impl Into<String>, pixels: RgbImage, count: u32) -> Self {
        Self {
            id: id.into(),
            pixels,
            count,
            geo_bounds: None,
            mask: None,
            meters_per_pixel: ZOOM19_METERS_PER_PIXEL,
        }
    }

    pub fn with_mask(mut self, mask: GrayImage) -> Result<Self> {
        if mask.dimensions() != self.pixels.dimensions() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match image {:?} for tile {}",
                mask.dimensions(),
                self.pixels.dimensions(),
                self.id
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }

    /// Number of built pixels in the mask, if one is attached.
    pub fn built_pixels(&self) -> Option<usize> {
        self.mask
            .as_ref()
            .map(|m| m.pixels().filter(|p| p.0[0] >= 128).count())
    }

    pub fn extent_meters(&self) -> Result<(f64, f64)> {
        Ok((
            tile_extent_meters(self.width(), self.meters_per_pixel)?,
            tile_extent_meters(self.height(), self.meters_per_pixel)?,
        ))
    }
}

/// Ground-truth count ranges used for per-band error reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum CountBand {
    Low,
    Medium,
    High,
}

impl CountBand {
    pub const ALL: [CountBand; 3] = [CountBand::Low, CountBand::Medium, CountBand::High];

    pub fn lower(self) -> u32 {
        match self {
            CountBand::Low => 0,
            CountBand::Medium => 31,
            CountBand::High => 61,
        }
    }

    /// Inclusive upper bound; `None` for the open-ended high band.
    pub fn upper(self) -> Option<u32> {
        match self {
            CountBand::Low => Some(30),
            CountBand::Medium => Some(60),
            CountBand::High => None,
        }
    }

    pub fn contains(self, count: u32) -> bool {
        count >= self.lower() && self.upper().is_none_or(|u| count <= u)
    }

    pub fn of(count: u32) -> CountBand {
        match count {
            0..=30 => CountBand::Low,
            31..=60 => CountBand::Medium,
            _ => CountBand::High,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CountBand::Low => "LOW",
            CountBand::Medium => "MEDIUM",
            CountBand::High => "HIGH",
        }
    }

    pub fn range_label(self) -> String {
        match self.upper() {
            Some(u) => format!("{} to {u}", self.lower()),
            None => format!("greater than {}", self.lower() - 1),
        }
    }
}

impl fmt::Display for CountBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Band containing `count`; negative counts are a domain error.
pub fn band_of(count: i64) -> Result<CountBand> {
    u32::try_from(count)
        .map(CountBand::of)
        .map_err(|_| Error::Domain(format!("count {count} is not a non-negative integer")))
}

/// Ground extent in metres covered by `size_px` pixels.
pub fn tile_extent_meters(size_px: usize, meters_per_pixel: f64) -> Result<f64> {
    if size_px == 0 || !(meters_per_pixel.is_finite() && meters_per_pixel > 0.0) {
        return Err(Error::Domain(format!(
            "tile extent needs positive size and resolution, got {size_px} px at {meters_per_pixel} m/px"
        )));
    }
    Ok(size_px as f64 * meters_per_pixel)
}

/// Fraction of pixels whose built probability is at least `threshold`.
pub fn built_up_ratio(map: &ProbabilityMap, threshold: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!("threshold {threshold} outside [0, 1]")));
    }
    let n = map.values.len();
    if n == 0 {
        return Err(Error::Shape("empty probability map".into()));
    }
    let built = map.values.iter().filter(|&&p| f64::from(p) >= threshold).count();
    Ok(built as f64 / n as f64)
}

/// Random-access provider of tiles.
///
/// Implementations must be safe to call from several threads; the trainers
/// only read through this trait.
pub trait TileSource: Sync {
    fn len(&self) -> usize;

    fn tile(&self, index: usize) -> Result<ImageTile>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TileSource for [ImageTile] {
    fn len(&self) -> usize {
        <[ImageTile]>::len(self)
    }

    fn tile(&self, index: usize) -> Result<ImageTile> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::Domain(format!("tile index {index} out of range")))
    }
}

impl TileSource for Vec<ImageTile> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn tile(&self, index: usize) -> Result<ImageTile> {
        self.as_slice().tile(index)
    }
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    Ok(img.to_rgb8())
}

/// Load a mask, binarising at mid-grey to `0` / `255`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_luma8();
    Ok(GrayImage::from_fn(img.width(), img.height(), |x, y| {
        image::Luma([if img.get_pixel(x, y).0[0] >= 128 { MASK_BUILT } else { 0 }])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn map(values: Array2<f32>) -> ProbabilityMap {
        let (h, w) = values.dim();
        ProbabilityMap {
            values,
            native: Array3::zeros((h, w, 2)),
        }
    }

    #[test]
    fn band_boundaries() {
        assert_eq!(band_of(30).unwrap(), CountBand::Low);
        assert_eq!(band_of(31).unwrap(), CountBand::Medium);
        assert_eq!(band_of(61).unwrap(), CountBand::High);
        assert_eq!(band_of(0).unwrap(), CountBand::Low);
        assert_eq!(band_of(60).unwrap(), CountBand::Medium);
        assert!(matches!(band_of(-1), Err(Error::Domain(_))));
    }

    #[test]
    fn tile_extents() {
        assert!((tile_extent_meters(336, 0.3).unwrap() - 100.8).abs() < 1e-9);
        assert!((tile_extent_meters(1008, 0.3).unwrap() - 302.4).abs() < 1e-9);
        assert!((tile_extent_meters(3024, 0.3).unwrap() - 907.2).abs() < 1e-9);
        assert_eq!(tile_extent_meters(1, 1.0).unwrap(), 1.0);
        assert!(tile_extent_meters(0, 0.3).is_err());
        assert!(tile_extent_meters(10, 0.0).is_err());
        assert!(tile_extent_meters(10, -1.0).is_err());
    }

    #[test]
    fn built_up_ratio_examples() {
        assert_eq!(built_up_ratio(&map(Array2::ones((4, 4))), 0.5).unwrap(), 1.0);
        assert_eq!(built_up_ratio(&map(Array2::zeros((4, 4))), 0.5).unwrap(), 0.0);
        let quarter = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.2, 0.49]).unwrap();
        // brute force: one of four pixels is >= 0.5
        let brute = quarter.iter().filter(|&&v| v >= 0.5).count() as f64 / 4.0;
        assert_eq!(built_up_ratio(&map(quarter), 0.5).unwrap(), brute);
        assert_eq!(brute, 0.25);
        assert!(built_up_ratio(&map(Array2::zeros((1, 1))), 1.5).is_err());
    }

    #[test]
    fn mask_dimensions_must_match() {
        let t = ImageTile::new("a", RgbImage::new(4, 4), 1);
        assert!(t.clone().with_mask(GrayImage::new(4, 3)).is_err());
        assert!(t.with_mask(GrayImage::new(4, 4)).is_ok());
    }

    #[test]
    fn geo_bounds_parse() {
        let g: GeoBounds = "30.0,30.001,31.2,31.201".parse().unwrap();
        assert_eq!(g.to_string().parse::<GeoBounds>().unwrap(), g);
        assert!("1,2,3".parse::<GeoBounds>().is_err());
        assert!("2,1,3,4".parse::<GeoBounds>().is_err());
    }

    proptest! {
        #[test]
        fn band_of_is_total_and_consistent(c in 0u32..100_000) {
            let band = band_of(i64::from(c)).unwrap();
            prop_assert!(band.contains(c));
            prop_assert_eq!(CountBand::ALL.iter().filter(|b| b.contains(c)).count(), 1);
        }

        #[test]
        fn built_up_ratio_non_increasing(vals in proptest::collection::vec(0.0f32..=1.0, 16), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let m = map(Array2::from_shape_vec((4, 4), vals).unwrap());
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(built_up_ratio(&m, lo).unwrap() >= built_up_ratio(&m, hi).unwrap());
        }
    }
}
