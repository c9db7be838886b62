//! Procedural overhead scenes with exact building counts and masks.
//!
//! A scene is a textured field or sand background crossed by road strips
//! with small parked vehicles, plus `count` building footprints. Footprints
//! are rectangles, L-shapes, or 45°-rotated rectangles of 167–333 px²
//! (15–30 m² at 0.3 m/px). Each roof gets its own colour and a two-tone
//! gable shading. Vehicles and roads never appear in the mask and are never
//! counted. Output is a pure function of the [`SceneSpec`].

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ImageTile, Manifest, ManifestEntry, Split, TileSource, MASK_BUILT, TILE_SIZE_PX};
use crate::{Error, Result};

/// Smallest and largest building footprint, in pixels.
pub const MIN_FOOTPRINT_PX: usize = 167;
pub const MAX_FOOTPRINT_PX: usize = 333;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sparse,
    Medium,
    Dense,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Sparse, Density::Medium, Density::Dense];

    /// Minimum free pixels between two buildings.
    pub fn gap(self) -> usize {
        match self {
            Density::Sparse => 2,
            Density::Medium => 1,
            Density::Dense => 0,
        }
    }

    pub fn default_adjacency(self) -> f64 {
        match self {
            Density::Sparse => 0.0,
            Density::Medium => 0.2,
            Density::Dense => 0.6,
        }
    }
}

impl std::str::FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Density::Sparse),
            "medium" => Ok(Density::Medium),
            "dense" => Ok(Density::Dense),
            other => Err(Error::Config(format!("unknown density '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size_px: usize,
    pub count: u32,
    pub density: Density,
    /// Probability that a building is placed against an existing one
    /// (sharing a wall in dense scenes, `gap` pixels away otherwise).
    pub adjacency_prob: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(count: u32, density: Density, seed: u64) -> Self {
        Self {
            size_px: TILE_SIZE_PX,
            count,
            density,
            adjacency_prob: density.default_adjacency(),
            seed,
        }
    }
}

/// Axis-aligned pixel box, `x0..x1 × y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Footprint {
    /// Absolute `(x, y)` pixels.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: PixelRect,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneLayout {
    pub footprints: Vec<Footprint>,
    pub roads: Vec<PixelRect>,
    pub vehicles: Vec<PixelRect>,
}

// A footprint shape relative to its bounding-box origin.
struct Shape {
    w: usize,
    h: usize,
    cells: Vec<(usize, usize)>,
}

fn sample_shape(rng: &mut ChaCha8Rng) -> Shape {
    let area = rng.random_range(MIN_FOOTPRINT_PX as f64..=MAX_FOOTPRINT_PX as f64);
    let aspect = rng.random_range(1.0..1.8);
    let kind = rng.random_range(0..10);
    if kind < 6 {
        let mut w = (area * aspect).sqrt().round() as usize;
        let mut h = (area / w as f64).round() as usize;
        if rng.random_bool(0.5) {
            std::mem::swap(&mut w, &mut h);
        }
        rect_shape(w, h)
    } else if kind < 8 {
        // L: bounding box with one quarter removed
        let full = area / 0.75;
        let w = (full * aspect).sqrt().round() as usize;
        let h = (full / w as f64).round() as usize;
        let (nw, nh) = (w / 2, h / 2);
        let corner = rng.random_range(0..4);
        let cells: Vec<_> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let in_x = if corner % 2 == 0 { x < nw } else { x >= w - nw };
                let in_y = if corner / 2 == 0 { y < nh } else { y >= h - nh };
                !(in_x && in_y)
            })
            .collect();
        Shape { w, h, cells }
    } else {
        // rectangle with sides a×b rotated by 45°
        let a = (area * aspect).sqrt();
        let b = area / a;
        let half = (a + b) / std::f64::consts::SQRT_2 / 2.0;
        let side = (2.0 * half).ceil() as usize + 1;
        let c = (side as f64 - 1.0) / 2.0;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let cells: Vec<_> = (0..side)
            .flat_map(|y| (0..side).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                let u = (dx + dy) * r;
                let v = (dy - dx) * r;
                u.abs() <= a / 2.0 && v.abs() <= b / 2.0
            })
            .collect();
        Shape {
            w: side,
            h: side,
            cells,
        }
    }
}

fn rect_shape(w: usize, h: usize) -> Shape {
    Shape {
        w,
        h,
        cells: (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect(),
    }
}

struct Canvas {
    n: usize,
    gap: usize,
    // 0 free, 1 road, 2 building or within `gap` of one
    blocked: Vec<u8>,
}

impl Canvas {
    fn fits(&self, shape: &Shape, ox: usize, oy: usize) -> bool {
        if ox + shape.w > self.n || oy + shape.h > self.n {
            return false;
        }
        shape.cells.iter().all(|&(x, y)| self.blocked[(oy + y) * self.n + ox + x] == 0)
    }

    fn place(&mut self, shape: &Shape, ox: usize, oy: usize) -> Footprint {
        let g = self.gap as isize;
        let n = self.n as isize;
        let mut pixels = Vec::with_capacity(shape.cells.len());
        for &(x, y) in &shape.cells {
            let (px, py) = (ox + x, oy + y);
            pixels.push((px, py));
            for dy in -g..=g {
                for dx in -g..=g {
                    let (qx, qy) = (px as isize + dx, py as isize + dy);
                    if (0..n).contains(&qx) && (0..n).contains(&qy) {
                        let cell = &mut self.blocked[(qy * n + qx) as usize];
                        if *cell == 0 {
                            *cell = 2;
                        }
                    }
                }
            }
        }
        Footprint {
            pixels,
            bbox: PixelRect {
                x0: ox,
                y0: oy,
                x1: ox + shape.w,
                y1: oy + shape.h,
            },
        }
    }

    fn raster_fit(&self, shape: &Shape) -> Option<(usize, usize)> {
        if shape.w > self.n || shape.h > self.n {
            return None;
        }
        (0..=self.n - shape.h)
            .flat_map(|y| (0..=self.n - shape.w).map(move |x| (x, y)))
            .find(|&(x, y)| self.fits(shape, x, y))
    }
}

fn neighbour_origin(rng: &mut ChaCha8Rng, other: &PixelRect, shape: &Shape, gap: usize) -> Option<(usize, usize)> {
    let (w, h) = (shape.w as i64, shape.h as i64);
    let (x0, y0, x1, y1) = (other.x0 as i64, other.y0 as i64, other.x1 as i64, other.y1 as i64);
    let g = gap as i64;
    let along_x = rng.random_range(x0 - w + 1..x1);
    let along_y = rng.random_range(y0 - h + 1..y1);
    let (ox, oy) = match rng.random_range(0..4) {
        0 => (x1 + g, along_y),
        1 => (x0 - g - w, along_y),
        2 => (along_x, y1 + g),
        _ => (along_x, y0 - g - h),
    };
    (ox >= 0 && oy >= 0).then_some((ox as usize, oy as usize))
}

fn shade(c: [f64; 3], f: f64) -> Rgb<u8> {
    Rgb(c.map(|v| (v * f).round().clamp(0.0, 255.0) as u8))
}

const ROOF_PALETTE: [[f64; 3]; 6] = [
    [168.0, 84.0, 62.0],
    [196.0, 190.0, 180.0],
    [120.0, 118.0, 125.0],
    [208.0, 172.0, 128.0],
    [92.0, 100.0, 132.0],
    [225.0, 222.0, 214.0],
];
const FIELD_PALETTE: [[f64; 3]; 3] = [[96.0, 122.0, 70.0], [190.0, 170.0, 128.0], [134.0, 128.0, 92.0]];
const VEHICLE_PALETTE: [[f64; 3]; 4] = [[245.0, 245.0, 240.0], [200.0, 30.0, 30.0], [30.0, 60.0, 190.0], [235.0, 200.0, 40.0]];

/// Generate the scene and the layout it was drawn from.
pub fn generate_scene_with_layout(spec: &SceneSpec) -> Result<(ImageTile, SceneLayout)> {
    let n = spec.size_px;
    if n < 64 {
        return Err(Error::Generation(format!("scene size {n} is below the 64 px minimum")));
    }
    if !(0.0..=1.0).contains(&spec.adjacency_prob) {
        return Err(Error::Generation("adjacency probability must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gap = spec.density.gap();
    let mut canvas = Canvas {
        n,
        gap,
        blocked: vec![0; n * n],
    };
    let mut layout = SceneLayout::default();

    // roads: zero to two strips, fewer when the scene must hold many buildings
    let budget = n * n;
    let needed = spec.count as usize * (MAX_FOOTPRINT_PX + 4 * (gap + 2) * 20);
    let max_roads = if needed * 2 > budget { 1 } else { 2 };
    let roads = rng.random_range(0..=max_roads);
    let first_vertical = rng.random_bool(0.5);
    for r in 0..roads {
        let width = rng.random_range(8..=14).min(n / 8);
        let at = rng.random_range(0..n - width);
        // a second road crosses the first
        let rect = if first_vertical == (r == 0) {
            PixelRect {
                x0: at,
                y0: 0,
                x1: at + width,
                y1: n,
            }
        } else {
            PixelRect {
                x0: 0,
                y0: at,
                x1: n,
                y1: at + width,
            }
        };
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                canvas.blocked[y * n + x] = 1;
            }
        }
        layout.roads.push(rect);
    }

    for k in 0..spec.count as usize {
        let shape = sample_shape(&mut rng);
        let mut origin = None;
        if !layout.footprints.is_empty() && rng.random_bool(spec.adjacency_prob) {
            for _ in 0..30 {
                let other = layout.footprints[rng.random_range(0..layout.footprints.len())].bbox;
                if let Some((ox, oy)) = neighbour_origin(&mut rng, &other, &shape, gap) {
                    if canvas.fits(&shape, ox, oy) {
                        origin = Some((ox, oy));
                        break;
                    }
                }
            }
        }
        if origin.is_none() && shape.w <= n && shape.h <= n {
            for _ in 0..200 {
                let (ox, oy) = (rng.random_range(0..=n - shape.w), rng.random_range(0..=n - shape.h));
                if canvas.fits(&shape, ox, oy) {
                    origin = Some((ox, oy));
                    break;
                }
            }
        }
        let (shape, origin) = match origin {
            Some(o) => (shape, Some(o)),
            None => match canvas.raster_fit(&shape) {
                Some(o) => (shape, Some(o)),
                None => {
                    // smallest allowed footprint as a last resort
                    let side = (MIN_FOOTPRINT_PX as f64).sqrt().ceil() as usize;
                    let small = rect_shape(side, MIN_FOOTPRINT_PX.div_ceil(side));
                    let o = canvas.raster_fit(&small);
                    (small, o)
                }
            },
        };
        let Some((ox, oy)) = origin else {
            return Err(Error::Generation(format!(
                "cannot place {} buildings in a {n}×{n} {:?} scene; at most {k} fit in this layout",
                spec.count, spec.density
            )));
        };
        let fp = canvas.place(&shape, ox, oy);
        layout.footprints.push(fp);
    }

    // vehicles on roads, never on buildings
    for road in &layout.roads {
        let vertical = road.y1 - road.y0 > road.x1 - road.x0;
        for _ in 0..rng.random_range(0..=5) {
            let (vw, vh) = if vertical { (3, 6) } else { (6, 3) };
            if road.x1 - road.x0 <= vw || road.y1 - road.y0 <= vh {
                continue;
            }
            let x0 = rng.random_range(road.x0..road.x1 - vw);
            let y0 = rng.random_range(road.y0..road.y1 - vh);
            let rect = PixelRect {
                x0,
                y0,
                x1: x0 + vw,
                y1: y0 + vh,
            };
            let clear = (y0..y0 + vh).all(|y| (x0..x0 + vw).all(|x| canvas.blocked[y * n + x] == 1));
            if clear {
                layout.vehicles.push(rect);
            }
        }
    }

    let pixels = render(&layout, n, &mut rng);
    let mut mask = GrayImage::new(n as u32, n as u32);
    for fp in &layout.footprints {
        for &(x, y) in &fp.pixels {
            mask.put_pixel(x as u32, y as u32, image::Luma([MASK_BUILT]));
        }
    }
    let tile = ImageTile::new(format!("scene-{}", spec.seed), pixels, spec.count).with_mask(mask)?;
    Ok((tile, layout))
}

fn render(layout: &SceneLayout, n: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let field = FIELD_PALETTE[rng.random_range(0..FIELD_PALETTE.len())];
    let tilt = [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)];
    let mut img = RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let g = 1.0 + tilt[0] * (x as f64 / n as f64 - 0.5) + tilt[1] * (y as f64 / n as f64 - 0.5);
        shade(field, g)
    });
    // coarse blotches of lighter and darker ground
    for _ in 0..6 {
        let (cx, cy) = (rng.random_range(0..n) as f64, rng.random_range(0..n) as f64);
        let r = rng.random_range(20.0..60.0);
        let f = rng.random_range(0.9..1.1);
        for y in 0..n {
            for x in 0..n {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < r * r {
                    let p = img.get_pixel(x as u32, y as u32).0.map(f64::from);
                    img.put_pixel(x as u32, y as u32, shade(p, f));
                }
            }
        }
    }
    let asphalt = rng.random_range(100.0..130.0);
    for road in &layout.roads {
        for y in road.y0..road.y1 {
            for x in road.x0..road.x1 {
                img.put_pixel(x as u32, y as u32, shade([asphalt, asphalt, asphalt + 4.0], 1.0));
            }
        }
    }
    for v in &layout.vehicles {
        let c = VEHICLE_PALETTE[rng.random_range(0..VEHICLE_PALETTE.len())];
        for y in v.y0..v.y1 {
            for x in v.x0..v.x1 {
                img.put_pixel(x as u32, y as u32, shade(c, 1.0));
            }
        }
    }
    for fp in &layout.footprints {
        let base = ROOF_PALETTE[rng.random_range(0..ROOF_PALETTE.len())];
        let jitter = rng.random_range(0.85..1.12);
        let b = fp.bbox;
        let ridge_x = b.x1 - b.x0 >= b.y1 - b.y0;
        let (lit, dark) = (rng.random_range(1.02..1.12), rng.random_range(0.78..0.92));
        for &(x, y) in &fp.pixels {
            let upper = if ridge_x {
                2 * (y - b.y0) < b.y1 - b.y0
            } else {
                2 * (x - b.x0) < b.x1 - b.x0
            };
            let f = jitter * if upper { lit } else { dark };
            img.put_pixel(x as u32, y as u32, shade(base, f));
        }
    }
    for p in img.pixels_mut() {
        let noise = rng.random_range(-6i16..=6);
        p.0 = p.0.map(|v| (v as i16 + noise).clamp(0, 255) as u8);
    }
    img
}

pub fn generate_scene(spec: &SceneSpec) -> Result<ImageTile> {
    generate_scene_with_layout(spec).map(|(t, _)| t)
}

/// How corpus scenes are assigned to splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// 80/10/10 train/val/test by a hash of the scene id.
    Hash,
    /// The first `train` scenes, then `val`, then the rest.
    Fixed { train: usize, val: usize },
}

/// Split of `id` under the hash policy.
pub fn hash_split(id: &str) -> Split {
    let digest = Sha256::digest(id.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 10;
    match v {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n: usize,
    /// Inclusive count interval.
    pub count_range: (u32, u32),
    pub seed: u64,
    pub size_px: usize,
    pub split: SplitPolicy,
    /// Restrict to one density; otherwise each scene draws one uniformly.
    pub density: Option<Density>,
}

impl CorpusSpec {
    pub fn new(n: usize, count_range: (u32, u32), seed: u64) -> Self {
        Self {
            n,
            count_range,
            seed,
            size_px: TILE_SIZE_PX,
            split: SplitPolicy::Hash,
            density: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("corpus size must be at least 1".into()));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::Config(format!(
                "empty count range [{}, {}]",
                self.count_range.0, self.count_range.1
            )));
        }
        Ok(())
    }

    pub fn scene_id(&self, i: usize) -> String {
        format!("s{}-{i:05}", self.seed)
    }

    pub fn split_of(&self, i: usize) -> Split {
        match self.split {
            SplitPolicy::Hash => hash_split(&self.scene_id(i)),
            SplitPolicy::Fixed { train, val } => {
                if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                }
            }
        }
    }

    /// The scene specification of item `i`; a pure function of `(self, i)`.
    pub fn scene_spec(&self, i: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64 + 1);
        let count = rng.random_range(self.count_range.0..=self.count_range.1);
        let density = self
            .density
            .unwrap_or_else(|| Density::ALL[rng.random_range(0..Density::ALL.len())]);
        SceneSpec {
            size_px: self.size_px,
            count,
            density,
            adjacency_prob: density.default_adjacency(),
            seed: rng.random(),
        }
    }

    pub fn scene(&self, i: usize) -> Result<ImageTile> {
        let mut tile = generate_scene(&self.scene_spec(i))?;
        tile.id = self.scene_id(i);
        Ok(tile)
    }

    /// Indices assigned to `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n).filter(|&i| self.split_of(i) == split).collect()
    }
}

/// Scenes of one corpus generated on demand, without touching disk.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub spec: CorpusSpec,
    pub indices: Vec<usize>,
}

impl SyntheticSource {
    pub fn new(spec: CorpusSpec, split: Option<Split>) -> Result<Self> {
        spec.validate()?;
        let indices = match split {
            Some(s) => spec.indices(s),
            None => (0..spec.n).collect(),
        };
        Ok(Self { spec, indices })
    }
}

impl TileSource for SyntheticSource {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn tile(&self, index: usize) -> Result<ImageTile> {
        let i = *self
            .indices
            .get(index)
            .ok_or_else(|| Error::Domain(format!("scene index {index} out of range")))?;
        self.spec.scene(i)
    }
}

/// Write `images/`, `masks/` and `manifest.tsv` under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    let images = out.join("images");
    let masks = out.join("masks");
    for d in [out, images.as_path(), masks.as_path()] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = Manifest::default();
    for i in 0..spec.n {
        let tile = spec.scene(i)?;
        let image_path: PathBuf = images.join(format!("{}.png", tile.id));
        let mask_path: PathBuf = masks.join(format!("{}.png", tile.id));
        tile.pixels.save(&image_path)?;
        tile.mask.as_ref().expect("generated scenes carry masks").save(&mask_path)?;
        manifest.entries.push(ManifestEntry {
            id: tile.id.clone(),
            image_path,
            count: tile.count,
            split: spec.split_of(i),
            mask_path: Some(mask_path),
            geo_bounds: None,
        });
    }
    manifest.write(out.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn components(mask: &GrayImage) -> usize {
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let mut seen = vec![false; w * h];
        let mut n = 0;
        for start in 0..w * h {
            if seen[start] || mask.as_raw()[start] == 0 {
                continue;
            }
            n += 1;
            let mut q = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = q.pop_front() {
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if !seen[j] && mask.as_raw()[j] != 0 {
                        seen[j] = true;
                        q.push_back(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
        }
        n
    }

    #[test]
    fn empty_scene() {
        let t = generate_scene(&SceneSpec::new(0, Density::Medium, 3)).unwrap();
        assert_eq!(t.count, 0);
        assert_eq!(t.built_pixels(), Some(0));
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::new(25, Density::Dense, 11);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw());
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn dense_scene_merges_but_never_exceeds() {
        let spec = SceneSpec::new(40, Density::Dense, 5);
        let (tile, layout) = generate_scene_with_layout(&spec).unwrap();
        assert_eq!(layout.footprints.len(), 40);
        let cc = components(tile.mask.as_ref().unwrap());
        assert!(cc <= 40 && cc > 0, "{cc} components");
    }

    #[test]
    fn mask_is_union_of_footprints_and_gaps_hold() {
        for density in Density::ALL {
            let (tile, layout) = generate_scene_with_layout(&SceneSpec::new(30, density, 9)).unwrap();
            let mask = tile.mask.unwrap();
            let n = 336;
            let mut owner = vec![usize::MAX; n * n];
            for (k, fp) in layout.footprints.iter().enumerate() {
                let area = fp.pixels.len();
                assert!(area >= MIN_FOOTPRINT_PX - 40 && area <= MAX_FOOTPRINT_PX + 40, "area {area}");
                for &(x, y) in &fp.pixels {
                    assert_eq!(owner[y * n + x], usize::MAX, "overlap");
                    owner[y * n + x] = k;
                }
            }
            for y in 0..n {
                for x in 0..n {
                    assert_eq!(mask.get_pixel(x as u32, y as u32).0[0] != 0, owner[y * n + x] != usize::MAX);
                }
            }
            let g = density.gap() as isize;
            for fp in &layout.footprints {
                let k = owner[fp.pixels[0].1 * n + fp.pixels[0].0];
                for &(x, y) in &fp.pixels {
                    for dy in -g..=g {
                        for dx in -g..=g {
                            let (qx, qy) = (x as isize + dx, y as isize + dy);
                            if (0..n as isize).contains(&qx) && (0..n as isize).contains(&qy) {
                                let o = owner[qy as usize * n + qx as usize];
                                assert!(o == usize::MAX || o == k, "gap violated for {density:?}");
                            }
                        }
                    }
                }
            }
            for v in &layout.vehicles {
                for y in v.y0..v.y1 {
                    for x in v.x0..v.x1 {
                        assert_eq!(owner[y * n + x], usize::MAX);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_reports_capacity() {
        let spec = SceneSpec {
            size_px: 64,
            ..SceneSpec::new(200, Density::Sparse, 1)
        };
        let err = generate_scene(&spec).unwrap_err().to_string();
        assert!(err.contains("at most"), "{err}");
    }

    #[test]
    fn small_corpus_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::new(10, (0, 5), 2);
        let m = generate_corpus(&spec, dir.path()).unwrap();
        assert_eq!(m.len(), 10);
        assert!(m.entries.iter().all(|e| e.count <= 5));
        let reloaded = crate::dataset::load_manifest(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(reloaded, m);
        let first = fs::read(dir.path().join("manifest.tsv")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        generate_corpus(&spec, dir2.path()).unwrap();
        assert_eq!(first, fs::read(dir2.path().join("manifest.tsv")).unwrap());
        let img = format!("images/{}.png", spec.scene_id(3));
        assert_eq!(fs::read(dir.path().join(&img)).unwrap(), fs::read(dir2.path().join(&img)).unwrap());
    }

    #[test]
    fn count_mean_over_large_corpus() {
        let spec = CorpusSpec::new(2000, (0, 80), 7);
        let mean = (0..spec.n).map(|i| f64::from(spec.scene_spec(i).count)).sum::<f64>() / 2000.0;
        assert!((35.0..=45.0).contains(&mean), "mean {mean}");
        let train = spec.indices(Split::Train).len();
        assert!((1500..=1700).contains(&train), "train {train}");
    }

    #[test]
    fn fixed_split_policy() {
        let spec = CorpusSpec {
            split: SplitPolicy::Fixed { train: 5, val: 2 },
            ..CorpusSpec::new(9, (0, 3), 1)
        };
        assert_eq!(spec.indices(Split::Train), vec![0, 1, 2, 3, 4]);
        assert_eq!(spec.indices(Split::Val), vec![5, 6]);
        assert_eq!(spec.indices(Split::Test), vec![7, 8]);
    }
}
