//! Heat-map rendering of a [`CellGrid`].
//!
//! Each cell is tinted by the colour of its count bin over the source image
//! (or a grey canvas). A legend listing the bins that occur is drawn under
//! the map with a small built-in bitmap font.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};

use crate::grid::{pad_reflect, CellGrid};
use crate::{Error, Result};

/// Inclusive count range with a colour; `hi = None` is open-ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bin {
    pub lo: u32,
    pub hi: Option<u32>,
    pub color: [u8; 3],
}

impl Bin {
    pub fn contains(&self, n: u32) -> bool {
        n >= self.lo && self.hi.is_none_or(|h| n <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) if h == self.lo => format!("{h}"),
            Some(h) => format!("{}-{h}", self.lo),
            None => format!("{}+", self.lo),
        }
    }
}

/// Ordered, non-overlapping bins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bins(pub Vec<Bin>);

/// Yellow to dark red, then violet for the open bin.
const PALETTE: [[u8; 3]; 8] = [
    [255, 255, 178],
    [254, 217, 118],
    [254, 178, 76],
    [253, 141, 60],
    [240, 59, 32],
    [189, 0, 38],
    [128, 0, 38],
    [84, 39, 143],
];

impl Default for Bins {
    /// `0, 1-10, 11-20, 21-30, 31-40, 41+`
    fn default() -> Self {
        "0,1-10,11-20,21-30,31-40,41+".parse().expect("default bins are valid")
    }
}

impl FromStr for Bins {
    type Err = Error;

    /// Comma-separated ranges: `N`, `A-B` or `N+`. Colours come from a fixed
    /// palette in order.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("bins '{s}': {m}"));
        let parse_n = |t: &str| t.trim().parse::<u32>().map_err(|_| bad(format!("'{t}' is not a count")));
        let mut bins = Vec::new();
        for (i, part) in s.split(',').enumerate() {
            let part = part.trim();
            let (lo, hi) = if let Some(n) = part.strip_suffix('+') {
                (parse_n(n)?, None)
            } else if let Some((a, b)) = part.split_once('-') {
                (parse_n(a)?, Some(parse_n(b)?))
            } else {
                let n = parse_n(part)?;
                (n, Some(n))
            };
            if hi.is_some_and(|h| h < lo) {
                return Err(bad(format!("range '{part}' is empty")));
            }
            let color = *PALETTE.get(i).ok_or_else(|| bad(format!("at most {} bins", PALETTE.len())))?;
            bins.push(Bin { lo, hi, color });
        }
        for pair in bins.windows(2) {
            match pair[0].hi {
                Some(h) if pair[1].lo == h + 1 => {}
                _ => return Err(bad("ranges must be contiguous and increasing".into())),
            }
        }
        Ok(Bins(bins))
    }
}

impl Bins {
    pub fn index_of(&self, n: u32) -> Option<usize> {
        self.0.iter().position(|b| b.contains(n))
    }
}

/// Files written by [`render_heatmap`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub overlay: PathBuf,
    pub table: PathBuf,
    pub series_table: Option<PathBuf>,
    pub series_plot: Option<PathBuf>,
}

/// `out` with its extension replaced by `suffix`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn blend(base: Rgb<u8>, tint: [u8; 3], alpha: f32) -> Rgb<u8> {
    Rgb(std::array::from_fn(|i| {
        (f32::from(base.0[i]) * (1.0 - alpha) + f32::from(tint[i]) * alpha).round() as u8
    }))
}

/// Bin index of every cell, row-major.
pub fn cell_bins(grid: &CellGrid, bins: &Bins) -> Result<Vec<usize>> {
    grid.cells
        .iter()
        .map(|c| {
            bins.index_of(c.pred).ok_or_else(|| {
                Error::Config(format!("no heat-map bin covers the count {} of cell ({}, {})", c.pred, c.row, c.col))
            })
        })
        .collect()
}

/// The tinted map with its legend.
pub fn overlay_image(grid: &CellGrid, bins: &Bins, background: Option<&RgbImage>, opacity: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::Config(format!("opacity {opacity} outside [0, 1]")));
    }
    let idx = cell_bins(grid, bins)?;
    let (w, h) = (grid.cols * grid.cell_size, grid.rows * grid.cell_size);
    let mut map = match background {
        Some(img) if img.width() as usize == grid.width && img.height() as usize == grid.height => pad_reflect(img, w, h),
        Some(img) => {
            return Err(Error::Shape(format!(
                "background is {}×{}, grid covers {}×{}",
                img.width(),
                img.height(),
                grid.width,
                grid.height
            )))
        }
        None => RgbImage::from_pixel(w as u32, h as u32, Rgb([128, 128, 128])),
    };
    for (c, &b) in grid.cells.iter().zip(&idx) {
        let tint = bins.0[b].color;
        for y in c.y0..c.y0 + grid.cell_size {
            for x in c.x0..c.x0 + grid.cell_size {
                let edge = x == c.x0 || y == c.y0 || x + 1 == c.x0 + grid.cell_size || y + 1 == c.y0 + grid.cell_size;
                let p = map.get_pixel_mut(x as u32, y as u32);
                *p = if edge { Rgb([40, 40, 40]) } else { blend(*p, tint, opacity) };
            }
        }
    }
    let mut used: Vec<usize> = idx.clone();
    used.sort_unstable();
    used.dedup();
    let legend = legend_image(bins, &used, w);
    let mut out = RgbImage::from_pixel(w as u32, (h + legend.height() as usize) as u32, Rgb([255, 255, 255]));
    image::imageops::replace(&mut out, &map, 0, 0);
    image::imageops::replace(&mut out, &legend, 0, h as i64);
    Ok(out)
}

const SCALE: usize = 3;
const SWATCH: usize = 8 * SCALE;
const ROW_H: usize = SWATCH + 2 * SCALE;

fn legend_image(bins: &Bins, used: &[usize], width: usize) -> RgbImage {
    let pad = 2 * SCALE;
    let h = 2 * pad + used.len() * ROW_H;
    let mut img = RgbImage::from_pixel(width.max(1) as u32, h as u32, Rgb([255, 255, 255]));
    for (k, &b) in used.iter().enumerate() {
        let bin = &bins.0[b];
        let y = pad + k * ROW_H;
        fill_rect(&mut img, pad, y, SWATCH, SWATCH, Rgb(bin.color));
        draw_text(&mut img, pad + SWATCH + 2 * SCALE, y + (SWATCH - 5 * SCALE) / 2, &bin.label(), Rgb([0, 0, 0]));
    }
    img
}

fn fill_rect(img: &mut RgbImage, x0: usize, y0: usize, w: usize, h: usize, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height() as usize) {
        for x in x0..(x0 + w).min(img.width() as usize) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// 3×5 glyphs, one row per byte, high bit on the left.
fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x0: usize, y0: usize, text: &str, c: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let gx = x0 + i * 4 * SCALE;
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    fill_rect(img, gx + col * SCALE, y0 + row * SCALE, SCALE, SCALE, c);
                }
            }
        }
    }
}

/// Per-cell truth and prediction, in `(row, col)` order.
pub fn series_tsv(grid: &CellGrid) -> String {
    let mut out = String::from("cell\trow\tcol\ttruth\tpred\n");
    for (k, c) in grid.cells.iter().enumerate() {
        let truth = c.truth.map_or("-".to_string(), |t| t.to_string());
        let _ = writeln!(out, "{}\t{}\t{}\t{truth}\t{}", k + 1, c.row, c.col, c.pred);
    }
    out
}

/// Line chart of truth (blue) and prediction (red) against cell index.
pub fn series_plot(grid: &CellGrid) -> RgbImage {
    let (w, h, m) = (640usize, 320usize, 20usize);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let n = grid.cells.len();
    let top = grid
        .cells
        .iter()
        .map(|c| c.pred.max(c.truth.unwrap_or(0)))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let axis = Rgb([0, 0, 0]);
    fill_rect(&mut img, m, m, 1, h - 2 * m, axis);
    fill_rect(&mut img, m, h - m, w - 2 * m, 1, axis);
    let point = |k: usize, v: u32| {
        let x = m as f64 + if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 } * (w - 2 * m) as f64;
        let y = (h - m) as f64 - f64::from(v) / top * (h - 2 * m) as f64;
        (x, y)
    };
    let mut polyline = |values: Vec<Option<u32>>, color: Rgb<u8>| {
        for k in 0..n {
            let Some(v) = values[k] else { continue };
            let (x, y) = point(k, v);
            fill_rect(&mut img, (x as usize).saturating_sub(2), (y as usize).saturating_sub(2), 5, 5, color);
            if let Some(Some(u)) = values.get(k + 1) {
                let (x1, y1) = point(k + 1, *u);
                let steps = ((x1 - x).abs().max((y1 - y).abs()) as usize).max(1);
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let (px, py) = (x + t * (x1 - x), y + t * (y1 - y));
                    fill_rect(&mut img, px as usize, py as usize, 2, 2, color);
                }
            }
        }
    };
    polyline(grid.cells.iter().map(|c| c.truth).collect(), Rgb([31, 119, 180]));
    polyline(grid.cells.iter().map(|c| Some(c.pred)).collect(), Rgb([214, 39, 40]));
    img
}

/// Write the overlay to `out`, the cell table beside it as
/// `<stem>.cells.tsv`, and, when truths exist, `<stem>.series.tsv` and
/// `<stem>.series.png`.
pub fn render_heatmap(
    grid: &CellGrid,
    bins: &Bins,
    background: Option<&RgbImage>,
    opacity: f32,
    out: impl AsRef<Path>,
) -> Result<HeatmapFiles> {
    let out = out.as_ref();
    let img = overlay_image(grid, bins, background, opacity)?;
    img.save(out).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(out, io),
        other => Error::Image(other),
    })?;
    let table = sibling(out, "cells.tsv");
    grid.write_tsv(&table)?;
    let (mut series_table, mut series_png) = (None, None);
    if grid.has_truth() {
        let p = sibling(out, "series.tsv");
        std::fs::write(&p, series_tsv(grid)).map_err(|e| Error::io(&p, e))?;
        series_table = Some(p);
        let p = sibling(out, "series.png");
        series_plot(grid).save(&p)?;
        series_png = Some(p);
    }
    Ok(HeatmapFiles {
        overlay: out.to_path_buf(),
        table,
        series_table,
        series_plot: series_png,
    })
}
