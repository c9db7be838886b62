//! Counting over large tiles by splitting them into fixed-size cells.
//!
//! Dimensions that are not a multiple of the cell size are padded on the
//! right and bottom by reflection; cells touching the padding are flagged.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;

use crate::dataset::TILE_SIZE_PX;
use crate::heads::{CountModel, Prediction};
use crate::ssnet::reflect_index;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    /// Rounded, clamped prediction.
    pub pred: u32,
    pub truth: Option<u32>,
    /// Part of the cell lies in the reflected margin.
    pub padded: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellGrid {
    pub cell_size: usize,
    /// Size of the unpadded source image.
    pub width: usize,
    pub height: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, ordered by `(row, col)`.
    pub cells: Vec<Cell>,
}

impl CellGrid {
    pub fn predicted_total(&self) -> u64 {
        self.cells.iter().map(|c| u64::from(c.pred)).sum()
    }

    /// Sum of truths when every cell has one.
    pub fn truth_total(&self) -> Option<u64> {
        self.cells.iter().map(|c| c.truth.map(u64::from)).sum()
    }

    pub fn has_truth(&self) -> bool {
        self.cells.iter().any(|c| c.truth.is_some())
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&Cell> {
        (row < self.rows && col < self.cols).then(|| &self.cells[row * self.cols + col])
    }

    /// Set truths from a `rows×cols` provider.
    pub fn set_truths(&mut self, mut truth: impl FnMut(&Cell) -> Option<u32>) {
        for c in &mut self.cells {
            c.truth = truth(c);
        }
    }

    /// Tab-separated table `row col x0 y0 pred [truth]` with `#` metadata
    /// lines; [`CellGrid::parse`] reads it back exactly.
    pub fn to_tsv(&self) -> String {
        let truth = self.has_truth();
        let mut out = String::new();
        let _ = writeln!(out, "# cell_size\t{}", self.cell_size);
        let _ = writeln!(out, "# image\t{}\t{}", self.width, self.height);
        out.push_str(if truth { "row\tcol\tx0\ty0\tpred\ttruth\n" } else { "row\tcol\tx0\ty0\tpred\n" });
        for c in &self.cells {
            let _ = write!(out, "{}\t{}\t{}\t{}\t{}", c.row, c.col, c.x0, c.y0, c.pred);
            if truth {
                match c.truth {
                    Some(t) => {
                        let _ = write!(out, "\t{t}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        for c in self.cells.iter().filter(|c| c.padded) {
            let _ = writeln!(out, "# padded-cell\t{}\t{}", c.row, c.col);
        }
        let _ = writeln!(out, "# total\t{}", self.predicted_total());
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_path_buf(),
            line,
            message,
        };
        let num = |line: usize, s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| err(line, format!("'{s}' is not a non-negative integer")))
        };
        let (mut cell_size, mut image) = (None, None);
        let mut cells = Vec::new();
        let mut padded = Vec::new();
        let mut has_truth = None;
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            match fields[0] {
                "# cell_size" if fields.len() == 2 => cell_size = Some(num(ln, fields[1])?),
                "# image" if fields.len() == 3 => image = Some((num(ln, fields[1])?, num(ln, fields[2])?)),
                "# padded-cell" if fields.len() == 3 => padded.push((num(ln, fields[1])?, num(ln, fields[2])?)),
                f if f.starts_with('#') => {}
                "row" => has_truth = Some(fields.len() == 6),
                _ => {
                    let want = match has_truth {
                        Some(true) => 6,
                        Some(false) => 5,
                        None => return Err(err(ln, "cell row before the header".into())),
                    };
                    if fields.len() != want {
                        return Err(err(ln, format!("expected {want} fields, found {}", fields.len())));
                    }
                    let truth = match fields.get(5) {
                        None | Some(&"-") => None,
                        Some(t) => Some(num(ln, t)? as u32),
                    };
                    cells.push(Cell {
                        row: num(ln, fields[0])?,
                        col: num(ln, fields[1])?,
                        x0: num(ln, fields[2])?,
                        y0: num(ln, fields[3])?,
                        pred: u32::try_from(num(ln, fields[4])?).map_err(|_| err(ln, "prediction too large".into()))?,
                        truth,
                        padded: false,
                    });
                }
            }
        }
        let cell_size = cell_size.ok_or_else(|| err(0, "missing '# cell_size' line".into()))?;
        let (width, height) = image.ok_or_else(|| err(0, "missing '# image' line".into()))?;
        if cell_size == 0 {
            return Err(err(0, "cell size is zero".into()));
        }
        let (rows, cols) = (height.div_ceil(cell_size), width.div_ceil(cell_size));
        if cells.len() != rows * cols {
            return Err(err(0, format!("expected {} cells for {rows}×{cols}, found {}", rows * cols, cells.len())));
        }
        for (k, c) in cells.iter_mut().enumerate() {
            if (c.row, c.col) != (k / cols, k % cols) {
                return Err(err(0, format!("cell ({}, {}) out of order", c.row, c.col)));
            }
            c.padded = padded.contains(&(c.row, c.col));
        }
        Ok(Self {
            cell_size,
            width,
            height,
            rows,
            cols,
            cells,
        })
    }
}

/// Reflect-pad `img` on the right and bottom to `(w, h)`.
pub fn pad_reflect(img: &RgbImage, w: usize, h: usize) -> RgbImage {
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let sx = reflect_index(x as isize, iw);
        let sy = reflect_index(y as isize, ih);
        *img.get_pixel(sx as u32, sy as u32)
    })
}

/// Split `img` into cells, count each with `counter` on `workers` threads
/// (0 = all cores), and return the grid ordered by `(row, col)`.
pub fn count_cells<C>(img: &RgbImage, cell_size: usize, workers: usize, counter: C) -> Result<CellGrid>
where
    C: Fn(&RgbImage) -> Result<Prediction> + Sync,
{
    let (width, height) = (img.width() as usize, img.height() as usize);
    if cell_size == 0 {
        return Err(Error::Config("cell size must be positive".into()));
    }
    if width < cell_size || height < cell_size {
        return Err(Error::Domain(format!(
            "image is {width}×{height}, smaller than one {cell_size}×{cell_size} cell; count it directly as a single image"
        )));
    }
    let (rows, cols) = (height.div_ceil(cell_size), width.div_ceil(cell_size));
    let padded_img = if rows * cell_size != height || cols * cell_size != width {
        log::info!(
            "padding {width}×{height} by reflection to {}×{}",
            cols * cell_size,
            rows * cell_size
        );
        pad_reflect(img, cols * cell_size, rows * cell_size)
    } else {
        img.clone()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let started = Instant::now();
    let cells: Vec<Result<Cell>> = pool.install(|| {
        (0..rows * cols)
            .into_par_iter()
            .map(|k| {
                let (row, col) = (k / cols, k % cols);
                let (x0, y0) = (col * cell_size, row * cell_size);
                let crop = image::imageops::crop_imm(&padded_img, x0 as u32, y0 as u32, cell_size as u32, cell_size as u32)
                    .to_image();
                let p = counter(&crop)?;
                Ok(Cell {
                    row,
                    col,
                    x0,
                    y0,
                    pred: p.rounded,
                    truth: None,
                    padded: x0 + cell_size > width || y0 + cell_size > height,
                })
            })
            .collect()
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    let secs = started.elapsed().as_secs_f64();
    log::info!("{} cells in {secs:.2} s ({:.3} s/image)", cells.len(), secs / cells.len() as f64);
    Ok(CellGrid {
        cell_size,
        width,
        height,
        rows,
        cols,
        cells,
    })
}

/// [`count_cells`] with a counting model; logs throughput per km² when the
/// ground resolution is known.
pub fn count_tile(model: &CountModel, img: &RgbImage, cell_size: usize, workers: usize, meters_per_pixel: Option<f64>) -> Result<CellGrid> {
    let started = Instant::now();
    let grid = count_cells(img, cell_size, workers, |crop| model.predict_rgb(crop))?;
    if let Some(mpp) = meters_per_pixel {
        let km2 = (grid.width as f64 * mpp) * (grid.height as f64 * mpp) / 1e6;
        if km2 > 0.0 {
            log::info!("{:.3} s/km² over {km2:.3} km²", started.elapsed().as_secs_f64() / km2);
        }
    }
    Ok(grid)
}

/// Default cell side.
pub const DEFAULT_CELL_PX: usize = TILE_SIZE_PX;
