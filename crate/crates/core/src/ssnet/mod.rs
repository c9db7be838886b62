//! SS-Net: a fully convolutional built-up-area segmenter.
//!
//! The trunk is the first three blocks of a VGG-16 (convolutions, ReLU and a
//! 2×2 stride-2 max pool per block) followed by a head of one 8×8 valid
//! convolution, ReLU, and a 1×1 convolution to two channels (non-built,
//! built). Softmax across the two channels gives the built probability.
//!
//! Trunk convolutions are unpadded. Every input is instead mirrored outward
//! by [`CONTEXT_PX`] pixels once, so a 64×64 patch becomes a 100×100 window
//! and yields exactly one decision, and a `H×W` image yields a
//! `(⌊H/8⌋−7) × (⌊W/8⌋−7)` grid. Because nothing inside the network pads,
//! the grid value at `(i, j)` is exactly the network applied to the
//! 100×100 window whose 64×64 core starts at pixel `(8i, 8j)`.

mod train;

pub use train::{
    candidate_probabilities, candidate_score, extract_patches, false_positive_rate, mine_hard_negatives, mining_candidates, train_ssnet,
    EpochStats, MiningCandidate,
    MiningState, PatchLabelRule, PatchRef, PatchSample, SsNetTrainConfig, SsNetTrainer, BUILT, NON_BUILT,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ImageTile, MASK_BUILT};
use crate::nn::resize::upsample_grid;
use crate::nn::{real, softmax_channels, Conv2d, ConvLayer, MaxPool2d, Parameterized, Real, Sequential};
use crate::{Error, Result};

/// Side of a training patch.
pub const PATCH_PX: usize = 64;
/// Mirrored border added around every input.
pub const CONTEXT_PX: usize = 18;
/// Side of a patch together with its context border.
pub const WINDOW_PX: usize = PATCH_PX + 2 * CONTEXT_PX;
/// Total downsampling of the trunk.
pub const STRIDE: usize = 8;
/// Head kernel size.
pub const HEAD_KERNEL: usize = 8;
pub const CHECKPOINT_KIND: &str = "ssnet";

/// Channel widths of the three trunk blocks and of the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsNetConfig {
    pub widths: [usize; 3],
    pub head_channels: usize,
}

impl Default for SsNetConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128, 256],
            head_channels: 256,
        }
    }
}

impl SsNetConfig {
    pub fn slim(widths: [usize; 3], head_channels: usize) -> Self {
        Self { widths, head_channels }
    }
}

/// Per-pixel built probability and the raw two-channel grid it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    /// Built probability at every image pixel.
    pub values: Array2<f32>,
    /// Native `h'×w'×2` grid of (non-built, built) probabilities.
    pub native: Array3<f32>,
}

impl ProbabilityMap {
    pub fn built_native(&self) -> Array2<f32> {
        self.native.index_axis(Axis(2), 1).to_owned()
    }

    /// 8-bit grayscale rendering, `round(255·p)`.
    pub fn to_gray(&self) -> GrayImage {
        let (h, w) = self.values.dim();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.values[[y as usize, x as usize]].clamp(0.0, 1.0);
            image::Luma([(255.0 * p).round() as u8])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray().save(path.as_ref())?;
        Ok(())
    }

    /// Lossless `float32` export in NumPy `.npy` format.
    pub fn save_npy(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w) = self.values.dim();
        let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({h}, {w}), }}");
        // magic(6) + version(2) + len(2) + header + '\n' must be a multiple of 64
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut bytes = Vec::with_capacity(10 + header.len() + 4 * h * w);
        bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for v in self.values.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Read back a 2-D `<f4` array written by [`ProbabilityMap::save_npy`].
pub fn load_npy_f32(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("not an npy file"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated"))?)
        .map_err(|_| bad("header is not UTF-8"))?;
    if !header.contains("'<f4'") || header.contains("'fortran_order': True") {
        return Err(bad("only C-order float32 arrays are supported"));
    }
    let shape_txt = header
        .split("'shape': (")
        .nth(1)
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let dims: Vec<usize> = shape_txt
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad("expected a 2-d array"));
    }
    let data: Vec<f32> = bytes[10 + hlen..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| bad(&e.to_string()))
}

#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// The segmenter; `F` is the numeric type of the weights.
#[derive(Clone, Debug)]
pub struct SsNet<F: Real> {
    pub config: SsNetConfig,
    /// VGG-style layers, indexed like `torchvision.models.vgg16().features`.
    pub trunk: Sequential<F>,
    /// `[conv 8×8, ReLU, conv 1×1]`.
    pub head: Sequential<F>,
    /// Per-channel training-set mean of `[0,1]`-scaled pixels.
    pub mean: [f64; 3],
}

impl<F: Real> SsNet<F> {
    /// Randomly initialised network; checks that a patch maps to one decision.
    pub fn new(config: SsNetConfig, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) || config.head_channels == 0 {
            return Err(Error::Config("SS-Net widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2, w3] = config.widths;
        let mut layers = Vec::new();
        let mut c = 3;
        for (width, convs) in [(w1, 2), (w2, 2), (w3, 3)] {
            for _ in 0..convs {
                layers.push(ConvLayer::Conv(Conv2d::new(c, width, 3, 1, 0, &mut rng)));
                layers.push(ConvLayer::relu());
                c = width;
            }
            layers.push(ConvLayer::MaxPool(MaxPool2d::new(2, 2, 0)));
        }
        let head = Sequential::new(vec![
            ConvLayer::Conv(Conv2d::new(w3, config.head_channels, HEAD_KERNEL, 1, 0, &mut rng)),
            ConvLayer::relu(),
            ConvLayer::Conv(Conv2d::new(config.head_channels, 2, 1, 1, 0, &mut rng)),
        ]);
        let net = Self {
            config,
            trunk: Sequential::new(layers),
            head,
            mean: [0.0; 3],
        };
        let last = *net.layer_plan(PATCH_PX, PATCH_PX)?.last().expect("non-empty");
        if last != (2, 1, 1) {
            return Err(Error::Shape(format!("patch maps to {last:?}, expected (2, 1, 1)")));
        }
        Ok(net)
    }

    /// Predicted `(c, h, w)` after every trunk and head layer for an
    /// `h×w` image, from the output-size equation alone.
    pub fn layer_plan(&self, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        if h < PATCH_PX || w < PATCH_PX {
            return Err(Error::Shape(format!(
                "SS-Net needs at least {PATCH_PX}×{PATCH_PX} pixels, got {h}×{w}"
            )));
        }
        let mut plan = self.trunk.plan((3, h + 2 * CONTEXT_PX, w + 2 * CONTEXT_PX))?;
        let last = *plan.last().expect("trunk has layers");
        plan.extend(self.head.plan(last)?);
        Ok(plan)
    }

    /// Native grid size for an `h×w` image.
    pub fn native_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, nh, nw) = *self.layer_plan(h, w)?.last().expect("non-empty");
        Ok((nh, nw))
    }

    /// Scale to `[0,1]`, subtract the training mean, and lay out as `3×h×w`.
    pub fn normalize(&self, img: &RgbImage) -> Array3<F> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Array3::<F>::zeros((3, h, w));
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = real(f64::from(p.0[ch]) / 255.0 - self.mean[ch]);
            }
        }
        out
    }

    /// Normalised image mirrored outward by the context border, as a batch of one.
    pub fn prepare(&self, img: &RgbImage) -> Array4<F> {
        let core = self.normalize(img);
        let (_, h, w) = core.dim();
        let m = CONTEXT_PX as isize;
        let mut out = Array4::<F>::zeros((1, 3, h + 2 * CONTEXT_PX, w + 2 * CONTEXT_PX));
        for ch in 0..3 {
            for y in 0..h + 2 * CONTEXT_PX {
                let sy = reflect_index(y as isize - m, h);
                for x in 0..w + 2 * CONTEXT_PX {
                    out[[0, ch, y, x]] = core[[ch, sy, reflect_index(x as isize - m, w)]];
                }
            }
        }
        out
    }

    /// Stack windows that already include their context border.
    pub fn window_batch(&self, windows: &[&RgbImage]) -> Result<Array4<F>> {
        let mut batch = Array4::<F>::zeros((windows.len(), 3, WINDOW_PX, WINDOW_PX));
        for (i, win) in windows.iter().enumerate() {
            if win.dimensions() != (WINDOW_PX as u32, WINDOW_PX as u32) {
                return Err(Error::Shape(format!(
                    "training window is {}×{}, expected {WINDOW_PX}×{WINDOW_PX}",
                    win.width(),
                    win.height()
                )));
            }
            batch.slice_mut(s![i, .., .., ..]).assign(&self.normalize(win));
        }
        Ok(batch)
    }

    /// Raw two-channel scores for an already prepared input.
    pub fn scores(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let t = self.trunk.infer(x)?;
        self.head.infer(&t)
    }

    /// Like [`Self::scores`], reporting every intermediate `(c, h, w)`.
    pub fn scores_traced(&self, x: &Array4<F>, mut trace: impl FnMut(usize, (usize, usize, usize))) -> Result<Array4<F>> {
        let n = self.trunk.layers.len();
        let t = self.trunk.infer_traced(x, &mut trace)?;
        self.head.infer_traced(&t, |i, shape| trace(n + i, shape))
    }

    /// Softmax probabilities `h'×w'×2` for an image.
    pub fn native_probabilities(&self, img: &RgbImage) -> Result<Array3<F>> {
        let (h, w) = (img.height() as usize, img.width() as usize);
        self.layer_plan(h, w)?;
        let probs = softmax_channels(&self.scores(&self.prepare(img))?);
        Ok(probs.index_axis(Axis(0), 0).permuted_axes([1, 2, 0]).to_owned())
    }

    /// Run fully convolutionally over `img` and upsample the built channel
    /// bilinearly to the image size. Grid cell `(i, j)` is anchored at the
    /// centre of its patch, pixel `8i + 31.5`.
    pub fn segment_rgb(&self, img: &RgbImage) -> Result<ProbabilityMap> {
        let (h, w) = (img.height() as usize, img.width() as usize);
        let native = self.native_probabilities(img)?.mapv(|v| v.to_f32().unwrap_or(f32::NAN));
        let built = native.index_axis(Axis(2), 1);
        let centre = (PATCH_PX as f64 - 1.0) / 2.0;
        let values = upsample_grid(built, STRIDE as f64, centre, h, w);
        Ok(ProbabilityMap { values, native })
    }

    pub fn segment(&self, tile: &ImageTile) -> Result<ProbabilityMap> {
        self.segment_rgb(&tile.pixels)
    }

    /// Training forward pass over a window batch; returns `N×2×1×1` scores.
    pub fn forward(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        let t = self.trunk.forward(x)?;
        self.head.forward(&t)
    }

    /// Accumulate parameter gradients from score gradients.
    pub fn backward(&mut self, dscores: &Array4<F>) -> Result<()> {
        let dt = self
            .head
            .backward(dscores, true)?
            .ok_or_else(|| Error::Shape("head produced no input gradient".into()))?;
        self.trunk.backward(&dt, false)?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "arch": "vgg16-blocks1-3+head8x8",
                "config": self.config,
                "mean": self.mean,
                "context_px": CONTEXT_PX,
                "patch_px": PATCH_PX,
            }),
        );
        ck.tensors = self.export("");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected an ssnet checkpoint, found '{}'", ck.kind)));
        }
        let config: SsNetConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad ssnet config: {e}")))?;
        let mean: [f64; 3] = serde_json::from_value(ck.meta["mean"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad ssnet mean: {e}")))?;
        let mut net = Self::new(config, 0)?;
        net.import("", &ck.tensor_map())?;
        net.mean = mean;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Overwrite trunk weights from pretrained tensors named
    /// `features.<idx>.weight` / `features.<idx>.bias`.
    pub fn load_pretrained_trunk(&mut self, ck: &Checkpoint) -> Result<()> {
        self.trunk.import("features", &ck.tensor_map())
    }

    /// Convert weights to another numeric type.
    pub fn cast<G: Real>(&self) -> Result<SsNet<G>> {
        let mut out = SsNet::<G>::new(self.config.clone(), 0)?;
        let tensors = self.export("").into_iter().map(|t| (t.name.clone(), t)).collect();
        out.import("", &tensors)?;
        out.mean = self.mean;
        Ok(out)
    }
}

impl<F: Real> Parameterized<F> for SsNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::nn::Param<F>)) {
        self.trunk.visit(&crate::nn::join(prefix, "features"), f);
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::nn::Param<F>)) {
        self.trunk.visit_mut(&crate::nn::join(prefix, "features"), f);
        self.head.visit_mut(&crate::nn::join(prefix, "head"), f);
    }
}

/// Pixel accuracy and built-class F1 of a thresholded map against a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SegmentationMetrics {
    pub pixel_accuracy: f64,
    pub f1: f64,
}

/// Threshold `pred` and compare with `truth` (non-zero = built).
///
/// With no built pixels in either prediction or truth, F1 is 1; if only
/// one side has built pixels it is 0.
pub fn segmentation_metrics(pred: &ProbabilityMap, truth: &GrayImage, threshold: f64) -> Result<SegmentationMetrics> {
    let (h, w) = pred.values.dim();
    if (truth.width() as usize, truth.height() as usize) != (w, h) {
        return Err(Error::Shape(format!(
            "prediction is {w}×{h} but mask is {}×{}",
            truth.width(),
            truth.height()
        )));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0u64, 0u64, 0u64, 0u64);
    for ((y, x), &p) in pred.values.indexed_iter() {
        let predicted = f64::from(p) >= threshold;
        let actual = truth.get_pixel(x as u32, y as u32).0[0] != 0;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        if predicted == actual {
            correct += 1;
        }
    }
    let f1 = if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok(SegmentationMetrics {
        pixel_accuracy: correct as f64 / (h * w) as f64,
        f1,
    })
}

/// Binary mask from a probability map (for export and comparisons).
pub fn threshold_mask(pred: &ProbabilityMap, threshold: f64) -> GrayImage {
    let (h, w) = pred.values.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if f64::from(pred.values[[y as usize, x as usize]]) >= threshold {
            MASK_BUILT
        } else {
            0
        }])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy_2d;
    use rand::Rng;

    fn slim() -> SsNetConfig {
        SsNetConfig::slim([4, 6, 8], 8)
    }

    fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn shapes_follow_the_size_equation() {
        let net = SsNet::<f32>::new(slim(), 1).unwrap();
        assert_eq!(net.native_size(64, 64).unwrap(), (1, 1));
        assert_eq!(net.native_size(224, 224).unwrap(), (21, 21));
        assert_eq!(net.native_size(96, 96).unwrap(), (5, 5));
        assert_eq!(net.native_size(336, 336).unwrap(), (35, 35));
        assert!(net.native_size(63, 100).is_err());
        let map = net.segment_rgb(&noise(80, 72, 2)).unwrap();
        assert_eq!(map.values.dim(), (72, 80));
        assert_eq!(map.native.dim(), (2, 3, 2));
    }

    #[test]
    fn probability_pairs_sum_to_one() {
        let net = SsNet::<f32>::new(slim(), 3).unwrap();
        let map = net.segment_rgb(&noise(120, 100, 4)).unwrap();
        for lane in map.native.lanes(Axis(2)) {
            assert!((lane.sum() - 1.0).abs() < 1e-5);
        }
        assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn constant_image_gives_flat_map() {
        let net = SsNet::<f32>::new(slim(), 5).unwrap();
        let img = RgbImage::from_pixel(128, 128, image::Rgb([90, 140, 60]));
        let map = net.segment_rgb(&img).unwrap();
        let (lo, hi) = map.values.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo < 1e-3);
    }

    #[test]
    fn fcn_matches_per_window_forward() {
        let net = SsNet::<f64>::new(slim(), 6).unwrap();
        let img = noise(96, 96, 7);
        let native = net.native_probabilities(&img).unwrap();
        let padded = net.prepare(&img);
        for i in 0..5 {
            for j in 0..5 {
                let win = padded.slice(s![.., .., 8 * i..8 * i + WINDOW_PX, 8 * j..8 * j + WINDOW_PX]).to_owned();
                let p = softmax_channels(&net.scores(&win).unwrap());
                assert!((p[[0, 1, 0, 0]] - native[[i, j, 1]]).abs() < 1e-10);
            }
        }
    }

    fn nudge(net: &mut SsNet<f64>, target: &str, k: usize, delta: f64) {
        net.visit_mut("", &mut |name, p| {
            if name == target {
                p.value.as_slice_mut().unwrap()[k] += delta;
            }
        });
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut net = SsNet::<f64>::new(SsNetConfig::slim([2, 3, 4], 3), 8).unwrap();
        let x = net.prepare(&noise(64, 64, 9));
        let labels = [1usize];
        let loss_of = |n: &SsNet<f64>| cross_entropy_2d(&n.scores(&x).unwrap(), &labels).unwrap().0;
        net.zero_grad();
        let scores = net.forward(&x).unwrap();
        let (_, g) = cross_entropy_2d(&scores, &labels).unwrap();
        net.backward(&g).unwrap();
        let mut grads = Vec::new();
        net.visit("", &mut |name, p| {
            if name.starts_with("head.") {
                grads.push((name.to_string(), p.grad.as_slice().unwrap().to_vec()));
            }
        });
        assert_eq!(grads.len(), 4);
        let eps = 1e-6;
        for (name, grad) in &grads {
            for (k, &analytic) in grad.iter().enumerate().take(40) {
                let mut probe = net.clone();
                nudge(&mut probe, name, k, eps);
                let up = loss_of(&probe);
                nudge(&mut probe, name, k, -2.0 * eps);
                let down = loss_of(&probe);
                let numeric = (up - down) / (2.0 * eps);
                let err = (analytic - numeric).abs();
                assert!(
                    err < 1e-9 || err / analytic.abs().max(numeric.abs()) < 1e-4,
                    "{name}[{k}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_output() {
        let mut net = SsNet::<f32>::new(slim(), 10).unwrap();
        net.mean = [0.4, 0.5, 0.3];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        net.save(&path).unwrap();
        let back = SsNet::<f32>::load(&path).unwrap();
        let img = noise(70, 70, 11);
        assert_eq!(net.segment_rgb(&img).unwrap(), back.segment_rgb(&img).unwrap());
    }

    #[test]
    fn npy_and_png_export() {
        let map = ProbabilityMap {
            values: Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) as f32 / 14.0),
            native: Array3::zeros((1, 1, 2)),
        };
        let dir = tempfile::tempdir().unwrap();
        map.save_npy(dir.path().join("p.npy")).unwrap();
        assert_eq!(load_npy_f32(dir.path().join("p.npy")).unwrap(), map.values);
        let g = map.to_gray();
        assert_eq!(g.get_pixel(4, 2).0[0], 255);
        assert_eq!(g.get_pixel(0, 0).0[0], 0);
        assert_eq!(g.get_pixel(2, 1).0[0], (255.0f32 * 7.0 / 14.0).round() as u8);
    }

    #[test]
    fn metrics_conventions() {
        let truth = GrayImage::from_fn(4, 4, |x, _| image::Luma([if x < 2 { 255 } else { 0 }]));
        let exact = ProbabilityMap {
            values: Array2::from_shape_fn((4, 4), |(_, x)| if x < 2 { 1.0 } else { 0.0 }),
            native: Array3::zeros((1, 1, 2)),
        };
        let m = segmentation_metrics(&exact, &truth, 0.5).unwrap();
        assert_eq!((m.pixel_accuracy, m.f1), (1.0, 1.0));
        let flipped = ProbabilityMap {
            values: exact.values.mapv(|v| 1.0 - v),
            native: exact.native.clone(),
        };
        assert_eq!(segmentation_metrics(&flipped, &truth, 0.5).unwrap().pixel_accuracy, 0.0);
        let empty = GrayImage::new(4, 4);
        let none = ProbabilityMap {
            values: Array2::zeros((4, 4)),
            native: exact.native.clone(),
        };
        assert_eq!(segmentation_metrics(&none, &empty, 0.5).unwrap().f1, 1.0);
        assert_eq!(segmentation_metrics(&exact, &empty, 0.5).unwrap().f1, 0.0);
        assert!(segmentation_metrics(&none, &GrayImage::new(3, 4), 0.5).is_err());
    }
}
