//! Patch extraction, SGD training and bootstrap hard-negative mining.

use std::collections::BTreeSet;

use image::{imageops, RgbImage};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{reflect_index, SsNet, CONTEXT_PX, PATCH_PX, STRIDE, WINDOW_PX};
use crate::dataset::{augment_patch_pixels, ImageTile};
use crate::nn::{cross_entropy_2d, softmax_channels, Optimizer, Parameterized, Sgd};
use crate::{Error, Result};

pub const BUILT: usize = 1;
pub const NON_BUILT: usize = 0;

/// A 64×64 patch together with its context border, and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `100×100` pixels; the patch is the central `64×64`.
    pub window: RgbImage,
    /// [`BUILT`] or [`NON_BUILT`].
    pub label: usize,
}

impl PatchSample {
    /// Wrap a bare 64×64 patch, mirroring it outward for context.
    pub fn from_patch(patch: &RgbImage, label: usize) -> Result<Self> {
        if patch.dimensions() != (PATCH_PX as u32, PATCH_PX as u32) {
            return Err(Error::Shape(format!(
                "patch is {}×{}, expected {PATCH_PX}×{PATCH_PX}",
                patch.width(),
                patch.height()
            )));
        }
        Ok(Self {
            window: mirror_pad(patch, CONTEXT_PX),
            label,
        })
    }
}

/// `img` mirrored outward by `m` pixels on every side.
pub(crate) fn mirror_pad(img: &RgbImage, m: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    RgbImage::from_fn((w + 2 * m) as u32, (h + 2 * m) as u32, |x, y| {
        let sx = reflect_index(x as isize - m as isize, w);
        let sy = reflect_index(y as isize - m as isize, h);
        *img.get_pixel(sx as u32, sy as u32)
    })
}

/// A patch is built when at least `min_fraction` of its central
/// `central×central` pixels are built in the mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchLabelRule {
    pub central: usize,
    pub min_fraction: f64,
}

impl Default for PatchLabelRule {
    fn default() -> Self {
        Self {
            central: 16,
            min_fraction: 0.3,
        }
    }
}

/// Cut labelled patches from a masked tile on a `stride` grid.
pub fn extract_patches(tile: &ImageTile, stride: usize, rule: PatchLabelRule) -> Result<Vec<PatchSample>> {
    let mask = tile
        .mask
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("tile {} has no mask", tile.id)))?;
    if stride == 0 || rule.central == 0 || rule.central > PATCH_PX {
        return Err(Error::Config("patch stride and central size must be in range".into()));
    }
    let (w, h) = (tile.width(), tile.height());
    if w < PATCH_PX || h < PATCH_PX {
        return Err(Error::Shape(format!("tile {} is smaller than a patch", tile.id)));
    }
    let padded = mirror_pad(&tile.pixels, CONTEXT_PX);
    let off = (PATCH_PX - rule.central) / 2;
    let area = (rule.central * rule.central) as f64;
    let mut out = Vec::new();
    for y in (0..=h - PATCH_PX).step_by(stride) {
        for x in (0..=w - PATCH_PX).step_by(stride) {
            let mut built = 0usize;
            for yy in y + off..y + off + rule.central {
                for xx in x + off..x + off + rule.central {
                    if mask.get_pixel(xx as u32, yy as u32).0[0] != 0 {
                        built += 1;
                    }
                }
            }
            let label = if built as f64 / area >= rule.min_fraction {
                BUILT
            } else {
                NON_BUILT
            };
            let window = imageops::crop_imm(&padded, x as u32, y as u32, WINDOW_PX as u32, WINDOW_PX as u32).to_image();
            out.push(PatchSample { window, label });
        }
    }
    Ok(out)
}

/// A truly non-built crop (no mask pixel set) used to look for false positives.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningCandidate {
    pub id: String,
    /// The crop with its context border.
    pub window: RgbImage,
}

/// Every fully non-built `size×size` crop of a masked tile on a `stride` grid.
pub fn mining_candidates(tile: &ImageTile, size: usize, stride: usize) -> Result<Vec<MiningCandidate>> {
    let mask = tile
        .mask
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("tile {} has no mask", tile.id)))?;
    if size < PATCH_PX || stride == 0 {
        return Err(Error::Config(format!("mining crops must be at least {PATCH_PX} px")));
    }
    let (w, h) = (tile.width(), tile.height());
    if w < size || h < size {
        return Ok(Vec::new());
    }
    let padded = mirror_pad(&tile.pixels, CONTEXT_PX);
    let mut out = Vec::new();
    for y in (0..=h - size).step_by(stride) {
        for x in (0..=w - size).step_by(stride) {
            let clean = (y..y + size).all(|yy| (x..x + size).all(|xx| mask.get_pixel(xx as u32, yy as u32).0[0] == 0));
            if clean {
                let side = (size + 2 * CONTEXT_PX) as u32;
                out.push(MiningCandidate {
                    id: format!("{}@{},{}", tile.id, x, y),
                    window: imageops::crop_imm(&padded, x as u32, y as u32, side, side).to_image(),
                });
            }
        }
    }
    Ok(out)
}

/// A 64×64 patch at `(y, x)` inside mining candidate `candidate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub candidate: usize,
    pub y: usize,
    pub x: usize,
}

impl PatchRef {
    pub fn window(&self, candidates: &[MiningCandidate]) -> Result<RgbImage> {
        let c = candidates
            .get(self.candidate)
            .ok_or_else(|| Error::Domain(format!("candidate {} out of range", self.candidate)))?;
        Ok(imageops::crop_imm(&c.window, self.x as u32, self.y as u32, WINDOW_PX as u32, WINDOW_PX as u32).to_image())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningState {
    /// Number of the epoch about to run or running (1-based).
    pub epoch_counter: usize,
    pub negative_pool: Vec<PatchRef>,
    pub mining_interval: usize,
    /// Mining rounds performed so far.
    pub rounds: usize,
}

impl MiningState {
    pub fn new(mining_interval: usize) -> Self {
        Self {
            epoch_counter: 0,
            negative_pool: Vec::new(),
            mining_interval,
            rounds: 0,
        }
    }

    pub fn due(&self) -> bool {
        self.mining_interval > 0 && self.epoch_counter > 0 && self.epoch_counter % self.mining_interval == 0
    }
}

/// Built probability at every 64×64 patch position of a candidate.
pub fn candidate_probabilities(net: &SsNet<f32>, candidate: &MiningCandidate) -> Result<Array2<f32>> {
    let x = net.normalize(&candidate.window).insert_axis(Axis(0));
    let probs = softmax_channels(&net.scores(&x)?);
    Ok(probs.index_axis(Axis(0), 0).index_axis(Axis(0), 1).to_owned())
}

/// Highest built probability over a candidate, and where it occurs.
pub fn candidate_score(net: &SsNet<f32>, candidate: &MiningCandidate) -> Result<(f64, (usize, usize))> {
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for ((i, j), &p) in candidate_probabilities(net, candidate)?.indexed_iter() {
        if f64::from(p) > best.0 {
            best = (f64::from(p), (i, j));
        }
    }
    Ok(best)
}

/// Fraction of (truly non-built) candidates the model calls built somewhere.
pub fn false_positive_rate(net: &SsNet<f32>, candidates: &[MiningCandidate], threshold: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Domain("no candidates to score".into()));
    }
    let mut fp = 0;
    for c in candidates {
        if candidate_score(net, c)?.0 > threshold {
            fp += 1;
        }
    }
    Ok(fp as f64 / candidates.len() as f64)
}

/// One bootstrap round: every 64×64 patch position of every candidate whose
/// built probability exceeds `threshold` joins the pool, unless already there.
pub fn mine_hard_negatives(
    net: &SsNet<f32>,
    candidates: &[MiningCandidate],
    state: &MiningState,
    threshold: f64,
) -> Result<MiningState> {
    if !state.due() {
        return Err(Error::Domain(format!(
            "mining runs every {} epochs; epoch {} is not a mining epoch",
            state.mining_interval, state.epoch_counter
        )));
    }
    let mut next = state.clone();
    next.rounds += 1;
    if candidates.is_empty() {
        log::info!("mining round {}: empty candidate pool", next.rounds);
        return Ok(next);
    }
    let pooled: BTreeSet<(usize, usize, usize)> =
        state.negative_pool.iter().map(|r| (r.candidate, r.y, r.x)).collect();
    let mut added = 0;
    for (idx, c) in candidates.iter().enumerate() {
        for ((i, j), &p) in candidate_probabilities(net, c)?.indexed_iter() {
            let (y, x) = (i * STRIDE, j * STRIDE);
            if f64::from(p) > threshold && !pooled.contains(&(idx, y, x)) {
                next.negative_pool.push(PatchRef { candidate: idx, y, x });
                added += 1;
            }
        }
    }
    log::info!(
        "mining round {} at epoch {}: {added} new hard negatives, pool {}",
        next.rounds,
        state.epoch_counter,
        next.negative_pool.len()
    );
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsNetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mining_interval: usize,
    pub mining_threshold: f64,
    /// Expand each patch into its five augmentations.
    pub augment: bool,
    pub seed: u64,
}

impl Default for SsNetTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 45,
            batch_size: 16,
            lr: 1e-5,
            momentum: 0.9,
            weight_decay: 0.0,
            mining_interval: 15,
            mining_threshold: 0.5,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Hard negatives added at the start of this epoch, if mining ran.
    pub mined: Option<usize>,
    pub pool_size: usize,
    pub samples: usize,
}

/// Epoch-at-a-time SS-Net trainer.
pub struct SsNetTrainer<'a> {
    pub net: SsNet<f32>,
    pub config: SsNetTrainConfig,
    pub state: MiningState,
    pub history: Vec<EpochStats>,
    samples: Vec<(RgbImage, usize)>,
    candidates: &'a [MiningCandidate],
    optimizer: Sgd<f32>,
    rng: ChaCha8Rng,
}

fn expand(window: RgbImage, label: usize, augment: bool, out: &mut Vec<(RgbImage, usize)>) {
    if augment {
        out.extend(augment_patch_pixels(&window).into_iter().map(|w| (w, label)));
    } else {
        out.push((window, label));
    }
}

impl<'a> SsNetTrainer<'a> {
    /// Sets the network's input mean from `train` and prepares the sample set.
    pub fn new(
        mut net: SsNet<f32>,
        train: &[PatchSample],
        candidates: &'a [MiningCandidate],
        config: SsNetTrainConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Training("no training patches".into()));
        }
        if config.batch_size == 0 || !(config.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        let mut sums = [0f64; 3];
        let mut labels = BTreeSet::new();
        for s in train {
            if s.window.dimensions() != (WINDOW_PX as u32, WINDOW_PX as u32) {
                return Err(Error::Shape(format!(
                    "training window is {}×{}, expected {WINDOW_PX}×{WINDOW_PX}",
                    s.window.width(),
                    s.window.height()
                )));
            }
            for p in s.window.pixels() {
                for (acc, v) in sums.iter_mut().zip(p.0) {
                    *acc += f64::from(v) / 255.0;
                }
            }
            labels.insert(s.label);
        }
        if labels.len() < 2 {
            log::warn!("training stream holds a single class; SS-Net training is degenerate");
        }
        let n = (train.len() * WINDOW_PX * WINDOW_PX) as f64;
        net.mean = sums.map(|s| s / n);
        let mut samples = Vec::new();
        for s in train {
            expand(s.window.clone(), s.label, config.augment, &mut samples);
        }
        Ok(Self {
            net,
            state: MiningState::new(config.mining_interval),
            history: Vec::new(),
            samples,
            candidates,
            optimizer: Sgd::new(config.lr, config.momentum, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Mean cross-entropy over the current sample set, in inference mode.
    pub fn evaluate_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for chunk in self.samples.chunks(self.config.batch_size) {
            let windows: Vec<&RgbImage> = chunk.iter().map(|(w, _)| w).collect();
            let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
            let scores = self.net.scores(&self.net.window_batch(&windows)?)?;
            let (loss, _) = cross_entropy_2d(&scores, &labels)?;
            total += f64::from(loss) * chunk.len() as f64;
        }
        Ok(total / self.samples.len() as f64)
    }

    /// Run one epoch, mining first when the epoch number is a multiple of the interval.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        self.state.epoch_counter += 1;
        let mut mined = None;
        if self.state.due() {
            let before = self.state.negative_pool.len();
            let next = mine_hard_negatives(&self.net, self.candidates, &self.state, self.config.mining_threshold)?;
            for r in &next.negative_pool[before..] {
                expand(r.window(self.candidates)?, super::train::NON_BUILT, self.config.augment, &mut self.samples);
            }
            mined = Some(next.negative_pool.len() - before);
            self.state = next;
        }
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let windows: Vec<&RgbImage> = batch.iter().map(|&i| &self.samples[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| self.samples[i].1).collect();
            let x = self.net.window_batch(&windows)?;
            self.net.zero_grad();
            let scores = self.net.forward(&x)?;
            let (loss, grad) = cross_entropy_2d(&scores, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite SS-Net loss at epoch {}",
                    self.state.epoch_counter
                )));
            }
            self.net.backward(&grad)?;
            self.optimizer.step(&mut self.net);
            total += f64::from(loss) * batch.len() as f64;
        }
        let stats = EpochStats {
            epoch: self.state.epoch_counter,
            loss: total / self.samples.len() as f64,
            mined,
            pool_size: self.state.negative_pool.len(),
            samples: self.samples.len(),
        };
        log::debug!("ssnet epoch {}: loss {:.5}", stats.epoch, stats.loss);
        self.history.push(stats.clone());
        Ok(stats)
    }

    pub fn into_parts(self) -> (SsNet<f32>, Vec<EpochStats>, MiningState) {
        (self.net, self.history, self.state)
    }
}

/// Train for `config.epochs` epochs with periodic hard-negative mining.
pub fn train_ssnet(
    net: SsNet<f32>,
    train: &[PatchSample],
    candidates: &[MiningCandidate],
    config: SsNetTrainConfig,
) -> Result<(SsNet<f32>, Vec<EpochStats>, MiningState)> {
    let epochs = config.epochs;
    let mut trainer = SsNetTrainer::new(net, train, candidates, config)?;
    for _ in 0..epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}
