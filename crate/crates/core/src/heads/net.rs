//! Fully connected regression heads over precomputed features.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pooling::global_average;
use crate::nn::{join, Activation, Dropout, Linear, Param, Parameterized, Real};
use crate::{Error, Result};

/// Width of the first fully connected layer of every stream.
pub const STREAM_WIDTH: usize = 512;
/// Width of the second fully connected layer.
pub const BOTTLENECK_WIDTH: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.6;
pub const LEAKY_SLOPE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountKind {
    Drc,
    Gwap,
    Ccpp,
    Fusion,
}

impl CountKind {
    pub const ALL: [CountKind; 4] = [CountKind::Drc, CountKind::Gwap, CountKind::Ccpp, CountKind::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            CountKind::Drc => "drc",
            CountKind::Gwap => "gwap",
            CountKind::Ccpp => "ccpp",
            CountKind::Fusion => "fusion",
        }
    }

    /// Attention kinds weight the volume by a segmentation map.
    pub fn needs_ssnet(self) -> bool {
        self != CountKind::Drc
    }

    pub fn streams(self) -> &'static [StreamKind] {
        match self {
            CountKind::Drc => &[StreamKind::Drc],
            CountKind::Gwap => &[StreamKind::Gwap],
            CountKind::Ccpp => &[StreamKind::Ccpp],
            CountKind::Fusion => &[StreamKind::Drc, StreamKind::Gwap, StreamKind::Ccpp],
        }
    }

    /// DRC trains on mean squared error, the attention kinds on batch RMSE.
    pub fn uses_rmse(self) -> bool {
        self != CountKind::Drc
    }

    fn tail_activation(self) -> Activation {
        match self {
            CountKind::Drc => Activation::Relu,
            _ => Activation::LeakyRelu(LEAKY_SLOPE),
        }
    }
}

impl std::fmt::Display for CountKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CountKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drc" => Ok(CountKind::Drc),
            "gwap" => Ok(CountKind::Gwap),
            "ccpp" => Ok(CountKind::Ccpp),
            "fusion" | "fusionnet" => Ok(CountKind::Fusion),
            _ => Err(Error::Config(format!("unknown model kind '{s}' (drc, gwap, ccpp, fusion)"))),
        }
    }
}

/// The input path of one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    /// Plain pooled backbone features.
    Drc,
    /// Global weighted average of the attended volume.
    Gwap,
    /// Flattened `1×1` convolution of the attended volume.
    Ccpp,
}

impl StreamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Drc => "drc",
            StreamKind::Gwap => "gwap",
            StreamKind::Ccpp => "ccpp",
        }
    }

    fn activation(self) -> Activation {
        match self {
            StreamKind::Drc => Activation::Relu,
            _ => Activation::LeakyRelu(LEAKY_SLOPE),
        }
    }
}

/// Frozen inputs of one image: the pooled vector and, for attention
/// kinds, the probability-weighted volume.
#[derive(Clone, Debug, PartialEq)]
pub struct CountFeatures {
    pub pooled: Array1<f32>,
    pub weighted: Option<Array3<f32>>,
}

/// Stacked inputs for a batch.
#[derive(Clone, Debug)]
pub struct HeadBatch<F: Real> {
    pub pooled: Array2<F>,
    pub gwap: Option<Array2<F>>,
    pub weighted: Option<Array4<F>>,
}

impl<F: Real> HeadBatch<F> {
    pub fn from_features(items: &[&CountFeatures]) -> Result<Self> {
        let n = items.len();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let c = items[0].pooled.len();
        let mut pooled = Array2::<F>::zeros((n, c));
        for (mut row, f) in pooled.outer_iter_mut().zip(items) {
            if f.pooled.len() != c {
                return Err(Error::Shape("pooled feature lengths differ within a batch".into()));
            }
            row.assign(&f.pooled.mapv(|v| F::from_f32(v).unwrap_or_else(F::zero)));
        }
        let (gwap, weighted) = match &items[0].weighted {
            None => (None, None),
            Some(first) => {
                let (wc, h, w) = first.dim();
                let mut vol = Array4::<F>::zeros((n, wc, h, w));
                for (mut dst, f) in vol.outer_iter_mut().zip(items) {
                    let src = f
                        .weighted
                        .as_ref()
                        .ok_or_else(|| Error::Shape("batch mixes attended and plain features".into()))?;
                    if src.dim() != (wc, h, w) {
                        return Err(Error::Shape("weighted volume shapes differ within a batch".into()));
                    }
                    Zip::from(&mut dst).and(src).for_each(|d, &s| *d = F::from_f32(s).unwrap_or_else(F::zero));
                }
                let mut g = Array2::<F>::zeros((n, wc));
                for (mut row, v) in g.outer_iter_mut().zip(vol.outer_iter()) {
                    row.assign(&global_average(v));
                }
                (Some(g), Some(vol))
            }
        };
        Ok(Self { pooled, gwap, weighted })
    }

    pub fn len(&self) -> usize {
        self.pooled.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The learnable `1×1` convolution of the CCPP stream.
#[derive(Clone, Debug)]
pub struct PointwiseConv<F: Real> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> PointwiseConv<F> {
    fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::he_normal(&[channels], channels, rng),
            bias: Param::zeros(&[1]),
        }
    }

    fn w(&self) -> ndarray::ArrayView1<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix1>().expect("1-d")
    }

    /// `N×C×h×w` to `N×(h·w)`, flattened row-major.
    fn apply(&self, x: &Array4<F>) -> Result<Array2<F>> {
        let (n, c, h, w) = x.dim();
        let wv = self.w();
        let b = self.bias.value[[0]];
        let mut out = Array2::<F>::zeros((n, h * w));
        for (mut row, v) in out.outer_iter_mut().zip(x.outer_iter()) {
            let map = super::pooling::ccpp(v, wv, b)?;
            row.assign(&map.into_shape_with_order(h * w).map_err(|e| Error::Shape(e.to_string()))?);
        }
        debug_assert_eq!(c, wv.len());
        Ok(out)
    }

    fn backward(&mut self, x: &Array4<F>, dy: &Array2<F>) {
        let (_, _, h, w) = x.dim();
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
        for (v, drow) in x.outer_iter().zip(dy.outer_iter()) {
            let d = drow.into_shape_with_order((h, w)).expect("row is h·w");
            for (g, plane) in gw.iter_mut().zip(v.outer_iter()) {
                *g += Zip::from(&plane).and(&d).fold(F::zero(), |a, &p, &q| a + p * q);
            }
        }
        self.bias.grad[[0]] += dy.sum();
    }
}

/// One input stream truncated at its 512-unit layer.
#[derive(Clone, Debug)]
pub struct Stream<F: Real> {
    pub kind: StreamKind,
    pub conv: Option<PointwiseConv<F>>,
    pub fc: Linear<F>,
}

impl<F: Real> Stream<F> {
    fn input(&self, batch: &HeadBatch<F>) -> Result<Array2<F>> {
        let missing = || Error::Config(format!("{} stream needs probability-weighted features", self.kind.as_str()));
        match self.kind {
            StreamKind::Drc => Ok(batch.pooled.clone()),
            StreamKind::Gwap => batch.gwap.clone().ok_or_else(missing),
            StreamKind::Ccpp => {
                let vol = batch.weighted.as_ref().ok_or_else(missing)?;
                self.conv.as_ref().expect("ccpp stream has a convolution").apply(vol)
            }
        }
    }

    fn prefix(&self) -> &'static str {
        self.kind.as_str()
    }
}

/// Recorded activations of a training pass.
#[derive(Clone, Debug)]
struct Trace<F: Real> {
    stream_pre: Vec<Array2<F>>,
    fused_mask: Array2<F>,
    tail_pre: Vec<Array2<F>>,
    tail_masks: Vec<Array2<F>>,
}

/// The learnable part of a counting model.
#[derive(Clone, Debug)]
pub struct Heads<F: Real> {
    pub kind: CountKind,
    pub streams: Vec<Stream<F>>,
    /// `512→32→1`, or `1536→512→32→1` after fusion.
    pub tail: Vec<Linear<F>>,
    pub dropout: Dropout,
    trace: Option<Trace<F>>,
}

impl<F: Real> Heads<F> {
    /// `channels` is the backbone depth and `grid` its output `h×w`.
    pub fn new(kind: CountKind, channels: usize, grid: (usize, usize), dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let streams: Vec<Stream<F>> = kind
            .streams()
            .iter()
            .map(|&sk| {
                let (conv, inputs) = match sk {
                    StreamKind::Ccpp => (Some(PointwiseConv::new(channels, &mut rng)), grid.0 * grid.1),
                    _ => (None, channels),
                };
                Stream {
                    kind: sk,
                    conv,
                    fc: Linear::new(inputs, STREAM_WIDTH, &mut rng),
                }
            })
            .collect();
        let fused = streams.len() * STREAM_WIDTH;
        let mut widths = vec![fused];
        if streams.len() > 1 {
            widths.push(STREAM_WIDTH);
        }
        widths.extend([BOTTLENECK_WIDTH, 1]);
        let tail = widths.windows(2).map(|p| Linear::new(p[0], p[1], &mut rng)).collect();
        Self {
            kind,
            streams,
            tail,
            dropout: Dropout::new(dropout),
            trace: None,
        }
    }

    /// Width of the concatenated stream activations.
    pub fn fused_width(&self) -> usize {
        self.streams.len() * STREAM_WIDTH
    }

    /// Post-activation 512-unit outputs of each stream, in stream order.
    pub fn stream_activations(&self, batch: &HeadBatch<F>) -> Result<Vec<Array2<F>>> {
        self.streams
            .iter()
            .map(|s| Ok(s.kind.activation().apply(&s.fc.infer(&s.input(batch)?)?)))
            .collect()
    }

    /// Deterministic predictions.
    pub fn infer(&self, batch: &HeadBatch<F>) -> Result<Array1<F>> {
        let acts = self.stream_activations(batch)?;
        let views: Vec<_> = acts.iter().map(|a| a.view()).collect();
        let mut z = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let act = self.kind.tail_activation();
        let last = self.tail.len() - 1;
        for (i, layer) in self.tail.iter().enumerate() {
            z = layer.infer(&z)?;
            if i != last {
                z = act.apply(&z);
            }
        }
        Ok(z.column(0).to_owned())
    }

    /// Training pass with dropout; call [`Heads::backward`] afterwards.
    pub fn forward<R: Rng + ?Sized>(&mut self, batch: &HeadBatch<F>, rng: &mut R) -> Result<Array1<F>> {
        let mut stream_pre = Vec::with_capacity(self.streams.len());
        let mut acts = Vec::with_capacity(self.streams.len());
        for s in &mut self.streams {
            let x = s.input(batch)?;
            let pre = s.fc.forward(&x)?;
            acts.push(s.kind.activation().apply(&pre));
            stream_pre.push(pre);
        }
        let views: Vec<_> = acts.iter().map(|a| a.view()).collect();
        let mut z = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let fused_mask = self.dropout.mask(&z, rng);
        z *= &fused_mask;
        let act = self.kind.tail_activation();
        let last = self.tail.len() - 1;
        let (mut tail_pre, mut tail_masks) = (Vec::new(), Vec::new());
        for i in 0..self.tail.len() {
            let pre = self.tail[i].forward(&z)?;
            if i == last {
                z = pre;
            } else {
                let mask = self.dropout.mask(&pre, rng);
                z = act.apply(&pre) * &mask;
                tail_pre.push(pre);
                tail_masks.push(mask);
            }
        }
        self.trace = Some(Trace {
            stream_pre,
            fused_mask,
            tail_pre,
            tail_masks,
        });
        Ok(z.column(0).to_owned())
    }

    /// Accumulate gradients from `d loss / d prediction`.
    pub fn backward(&mut self, batch: &HeadBatch<F>, dpred: &Array1<F>) -> Result<()> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::Training("head backward without forward".into()))?;
        let act = self.kind.tail_activation();
        let mut dz = dpred.view().insert_axis(Axis(1)).to_owned();
        for i in (0..self.tail.len()).rev() {
            if i != self.tail.len() - 1 {
                dz = act.backward(&trace.tail_pre[i], &(dz * &trace.tail_masks[i]));
            }
            dz = self.tail[i].backward(&dz)?;
        }
        dz *= &trace.fused_mask;
        for (k, s) in self.streams.iter_mut().enumerate() {
            let part = dz.slice(s![.., k * STREAM_WIDTH..(k + 1) * STREAM_WIDTH]).to_owned();
            let dpre = s.kind.activation().backward(&trace.stream_pre[k], &part);
            let dx = s.fc.backward(&dpre)?;
            if let Some(conv) = s.conv.as_mut() {
                let vol = batch
                    .weighted
                    .as_ref()
                    .ok_or_else(|| Error::Training("ccpp backward without weighted features".into()))?;
                conv.backward(vol, &dx);
            }
        }
        Ok(())
    }

    /// Set the output bias, e.g. to the mean training count.
    pub fn set_output_bias(&mut self, value: f64) {
        let last = self.tail.last_mut().expect("tail is never empty");
        last.bias.value.fill(crate::nn::real(value));
    }

    /// Copy stream parameters from a separately trained single-stream model.
    pub fn warm_start_from(&mut self, other: &Heads<F>) -> Result<usize> {
        let mut copied = 0;
        for src in &other.streams {
            if let Some(dst) = self.streams.iter_mut().find(|s| s.kind == src.kind) {
                if dst.fc.weight.value.shape() != src.fc.weight.value.shape() {
                    return Err(Error::Config(format!(
                        "{} stream shapes differ; cannot warm-start",
                        src.kind.as_str()
                    )));
                }
                *dst = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

impl<F: Real> Parameterized<F> for Heads<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for s in &self.streams {
            let p = join(prefix, s.prefix());
            if let Some(conv) = &s.conv {
                f(&join(&p, "conv.weight"), &conv.weight);
                f(&join(&p, "conv.bias"), &conv.bias);
            }
            s.fc.visit(&join(&p, "fc"), f);
        }
        for (i, layer) in self.tail.iter().enumerate() {
            layer.visit(&join(prefix, &format!("tail.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for s in &mut self.streams {
            let p = join(prefix, s.prefix());
            if let Some(conv) = &mut s.conv {
                f(&join(&p, "conv.weight"), &mut conv.weight);
                f(&join(&p, "conv.bias"), &mut conv.bias);
            }
            s.fc.visit_mut(&join(&p, "fc"), f);
        }
        for (i, layer) in self.tail.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("tail.{i}")), f);
        }
    }
}

/// Features of a single volume: convenience for tests and tools.
pub fn features_from_volume(volume: ArrayView3<f32>, prob: Option<ndarray::ArrayView2<f32>>) -> Result<CountFeatures> {
    let pooled = global_average(volume);
    let weighted = match prob {
        Some(p) => Some(super::pooling::weight_volume(volume, p)?),
        None => None,
    };
    Ok(CountFeatures { pooled, weighted })
}
