//! Frozen feature extractors.
//!
//! Two networks implement [`FeatureExtractor`]: a DenseNet-121 feature
//! stack (inference only, torchvision parameter names, so converted
//! ImageNet weights load directly) and a small randomly initialised CNN for
//! fast offline runs. Pixels are scaled to `[0, 1]` with no mean
//! subtraction.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{concatenate, Array1, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::dataset::ImageTile;
use crate::nn::{avg_pool2d, join, output_size, BatchNorm2d, Conv2d, ConvLayer, MaxPool2d, Param, Parameterized, Sequential};
use crate::{Error, Result};

/// A deterministic image-to-volume map with fixed weights.
pub trait FeatureExtractor: Send + Sync {
    /// Text that identifies the network and its weights.
    fn descriptor(&self) -> String;
    fn channels(&self) -> usize;
    fn stride(&self) -> usize;
    /// Output `(h, w)` for an `H×W` input; errors when the input is too small.
    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)>;
    /// `N×3×H×W` batch of `[0,1]` pixels to `N×C×h×w` features.
    fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>>;
    fn parameters(&self) -> Vec<NamedTensor>;
}

/// `C×h×w` features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub values: Array3<f32>,
    pub source_size: (usize, usize),
}

impl FeatureVolume {
    /// Per-channel spatial mean.
    pub fn pooled(&self) -> Array1<f32> {
        let (_, h, w) = self.values.dim();
        self.values.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f32
    }
}

/// A shared, frozen extractor.
#[derive(Clone)]
pub struct BackboneHandle {
    pub net: Arc<dyn FeatureExtractor>,
    pub spec: BackboneSpec,
    /// Always true: counting heads never update backbone weights.
    pub frozen: bool,
}

impl fmt::Debug for BackboneHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BackboneHandle({})", self.descriptor())
    }
}

impl BackboneHandle {
    pub fn descriptor(&self) -> String {
        self.net.descriptor()
    }

    pub fn stride(&self) -> usize {
        self.net.stride()
    }

    pub fn channels(&self) -> usize {
        self.net.channels()
    }
}

/// How to build a backbone; its text form is stored in counting checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneSpec {
    /// `tiny-cnn:seed=N`
    TinyCnn { seed: u64 },
    /// `densenet121` (random weights, seed 0), `densenet121:seed=N`, or
    /// `densenet121:path=<checkpoint>`
    DenseNet121 { weights: Option<PathBuf>, seed: u64 },
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneSpec::TinyCnn { seed } => write!(f, "tiny-cnn:seed={seed}"),
            BackboneSpec::DenseNet121 { weights: Some(p), .. } => write!(f, "densenet121:path={}", p.display()),
            BackboneSpec::DenseNet121 { weights: None, seed } => write!(f, "densenet121:seed={seed}"),
        }
    }
}

impl FromStr for BackboneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let (key, value) = arg.split_once('=').unwrap_or((arg, ""));
        let seed = || -> Result<u64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad seed in backbone '{s}'")))
        };
        match (name, key) {
            ("tiny-cnn", "") => Ok(BackboneSpec::TinyCnn { seed: 0 }),
            ("tiny-cnn", "seed") => Ok(BackboneSpec::TinyCnn { seed: seed()? }),
            ("densenet121", "") => Ok(BackboneSpec::DenseNet121 { weights: None, seed: 0 }),
            ("densenet121", "seed") => Ok(BackboneSpec::DenseNet121 { weights: None, seed: seed()? }),
            ("densenet121", "path") if !value.is_empty() => Ok(BackboneSpec::DenseNet121 {
                weights: Some(PathBuf::from(value)),
                seed: 0,
            }),
            _ => Err(Error::Config(format!(
                "unknown backbone '{s}' (expected tiny-cnn[:seed=N] or densenet121[:seed=N|:path=FILE])"
            ))),
        }
    }
}

impl BackboneSpec {
    pub fn build(&self) -> Result<BackboneHandle> {
        let net: Arc<dyn FeatureExtractor> = match self {
            BackboneSpec::TinyCnn { seed } => Arc::new(TinyCnn::new(*seed)),
            BackboneSpec::DenseNet121 { weights, seed } => {
                let mut net = DenseNet121::new(*seed);
                if let Some(path) = weights {
                    net.load_weights(&Checkpoint::load(path)?)?;
                    net.descriptor = self.to_string();
                }
                Arc::new(net)
            }
        };
        Ok(BackboneHandle {
            net,
            spec: self.clone(),
            frozen: true,
        })
    }
}

/// `1×3×H×W` tensor of `[0,1]` pixels; no mean subtraction.
pub fn image_tensor(img: &RgbImage) -> Array4<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array4::<f32>::zeros((1, 3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[0, ch, y as usize, x as usize]] = f32::from(p.0[ch]) / 255.0;
        }
    }
    out
}

pub fn extract_volume_rgb(handle: &BackboneHandle, img: &RgbImage) -> Result<FeatureVolume> {
    let (h, w) = (img.height() as usize, img.width() as usize);
    handle.net.output_hw(h, w)?;
    let out = handle.net.forward(&image_tensor(img))?;
    Ok(FeatureVolume {
        values: out.index_axis(Axis(0), 0).to_owned(),
        source_size: (h, w),
    })
}

pub fn extract_volume(handle: &BackboneHandle, tile: &ImageTile) -> Result<FeatureVolume> {
    extract_volume_rgb(handle, &tile.pixels)
}

/// Global average pooled features.
pub fn extract_pooled(handle: &BackboneHandle, tile: &ImageTile) -> Result<Array1<f32>> {
    Ok(extract_volume(handle, tile)?.pooled())
}

/// Five 3×3 same-padded convolution + ReLU + 2×2 max-pool stages.
#[derive(Clone, Debug)]
pub struct TinyCnn {
    pub seed: u64,
    pub layers: Sequential<f32>,
}

pub const TINY_WIDTHS: [usize; 5] = [8, 16, 32, 64, 64];

impl TinyCnn {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c = 3;
        for w in TINY_WIDTHS {
            layers.push(ConvLayer::Conv(Conv2d::new(c, w, 3, 1, 1, &mut rng)));
            layers.push(ConvLayer::relu());
            layers.push(ConvLayer::MaxPool(MaxPool2d::new(2, 2, 0)));
            c = w;
        }
        Self {
            seed,
            layers: Sequential::new(layers),
        }
    }
}

impl FeatureExtractor for TinyCnn {
    fn descriptor(&self) -> String {
        format!("tiny-cnn:seed={}", self.seed)
    }

    fn channels(&self) -> usize {
        TINY_WIDTHS[4]
    }

    fn stride(&self) -> usize {
        32
    }

    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, ho, wo) = *self
            .layers
            .plan((3, h, w))
            .map_err(|_| Error::Shape(format!("tiny-cnn needs at least 32×32 pixels, got {h}×{w}")))?
            .last()
            .expect("layers");
        Ok((ho, wo))
    }

    fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let (_, _, h, w) = x.dim();
        self.output_hw(h, w)?;
        self.layers.infer(x)
    }

    fn parameters(&self) -> Vec<NamedTensor> {
        self.layers.export("features")
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    norm1: BatchNorm2d<f32>,
    conv1: Conv2d<f32>,
    norm2: BatchNorm2d<f32>,
    conv2: Conv2d<f32>,
}

#[derive(Clone, Debug)]
struct Transition {
    norm: BatchNorm2d<f32>,
    conv: Conv2d<f32>,
}

const GROWTH: usize = 32;
const BN_SIZE: usize = 4;
const BLOCKS: [usize; 4] = [6, 12, 24, 16];

/// DenseNet-121 convolutional features (through `norm5` and the final ReLU).
#[derive(Clone, Debug)]
pub struct DenseNet121 {
    descriptor: String,
    conv0: Conv2d<f32>,
    norm0: BatchNorm2d<f32>,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: BatchNorm2d<f32>,
}

fn relu(x: Array4<f32>) -> Array4<f32> {
    x.mapv_into(|v| v.max(0.0))
}

impl DenseNet121 {
    /// Randomly initialised network (He-normal convolutions, identity norms).
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = 64;
        let conv0 = Conv2d::new(3, c, 7, 2, 3, &mut rng);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (b, &n) in BLOCKS.iter().enumerate() {
            let mut layers = Vec::new();
            for _ in 0..n {
                layers.push(DenseLayer {
                    norm1: BatchNorm2d::new(c),
                    conv1: Conv2d::new(c, BN_SIZE * GROWTH, 1, 1, 0, &mut rng),
                    norm2: BatchNorm2d::new(BN_SIZE * GROWTH),
                    conv2: Conv2d::new(BN_SIZE * GROWTH, GROWTH, 3, 1, 1, &mut rng),
                });
                c += GROWTH;
            }
            blocks.push(layers);
            if b + 1 < BLOCKS.len() {
                transitions.push(Transition {
                    norm: BatchNorm2d::new(c),
                    conv: Conv2d::new(c, c / 2, 1, 1, 0, &mut rng),
                });
                c /= 2;
            }
        }
        Self {
            descriptor: format!("densenet121:seed={seed}"),
            conv0,
            norm0: BatchNorm2d::new(64),
            blocks,
            transitions,
            norm5: BatchNorm2d::new(c),
        }
    }

    /// Load torchvision-named `features.*` tensors.
    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<()> {
        self.import("", &ck.tensor_map())
    }
}

impl Parameterized<f32> for DenseNet121 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f32>)) {
        let p = join(prefix, "features");
        // convolutions carry no bias in this architecture
        f(&join(&p, "conv0.weight"), &self.conv0.weight);
        self.norm0.visit(&join(&p, "norm0"), f);
        for (b, layers) in self.blocks.iter().enumerate() {
            for (l, layer) in layers.iter().enumerate() {
                let lp = join(&p, &format!("denseblock{}.denselayer{}", b + 1, l + 1));
                layer.norm1.visit(&join(&lp, "norm1"), f);
                f(&join(&lp, "conv1.weight"), &layer.conv1.weight);
                layer.norm2.visit(&join(&lp, "norm2"), f);
                f(&join(&lp, "conv2.weight"), &layer.conv2.weight);
            }
            if let Some(t) = self.transitions.get(b) {
                let tp = join(&p, &format!("transition{}", b + 1));
                t.norm.visit(&join(&tp, "norm"), f);
                f(&join(&tp, "conv.weight"), &t.conv.weight);
            }
        }
        self.norm5.visit(&join(&p, "norm5"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        let p = join(prefix, "features");
        f(&join(&p, "conv0.weight"), &mut self.conv0.weight);
        self.norm0.visit_mut(&join(&p, "norm0"), f);
        for (b, layers) in self.blocks.iter_mut().enumerate() {
            for (l, layer) in layers.iter_mut().enumerate() {
                let lp = join(&p, &format!("denseblock{}.denselayer{}", b + 1, l + 1));
                layer.norm1.visit_mut(&join(&lp, "norm1"), f);
                f(&join(&lp, "conv1.weight"), &mut layer.conv1.weight);
                layer.norm2.visit_mut(&join(&lp, "norm2"), f);
                f(&join(&lp, "conv2.weight"), &mut layer.conv2.weight);
            }
            if let Some(t) = self.transitions.get_mut(b) {
                let tp = join(&p, &format!("transition{}", b + 1));
                t.norm.visit_mut(&join(&tp, "norm"), f);
                f(&join(&tp, "conv.weight"), &mut t.conv.weight);
            }
        }
        self.norm5.visit_mut(&join(&p, "norm5"), f);
    }
}

impl FeatureExtractor for DenseNet121 {
    fn descriptor(&self) -> String {
        self.descriptor.clone()
    }

    fn channels(&self) -> usize {
        self.norm5.channels()
    }

    fn stride(&self) -> usize {
        32
    }

    fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let side = |n: usize| -> Result<usize> {
            let mut n = output_size(n, 3, 7, 2)?;
            n = output_size(n, 1, 3, 2)?;
            for _ in 0..3 {
                n = output_size(n, 0, 2, 2)?;
            }
            Ok(n)
        };
        match (side(h), side(w)) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(Error::Shape(format!("densenet121 needs at least 29×29 pixels, got {h}×{w}"))),
        }
    }

    fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let (_, _, h, w) = x.dim();
        self.output_hw(h, w)?;
        let mut cur = relu(self.norm0.infer(&self.conv0.infer(x)?)?);
        cur = MaxPool2d::new(3, 2, 1).infer(&cur)?;
        for (b, layers) in self.blocks.iter().enumerate() {
            for layer in layers {
                let y = relu(layer.norm1.infer(&cur)?);
                let y = layer.conv1.infer(&y)?;
                let y = relu(layer.norm2.infer(&y)?);
                let y = layer.conv2.infer(&y)?;
                cur = concatenate(Axis(1), &[cur.view(), y.view()]).map_err(|e| Error::Shape(e.to_string()))?;
            }
            if let Some(t) = self.transitions.get(b) {
                let y = relu(t.norm.infer(&cur)?);
                cur = avg_pool2d(&t.conv.infer(&y)?, 2, 2)?;
            }
        }
        Ok(relu(self.norm5.infer(&cur)?))
    }

    fn parameters(&self) -> Vec<NamedTensor> {
        self.export("")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tile(fill: u8) -> ImageTile {
        ImageTile::new("t", RgbImage::from_pixel(336, 336, image::Rgb([fill, fill / 2, 200])), 0)
    }

    #[test]
    fn tiny_shapes_and_determinism() {
        let h = BackboneSpec::TinyCnn { seed: 1 }.build().unwrap();
        let v = extract_volume(&h, &tile(128)).unwrap();
        assert_eq!(v.values.dim(), (64, 10, 10));
        assert_eq!(v, extract_volume(&h, &tile(128)).unwrap());
        assert_ne!(v, extract_volume(&h, &tile(0)).unwrap());
        assert!(extract_volume_rgb(&h, &RgbImage::new(31, 64)).is_err());
        assert!(h.frozen);
    }

    #[test]
    fn pooled_is_spatial_mean() {
        let h = BackboneSpec::TinyCnn { seed: 2 }.build().unwrap();
        let t = ImageTile::new(
            "n",
            RgbImage::from_fn(100, 140, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, ((x * y) % 256) as u8])),
            0,
        );
        let v = extract_volume(&h, &t).unwrap();
        let p = extract_pooled(&h, &t).unwrap();
        let (c, hh, ww) = v.values.dim();
        for ch in 0..c {
            let mut acc = 0.0f64;
            for y in 0..hh {
                for x in 0..ww {
                    acc += f64::from(v.values[[ch, y, x]]);
                }
            }
            assert!((acc / (hh * ww) as f64 - f64::from(p[ch])).abs() < 1e-5);
        }
        let constant = FeatureVolume {
            values: Array3::from_elem((3, 4, 5), 2.5),
            source_size: (0, 0),
        };
        assert!(constant.pooled().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn densenet_shape_ladder() {
        let net = DenseNet121::new(0);
        assert_eq!(net.output_hw(336, 336).unwrap(), (10, 10));
        assert_eq!(net.output_hw(224, 224).unwrap(), (7, 7));
        assert_eq!(net.channels(), 1024);
        let out = net.forward(&image_tensor(&RgbImage::from_pixel(64, 64, image::Rgb([10, 200, 30])))).unwrap();
        assert_eq!(out.dim(), (1, 1024, 2, 2));
        let names: Vec<String> = net.parameters().into_iter().map(|t| t.name).collect();
        assert!(names.contains(&"features.denseblock3.denselayer24.conv2.weight".to_string()));
        assert!(names.contains(&"features.norm5.running_var".to_string()));
    }

    #[test]
    fn densenet_weights_round_trip() {
        let a = DenseNet121::new(3);
        let mut ck = Checkpoint::new("densenet121", serde_json::Value::Null);
        ck.tensors = a.parameters();
        let mut b = DenseNet121::new(4);
        b.load_weights(&ck).unwrap();
        let x = image_tensor(&RgbImage::from_pixel(40, 40, image::Rgb([1, 2, 3])));
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn spec_text_round_trip() {
        for s in ["tiny-cnn:seed=7", "densenet121:seed=0", "densenet121:path=/w/d.ckpt"] {
            assert_eq!(s.parse::<BackboneSpec>().unwrap().to_string(), s);
        }
        assert!("vgg".parse::<BackboneSpec>().is_err());
    }
}
