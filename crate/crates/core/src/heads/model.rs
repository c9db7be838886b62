use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{CountFeatures, CountKind, HeadBatch, Heads, DEFAULT_DROPOUT};
use super::pooling::{resample_probability, weight_volume};
use super::train::{CounterTrainConfig, LossHistory};
use crate::backbone::{extract_volume_rgb, BackboneHandle, BackboneSpec};
use crate::checkpoint::{file_sha256, Checkpoint};
use crate::dataset::{ImageTile, TILE_SIZE_PX};
use crate::nn::{Adam, Parameterized};
use crate::ssnet::SsNet;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "counter";

/// Training or inference behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout active, masks drawn from the seed.
    Train { seed: u64 },
    Infer,
}

/// A count as the network produced it and as reported.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub raw: f64,
    /// `max(0, round(raw))`
    pub rounded: u32,
}

impl Prediction {
    pub fn new(raw: f64) -> Self {
        let rounded = if raw.is_finite() { raw.round().max(0.0) as u32 } else { 0 };
        Self { raw, rounded }
    }
}

/// Where the segmenter of a counting model came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsNetRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl SsNetRef {
    pub fn of_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        Ok(Self {
            sha256: file_sha256(&path)?,
            path,
        })
    }
}

/// A counting model: frozen backbone and segmenter plus learnable heads.
#[derive(Clone)]
pub struct CountModel {
    pub kind: CountKind,
    pub backbone: BackboneHandle,
    pub ssnet: Option<Arc<SsNet<f32>>>,
    pub ssnet_ref: Option<SsNetRef>,
    pub heads: Heads<f32>,
    /// Square side every image is resized to.
    pub input_size: usize,
    pub head_seed: u64,
    pub history: LossHistory,
    pub train_config: Option<CounterTrainConfig>,
    pub optimizer: Option<Adam<f32>>,
}

impl std::fmt::Debug for CountModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CountModel")
            .field("kind", &self.kind)
            .field("backbone", &self.backbone.descriptor())
            .field("ssnet", &self.ssnet_ref)
            .field("input_size", &self.input_size)
            .finish()
    }
}

impl CountModel {
    /// Attention kinds need a segmenter and DRC must not have one.
    pub fn new(kind: CountKind, backbone: BackboneHandle, ssnet: Option<Arc<SsNet<f32>>>, seed: u64) -> Result<Self> {
        Self::with_options(kind, backbone, ssnet, seed, DEFAULT_DROPOUT, TILE_SIZE_PX)
    }

    pub fn with_options(
        kind: CountKind,
        backbone: BackboneHandle,
        ssnet: Option<Arc<SsNet<f32>>>,
        seed: u64,
        dropout: f64,
        input_size: usize,
    ) -> Result<Self> {
        match (kind.needs_ssnet(), ssnet.is_some()) {
            (true, false) => {
                return Err(Error::Config(format!("{kind} needs a segmentation network (--ssnet)")));
            }
            (false, true) => return Err(Error::Config("drc does not use a segmentation network".into())),
            _ => {}
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let (h, w) = backbone.net.output_hw(input_size, input_size)?;
        if let Some(net) = &ssnet {
            net.native_size(input_size, input_size)?;
        }
        let heads = Heads::new(kind, backbone.channels(), (h, w), dropout, seed);
        Ok(Self {
            kind,
            backbone,
            ssnet,
            ssnet_ref: None,
            heads,
            input_size,
            head_seed: seed,
            history: LossHistory::default(),
            train_config: None,
            optimizer: None,
        })
    }

    /// Feature grid `(h, w)` at the model's input size.
    pub fn grid(&self) -> Result<(usize, usize)> {
        self.backbone.net.output_hw(self.input_size, self.input_size)
    }

    fn resized(&self, img: &RgbImage) -> RgbImage {
        let n = self.input_size as u32;
        if img.width() == n && img.height() == n {
            img.clone()
        } else {
            image::imageops::resize(img, n, n, FilterType::Triangle)
        }
    }

    /// Frozen features of one image, resized to the input size first.
    pub fn features_rgb(&self, img: &RgbImage) -> Result<CountFeatures> {
        let img = self.resized(img);
        let volume = extract_volume_rgb(&self.backbone, &img)?;
        let pooled = volume.pooled();
        let weighted = match &self.ssnet {
            None => None,
            Some(net) => {
                let (_, h, w) = volume.values.dim();
                let prob = net.segment_rgb(&img)?;
                let p = resample_probability(prob.values.view(), h, w);
                Some(weight_volume(volume.values.view(), p.view())?)
            }
        };
        Ok(CountFeatures { pooled, weighted })
    }

    pub fn features(&self, tile: &ImageTile) -> Result<CountFeatures> {
        self.features_rgb(&tile.pixels)
    }

    /// Raw count from precomputed features.
    pub fn predict_features(&self, features: &CountFeatures) -> Result<f64> {
        let batch = HeadBatch::<f32>::from_features(&[features])?;
        Ok(f64::from(self.heads.infer(&batch)?[0]))
    }

    /// Raw (unclamped) count of one image.
    pub fn forward(&self, tile: &ImageTile, mode: ForwardMode) -> Result<f64> {
        self.forward_rgb(&tile.pixels, mode)
    }

    pub fn forward_rgb(&self, img: &RgbImage, mode: ForwardMode) -> Result<f64> {
        let f = self.features_rgb(img)?;
        match mode {
            ForwardMode::Infer => self.predict_features(&f),
            ForwardMode::Train { seed } => {
                let batch = HeadBatch::<f32>::from_features(&[&f])?;
                let mut heads = self.heads.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(f64::from(heads.forward(&batch, &mut rng)?[0]))
            }
        }
    }

    pub fn predict(&self, tile: &ImageTile) -> Result<Prediction> {
        self.predict_rgb(&tile.pixels)
    }

    pub fn predict_rgb(&self, img: &RgbImage) -> Result<Prediction> {
        Ok(Prediction::new(self.forward_rgb(img, ForwardMode::Infer)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let grid = self.grid().unwrap_or((0, 0));
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "kind": self.kind,
                "backbone": self.backbone.spec.to_string(),
                "backbone_descriptor": self.backbone.descriptor(),
                "channels": self.backbone.channels(),
                "grid": [grid.0, grid.1],
                "input_size": self.input_size,
                "dropout": self.heads.dropout.rate,
                "head_seed": self.head_seed,
                "ssnet": self.ssnet_ref,
                "optimizer": self.optimizer.as_ref().map(|o| serde_json::json!({
                    "name": "adam",
                    "lr": o.lr,
                    "beta1": o.beta1,
                    "beta2": o.beta2,
                    "eps": o.eps,
                    "t": o.t,
                })),
                "train_config": self.train_config,
                "history": self.history,
            }),
        );
        ck.tensors = self.heads.export("heads");
        if let Some(opt) = &self.optimizer {
            ck.tensors.extend(opt.export_state());
        }
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, None)
    }

    /// Load a checkpoint; `ssnet` overrides the recorded segmenter path.
    ///
    /// The segmenter file must hash to the recorded digest.
    pub fn load_with(path: impl AsRef<Path>, ssnet: Option<&Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load_kind(path, CHECKPOINT_KIND)?;
        let meta = &ck.meta;
        let field = |key: &str| {
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("counter checkpoint lacks '{key}'")))
        };
        let kind: CountKind = parse("kind", field("kind")?)?;
        let spec_text: String = parse("backbone", field("backbone")?)?;
        let spec: BackboneSpec = spec_text.parse()?;
        let input_size: usize = parse("input_size", field("input_size")?)?;
        let dropout: f64 = parse("dropout", field("dropout")?)?;
        let head_seed: u64 = parse("head_seed", field("head_seed")?)?;
        let recorded: Option<SsNetRef> = parse("ssnet", field("ssnet")?)?;
        let backbone = spec.build()?;

        let (net, ssnet_ref) = match (kind.needs_ssnet(), ssnet, &recorded) {
            (false, _, _) => (None, None),
            (true, Some(p), _) => {
                let r = SsNetRef::of_file(p)?;
                if let Some(rec) = &recorded {
                    if rec.sha256 != r.sha256 {
                        log::warn!("segmenter {} differs from the one used in training", p.display());
                    }
                }
                (Some(Arc::new(SsNet::<f32>::load(p)?)), Some(r))
            }
            (true, None, Some(rec)) => {
                let candidate = resolve(&rec.path, path);
                let digest = file_sha256(&candidate)?;
                if digest != rec.sha256 {
                    return Err(Error::Checkpoint(format!(
                        "segmenter {} has digest {digest}, checkpoint expects {}",
                        candidate.display(),
                        rec.sha256
                    )));
                }
                (Some(Arc::new(SsNet::<f32>::load(&candidate)?)), Some(rec.clone()))
            }
            (true, None, None) => {
                return Err(Error::Config(format!("{kind} checkpoint has no segmenter reference; pass one explicitly")));
            }
        };

        let mut model = Self::with_options(kind, backbone, net, head_seed, dropout, input_size)?;
        model.ssnet_ref = ssnet_ref;
        let tensors = ck.tensor_map();
        model.heads.import("heads", &tensors)?;
        model.history = parse("history", field("history")?)?;
        model.train_config = parse("train_config", field("train_config")?)?;
        if let Some(opt) = meta.get("optimizer").filter(|v| !v.is_null()) {
            let mut adam = Adam::<f32>::new(opt["lr"].as_f64().unwrap_or(1e-4));
            adam.import_state(opt["t"].as_u64().unwrap_or(0), &tensors);
            model.optimizer = Some(adam);
        }
        Ok(model)
    }
}

fn parse<T: serde::de::DeserializeOwned>(key: &str, v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("bad '{key}': {e}")))
}

/// A recorded path, or the same file name next to the checkpoint.
fn resolve(recorded: &Path, checkpoint: &Path) -> PathBuf {
    if recorded.exists() {
        return recorded.to_path_buf();
    }
    match (checkpoint.parent(), recorded.file_name()) {
        (Some(dir), Some(name)) if dir.join(name).exists() => dir.join(name),
        _ => recorded.to_path_buf(),
    }
}
