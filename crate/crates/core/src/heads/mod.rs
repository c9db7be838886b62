//! Counting heads: DRC, GWAP, CCPP and their fusion.
//!
//! Features are computed once per image by the frozen backbone and
//! segmenter ([`CountModel::features`]); only the heads are trained.

mod model;
mod net;
pub mod pooling;
mod train;

pub use model::{CountModel, ForwardMode, Prediction, SsNetRef, CHECKPOINT_KIND};
pub use net::{
    features_from_volume, CountFeatures, CountKind, HeadBatch, Heads, PointwiseConv, Stream, StreamKind,
    BOTTLENECK_WIDTH, DEFAULT_DROPOUT, LEAKY_SLOPE, STREAM_WIDTH,
};
pub use pooling::{
    ccpp, ccpp_attention, ccpp_attention_backward, ccpp_backward, global_average, gwap, gwap_backward,
    resample_probability, weight_volume,
};
pub use train::{
    extract_samples, fit_model, fit_on_features, predict_samples, train_counter, CountSample, CounterTrainConfig,
    LossHistory,
};
