//! Change detection: the learned dual-head classifier and two geometric
//! baselines.

mod features;
mod infer;
mod loss;
mod model;
mod occupancy;
mod train;
mod visibility;

pub use features::{
    extract_features, DomainCells, Element, FeatureParams, FeatureSet, FeatureVector, COARSE_FACTOR, HIGH_DIM, LOW_DIM,
};
pub use infer::{classify, infer, infer_prepared, Detection, PointPrediction, PreparedMap};
pub use loss::{loss_cls, loss_conf, LOG_CLAMP};
pub use model::{ConfSource, DualHeadModel, ElementOutput, ModelConfig};
pub use occupancy::detect_occupancy;
pub use train::{
    loss_and_gradient, model_params, samples_from_pair, train, train_on_samples, ClassWeighting, ClassWeights, EpochStats,
    LossParts, TrainConfig, TrainOutcome, TrainSample,
};
pub use visibility::{detect_visibility, project, visibility_votes, MapVote, RangeImage};
