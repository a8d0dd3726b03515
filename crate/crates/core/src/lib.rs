//! Contextual rescoring and relabeling of object-detection outputs.
//!
//! Detections from an external detector are encoded by their co-occurrence,
//! spatial and scale relations to the other detections in the same image.
//! A small sigmoid/softmax network, trained with scaled conjugate gradient,
//! turns that encoding into a probability that each detection is correct.
//! The same score drives two pipelines: rescoring (replace every confidence)
//! and relabeling (low scorers try their detector top-5 labels, or are
//! dropped as background).

pub mod coco;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod features;
pub mod geometry;
pub mod mlp;
pub mod model;
pub mod overlay;
pub mod pipelines;
pub mod scg;
pub mod synth;

pub use error::{Error, Result};
pub use features::{
    build_cooccurrence, build_feature_vector, build_training_set, feature_length, ClassVocabulary,
    CoocMatrix, Detection, FeatureVector, GroundTruth, TrainingSet,
};
pub use geometry::{iou, relation_bits, BBox, RelationBits, RelationConfig, RelationFamily};
pub use mlp::{init_network, loss_and_gradient, NetworkParams};
pub use model::ContextModel;
pub use scg::{train_scg, TrainConfig, TrainReport};
