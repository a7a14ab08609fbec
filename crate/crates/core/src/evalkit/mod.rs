//! Toy low-light detection harness: synthetic scenes, a small detector,
//! training, the log-average miss rate and ablations.

pub mod ablation;
pub mod dataset;
pub mod dump;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod scene;
pub mod train;

pub use ablation::{run_ablation, Variant};
pub use dataset::{Dataset, Split};
pub use metrics::{iou, match_detections, mr2, nms, BBox, Detection, DetectionRecord, MrConfig};
pub use model::{decode, DecodeConfig, ModelConfig, ToyModel};
pub use oracle::ThresholdOracle;
pub use scene::{make_toy_scene, SceneConfig, ToyScene};
pub use train::{evaluate, train, Experiment, Sgdw, TrainConfig, TrainLog};
