//! Recurrent video segmentation toolkit: a small reverse-mode tensor engine,
//! convolutional LSTM cells and the Standard / Fast / Faster recurrent units,
//! a three-branch cascade segmentation network, analytic FLOP accounting,
//! seeded weather disturbances, a synthetic moving-shapes video dataset,
//! segmentation and flicker metrics, and the training loop tying them together.

pub mod augment;
pub mod bench;
pub mod cells;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod flops;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pnm;
pub mod real;
pub mod seed;
pub mod segnet;
pub mod tape;
pub mod tensor;
pub mod train;

pub use augment::{Disturbance, DisturbancePolicy, RainLevel, RainParams};
pub use cells::{CellState, RecurrentUnit, RecurrentUnitSpec, UnitDesign};
pub use dataset::{DatasetConfig, DatasetManifest, VideoSample};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, FlickerReport, Metrics};
pub use params::{ParamId, ParamSet};
pub use real::Real;
pub use segnet::{Network, NetworkConfig, NetworkState, Placement, Version};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
pub use train::{RunResult, TrainConfig};
