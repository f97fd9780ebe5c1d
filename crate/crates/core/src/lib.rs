pub mod align;
pub mod config;
pub mod env_model;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod interaction;
pub mod io;
pub mod kernel;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod scenario;
pub mod tensor;
pub mod tracker;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use model::{iou, ActionScores, BoundingBox, Clip, Detection, TrackedDetection, Tubelet};
pub use tensor::{FeatureTensor, FlowField};
