//! Few-shot temporal activity detection at desk scale: a two-stage
//! temporal proposal network over per-timestep feature sequences, a
//! cosine-similarity episodic classifier, joint training, and detection
//! evaluation (mAP@alpha, average mAP).

pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod episodes;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod proposal;
pub mod rng;
pub mod similarity;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
