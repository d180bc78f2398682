//! A desk-scale inference engine for self-reflective video token sampling.
//!
//! The engine runs a deterministic toy decoder-only transformer over
//! synthetic videos. Sampled frames are distributed across independent
//! reflection paths; each path prefills up to a chosen reflection layer,
//! where the final prompt token scores every visual token with its raw
//! attention logits. The top-scoring tokens across all paths converge into
//! a single inference path (restarted from the inputs or resumed from the
//! reflection layer) that decodes under reassigned positions.
//!
//! Everything is instrumented with exact counters (attention MACs, layer
//! invocations, live activation bytes) so the quadratic-work reduction and
//! memory behavior of the scheme can be checked analytically instead of
//! with wall clocks, and every mechanism has a brute-force oracle in
//! [`oracle`].

pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod vision;

pub use error::{Error, Result};
pub use model::{
    forward_range, greedy_decode, init_weights, KVCache, ModelConfig, Weights, WorkCounters,
};
pub use numerics::Matrix;
pub use pipeline::{
    run_pipeline, ConvergencePlan, ExecMode, InferenceMode, PipelineOutput, PositionStrategy,
    ReflectionPath, RunSpec, SaliencyTable, SegmentedSequence,
};
pub use vision::{
    encode_and_project, generate_planted_video, sample_frames_uniform, FrameSample, PlantedEvent,
    SyntheticVideo, VideoParams,
};
