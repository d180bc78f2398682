//! Synthetic stand-in for a vision encoder: frame-by-patch feature grids
//! with a planted spatiotemporal event, uniform frame sampling, and the
//! projection of features into the model embedding space.
//!
//! The encoder itself is the identity on the synthetic features; only the
//! projection matrix is real.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Weights;
use crate::numerics::Matrix;

/// A concentrated event: a biased feature direction added to a small
/// frame-by-patch window. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    pub frame_range: (usize, usize),
    pub patch_range: (usize, usize),
    /// Unit vector in feature space added (scaled by `bias`) on event cells.
    pub direction: Vec<f32>,
    pub bias: f32,
}

impl PlantedEvent {
    pub fn contains(&self, frame: usize, patch: usize) -> bool {
        frame >= self.frame_range.0
            && frame <= self.frame_range.1
            && patch >= self.patch_range.0
            && patch <= self.patch_range.1
    }

    pub fn cell_count(&self) -> usize {
        (self.frame_range.1 - self.frame_range.0 + 1) * (self.patch_range.1 - self.patch_range.0 + 1)
    }
}

/// A generated video: per-cell feature vectors plus the event metadata.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub num_frames: usize,
    pub patches_per_frame: usize,
    pub feature_dim: usize,
    /// frame-major, patch-major, channel-major.
    pub features: Vec<f32>,
    pub event: PlantedEvent,
    pub seed: u64,
}

impl SyntheticVideo {
    pub fn feature(&self, frame: usize, patch: usize) -> &[f32] {
        let idx = (frame * self.patches_per_frame + patch) * self.feature_dim;
        &self.features[idx..idx + self.feature_dim]
    }
}

/// The serializable description of a video; features regenerate from seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoParams {
    pub num_frames: usize,
    pub patches_per_frame: usize,
    pub event: PlantedEvent,
    pub seed: u64,
}

impl VideoParams {
    pub fn generate(&self) -> Result<SyntheticVideo> {
        generate_planted_video(
            self.seed,
            self.num_frames,
            self.patches_per_frame,
            self.event.direction.len(),
            self.event.clone(),
        )
    }

    pub fn from_video(video: &SyntheticVideo) -> Self {
        VideoParams {
            num_frames: video.num_frames,
            patches_per_frame: video.patches_per_frame,
            event: video.event.clone(),
            seed: video.seed,
        }
    }
}

/// Strictly increasing frame indices chosen for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub indices: Vec<usize>,
}

/// Uniform (linear) sampling: index_i = floor(i * video_len / count).
pub fn sample_frames_uniform(video_len: usize, count: usize) -> Result<FrameSample> {
    if count == 0 || count > video_len {
        return Err(Error::Range(format!(
            "cannot sample {count} frames from a {video_len}-frame video"
        )));
    }
    let indices: Vec<usize> = (0..count).map(|i| i * video_len / count).collect();
    debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
    Ok(FrameSample { indices })
}

fn box_muller(rng: &mut ChaCha8Rng) -> f32 {
    // Hand-rolled so the stream depends only on ChaCha8 output.
    let u1 = ((rng.next_u32() >> 8) as f32 + 1.0) * (1.0 / 16_777_216.0);
    let u2 = (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Generate a video of seeded unit-Gaussian noise with `bias * direction`
/// added on the event cells only. Deterministic per seed; the noise stream
/// does not depend on the bias, so two videos with the same seed differ only
/// on event cells.
pub fn generate_planted_video(
    seed: u64,
    num_frames: usize,
    patches_per_frame: usize,
    feature_dim: usize,
    event: PlantedEvent,
) -> Result<SyntheticVideo> {
    if num_frames == 0 || patches_per_frame == 0 || feature_dim == 0 {
        return Err(Error::Range("video dimensions must be positive".into()));
    }
    if event.frame_range.0 > event.frame_range.1 || event.frame_range.1 >= num_frames {
        return Err(Error::Range(format!(
            "event frames {:?} outside 0..{num_frames}",
            event.frame_range
        )));
    }
    if event.patch_range.0 > event.patch_range.1 || event.patch_range.1 >= patches_per_frame {
        return Err(Error::Range(format!(
            "event patches {:?} outside 0..{patches_per_frame}",
            event.patch_range
        )));
    }
    if event.direction.len() != feature_dim {
        return Err(Error::Dimension(format!(
            "event direction has {} channels, video has {feature_dim}",
            event.direction.len()
        )));
    }
    let norm: f32 = event.direction.iter().map(|v| v * v).sum::<f32>().sqrt();
    if (norm - 1.0).abs() > 1e-4 && event.bias != 0.0 {
        return Err(Error::Contract(format!(
            "event direction norm {norm} is not unit"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_frames * patches_per_frame * feature_dim);
    for _ in 0..num_frames * patches_per_frame * feature_dim {
        features.push(box_muller(&mut rng));
    }
    for frame in event.frame_range.0..=event.frame_range.1 {
        for patch in event.patch_range.0..=event.patch_range.1 {
            let idx = (frame * patches_per_frame + patch) * feature_dim;
            for c in 0..feature_dim {
                features[idx + c] += event.bias * event.direction[c];
            }
        }
    }
    Ok(SyntheticVideo {
        num_frames,
        patches_per_frame,
        feature_dim,
        features,
        event,
        seed,
    })
}

/// A projected visual token tagged with its source cell.
#[derive(Debug, Clone)]
pub struct VisualToken {
    pub embedding: Vec<f32>,
    pub frame: usize,
    pub patch: usize,
}

/// Project the sampled frames' features into the model embedding space.
/// Token order is frame-major then patch; each token keeps its original
/// (frame, patch) label through all later selection steps.
pub fn encode_and_project(
    video: &SyntheticVideo,
    sample: &FrameSample,
    weights: &Weights,
) -> Result<Vec<VisualToken>> {
    if video.feature_dim != weights.config.vision_dim {
        return Err(Error::Dimension(format!(
            "video features have {} channels, model expects {}",
            video.feature_dim, weights.config.vision_dim
        )));
    }
    if sample.indices.iter().any(|&f| f >= video.num_frames) {
        return Err(Error::Range("frame sample outside video".into()));
    }
    let mut tokens = Vec::with_capacity(sample.indices.len() * video.patches_per_frame);
    for &frame in &sample.indices {
        for patch in 0..video.patches_per_frame {
            let row = Matrix::from_vec(1, video.feature_dim, video.feature(frame, patch).to_vec())?;
            let projected = row.matmul(&weights.vision_projection);
            tokens.push(VisualToken {
                embedding: projected.row(0).to_vec(),
                frame,
                patch,
            });
        }
    }
    Ok(tokens)
}
