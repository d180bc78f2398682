//! Benchmark driver: resolves JSON run requests, executes the pipeline over
//! seed ranges and sweep grids, and appends one CSV row per (config, seed).
//!
//! Every column except `wall_clock_ms` is reproducible from the config hash
//! and the seed.

use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use selfres_core::model::{init_weights, Fnv64, ModelConfig, Weights};
use selfres_core::oracle::{aligned_event_direction, calibrate_beta, planted_recall, PlantedWorkload};
use selfres_core::pipeline::{run_pipeline, ExecMode, InferenceMode, PositionStrategy, RunSpec};
use selfres_core::vision::{generate_planted_video, PlantedEvent};

/// Schema version of the result CSV; bump when columns change.
pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Exact column order of the result CSV.
pub const RESULT_HEADER: [&str; 17] = [
    "run_id",
    "config_hash",
    "T",
    "S",
    "R",
    "l",
    "K",
    "mode",
    "position_strategy",
    "exec",
    "seed",
    "planted_recall",
    "attention_macs",
    "layer_invocations",
    "peak_live_activation_bytes",
    "wall_clock_ms",
    "output_tokens",
];

const DEFAULT_SYSTEM: &[u32] = &[1, 2, 3, 4];
const DEFAULT_QUERY: &[u32] = &[5, 6, 7];
const DEFAULT_MAX_NEW: usize = 8;
/// Seeds used to calibrate the event bias when the request omits it,
/// offset away from typical run seeds.
const CALIBRATION_SEED_BASE: u64 = 0xCA11_0000;
const CALIBRATION_SEEDS: u64 = 8;
const CALIBRATION_TARGET_RECALL: f32 = 0.99;

/// Planted-event description inside a run request. Direction defaults to
/// the query-aligned direction; bias defaults to a calibrated value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRequest {
    pub frame_range: [usize; 2],
    pub patch_range: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f32>,
}

/// Video description inside a run request. When `seed` is omitted each
/// benchmark row regenerates the video from its own run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoRequest {
    pub num_frames: usize,
    pub patches_per_frame: usize,
    pub event: EventRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Half-open seed range `start..end`, one benchmark row per seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn iter(&self) -> impl Iterator<Item = u64> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl FromStr for SeedRange {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (start, end) = s
            .split_once("..")
            .with_context(|| format!("seed range `{s}` is not of the form a..b"))?;
        Ok(SeedRange {
            start: start.trim().parse().with_context(|| format!("bad seed `{start}`"))?,
            end: end.trim().parse().with_context(|| format!("bad seed `{end}`"))?,
        })
    }
}

/// One benchmark request. CLI flags override the JSON values one-to-one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRequest {
    pub model: ModelConfig,
    pub video: VideoRequest,
    #[serde(rename = "T")]
    pub frames_t: usize,
    #[serde(rename = "S")]
    pub segment_s: usize,
    /// Overrides `model.reflection_layer` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection_layer: Option<usize>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub keep: Option<usize>,
    pub mode: InferenceMode,
    pub position_strategy: PositionStrategy,
    pub exec: ExecMode,
    pub seeds: SeedRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sys_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_tokens: Option<Vec<u32>>,
}

impl RunRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("malformed run request JSON")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Self::from_json(&text)
    }
}

/// Flag-level overrides; every field mirrors a JSON request field.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub frames_t: Option<usize>,
    pub segment_s: Option<usize>,
    pub reflection_layer: Option<usize>,
    pub keep: Option<usize>,
    pub mode: Option<String>,
    pub position_strategy: Option<String>,
    pub exec: Option<String>,
    pub seeds: Option<String>,
}

pub fn apply_overrides(mut request: RunRequest, overrides: &Overrides) -> Result<RunRequest> {
    if let Some(t) = overrides.frames_t {
        request.frames_t = t;
    }
    if let Some(s) = overrides.segment_s {
        request.segment_s = s;
    }
    if let Some(l) = overrides.reflection_layer {
        request.reflection_layer = Some(l);
    }
    if let Some(k) = overrides.keep {
        request.keep = Some(k);
    }
    if let Some(mode) = &overrides.mode {
        request.mode = InferenceMode::from_str(mode)?;
    }
    if let Some(pos) = &overrides.position_strategy {
        request.position_strategy = PositionStrategy::from_str(pos)?;
    }
    if let Some(exec) = &overrides.exec {
        request.exec = ExecMode::from_str(exec)?;
    }
    if let Some(seeds) = &overrides.seeds {
        request.seeds = SeedRange::from_str(seeds)?;
    }
    Ok(request)
}

/// A request with every default filled in: concrete event direction and
/// bias, prompt tokens, and the reflection layer folded into the model
/// config.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRequest {
    pub model: ModelConfig,
    pub video: VideoRequest,
    #[serde(rename = "T")]
    pub frames_t: usize,
    #[serde(rename = "S")]
    pub segment_s: usize,
    #[serde(rename = "K")]
    pub keep: Option<usize>,
    pub mode: InferenceMode,
    pub position_strategy: PositionStrategy,
    pub exec: ExecMode,
    pub max_new: usize,
    pub sys_tokens: Vec<u32>,
    pub query_tokens: Vec<u32>,
    #[serde(skip)]
    pub seeds: SeedRange,
}

impl ResolvedRequest {
    /// FNV-1a over the canonical JSON of everything except the seed range;
    /// stable across machines.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("resolved request serializes");
        let mut h = Fnv64::new();
        h.write_bytes(json.as_bytes());
        h.finish()
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            frames_t: self.frames_t,
            segment_s: self.segment_s,
            keep: self.keep,
            mode: self.mode,
            strategy: self.position_strategy,
            exec: self.exec,
            max_new_tokens: self.max_new,
        }
    }

    pub fn event(&self) -> PlantedEvent {
        PlantedEvent {
            frame_range: (self.video.event.frame_range[0], self.video.event.frame_range[1]),
            patch_range: (self.video.event.patch_range[0], self.video.event.patch_range[1]),
            direction: self.video.event.direction.clone().expect("resolved direction"),
            bias: self.video.event.bias.expect("resolved bias"),
        }
    }
}

fn validate(request: &RunRequest, model: &ModelConfig) -> Result<()> {
    model.validate().context("invalid model config")?;
    if request.frames_t == 0 || request.segment_s == 0 {
        bail!("T and S must be positive");
    }
    if request.frames_t % request.segment_s != 0 {
        bail!(
            "T = {} does not divide into segments of S = {}",
            request.frames_t,
            request.segment_s
        );
    }
    if request.frames_t > request.video.num_frames {
        bail!(
            "cannot sample T = {} frames from a {}-frame video",
            request.frames_t,
            request.video.num_frames
        );
    }
    Ok(())
}

/// Fill in every default: prompt tokens, reflection layer, event direction
/// (query-aligned when omitted), and event bias (calibrated to the target
/// recall when omitted, using seeds disjoint from run seeds).
pub fn resolve(request: &RunRequest) -> Result<(ResolvedRequest, Weights)> {
    let mut model = request.model;
    if let Some(layer) = request.reflection_layer {
        model.reflection_layer = layer;
    }
    validate(request, &model)?;
    let weights = init_weights(&model)?;
    let system = request.sys_tokens.clone().unwrap_or_else(|| DEFAULT_SYSTEM.to_vec());
    let query = request.query_tokens.clone().unwrap_or_else(|| DEFAULT_QUERY.to_vec());

    let mut video = request.video.clone();
    let direction = match &video.event.direction {
        Some(direction) => {
            if direction.len() != model.vision_dim {
                bail!(
                    "event direction has {} channels, model has vision_dim {}",
                    direction.len(),
                    model.vision_dim
                );
            }
            direction.clone()
        }
        None => aligned_event_direction(
            &weights,
            &system,
            &query,
            request.segment_s,
            video.patches_per_frame,
        )
        .context("computing query-aligned event direction")?,
    };
    video.event.direction = Some(direction.clone());

    let bias = match video.event.bias {
        Some(bias) => bias,
        None => {
            let event_frames = video.event.frame_range[1] - video.event.frame_range[0] + 1;
            let event_patches = video.event.patch_range[1] - video.event.patch_range[0] + 1;
            let mut workload = PlantedWorkload::new(
                &model,
                system.clone(),
                query.clone(),
                video.num_frames,
                video.patches_per_frame,
                event_frames,
                event_patches,
                request.frames_t,
                request.segment_s,
            )
            .context("building calibration workload")?;
            workload.direction = direction;
            workload.keep = request.keep;
            workload.mode = request.mode;
            workload.strategy = request.position_strategy;
            workload.exec = request.exec;
            let seeds: Vec<u64> =
                (CALIBRATION_SEED_BASE..CALIBRATION_SEED_BASE + CALIBRATION_SEEDS).collect();
            let calibration = calibrate_beta(&workload, CALIBRATION_TARGET_RECALL, &seeds)
                .context("calibrating event bias")?;
            log::info!("calibrated event bias to {}", calibration.beta);
            calibration.beta
        }
    };
    video.event.bias = Some(bias);

    Ok((
        ResolvedRequest {
            model,
            video,
            frames_t: request.frames_t,
            segment_s: request.segment_s,
            keep: request.keep,
            mode: request.mode,
            position_strategy: request.position_strategy,
            exec: request.exec,
            max_new: request.max_new.unwrap_or(DEFAULT_MAX_NEW),
            sys_tokens: system,
            query_tokens: query,
            seeds: request.seeds,
        },
        weights,
    ))
}

/// One CSV row. Field order is the schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub config_hash: String,
    #[serde(rename = "T")]
    pub frames_t: usize,
    #[serde(rename = "S")]
    pub segment_s: usize,
    #[serde(rename = "R")]
    pub paths: usize,
    #[serde(rename = "l")]
    pub reflection_layer: usize,
    #[serde(rename = "K")]
    pub keep: usize,
    pub mode: String,
    pub position_strategy: String,
    pub exec: String,
    pub seed: u64,
    pub planted_recall: f32,
    pub attention_macs: u64,
    pub layer_invocations: u64,
    pub peak_live_activation_bytes: u64,
    pub wall_clock_ms: f64,
    /// Space-joined decoded token ids.
    pub output_tokens: String,
}

/// Execute one resolved request for every seed in its range.
pub fn execute(resolved: &ResolvedRequest, weights: &Weights) -> Result<Vec<ResultRow>> {
    let hash = resolved.config_hash();
    let config_hash = format!("{hash:016x}");
    let spec = resolved.run_spec();
    let event = resolved.event();
    let mut rows = Vec::with_capacity(resolved.seeds.len());
    for seed in resolved.seeds.iter() {
        let video_seed = resolved.video.seed.unwrap_or(seed);
        let video = generate_planted_video(
            video_seed,
            resolved.video.num_frames,
            resolved.video.patches_per_frame,
            resolved.model.vision_dim,
            event.clone(),
        )?;
        let started = Instant::now();
        let output = run_pipeline(
            weights,
            &video,
            &resolved.sys_tokens,
            &resolved.query_tokens,
            &spec,
        )?;
        let wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
        let recall = planted_recall(&output, &event);
        rows.push(ResultRow {
            run_id: format!("{:08x}-s{seed}", hash >> 32),
            config_hash: config_hash.clone(),
            frames_t: resolved.frames_t,
            segment_s: resolved.segment_s,
            paths: resolved.frames_t / resolved.segment_s,
            reflection_layer: resolved.model.reflection_layer,
            keep: output.keep,
            mode: resolved.mode.to_string(),
            position_strategy: resolved.position_strategy.to_string(),
            exec: resolved.exec.to_string(),
            seed,
            planted_recall: recall,
            attention_macs: output.counters.attention_macs,
            layer_invocations: output.counters.layer_invocations,
            peak_live_activation_bytes: output.counters.peak_live_activation_bytes,
            wall_clock_ms,
            output_tokens: output
                .output_ids
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        });
    }
    Ok(rows)
}

/// Append rows to `path`, writing the header first when the file is new or
/// empty. UTF-8, comma-separated, LF line endings.
pub fn append_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .read(true)
        .open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let needs_header = file.seek(SeekFrom::End(0))? == 0;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file);
    if needs_header {
        writer.write_record(RESULT_HEADER)?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Run one request and append a row per seed; returns the rows written.
pub fn run_benchmark(request: &RunRequest, out: &Path) -> Result<Vec<ResultRow>> {
    let (resolved, weights) = resolve(request)?;
    let rows = execute(&resolved, &weights)?;
    append_rows(out, &rows)?;
    Ok(rows)
}

/// Sweep axes supported by the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepDimension {
    Layer,
    Context,
    Strategy,
}

impl FromStr for SweepDimension {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(SweepDimension::Layer),
            "context" => Ok(SweepDimension::Context),
            "strategy" => Ok(SweepDimension::Strategy),
            other => bail!("unknown sweep dimension `{other}` (layer|context|strategy)"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SweepGrid {
    /// Reflection-layer depths.
    Layers(Vec<usize>),
    /// (S, T) pairs, written `S:T`.
    Contexts(Vec<(usize, usize)>),
    Strategies(Vec<PositionStrategy>),
}

pub fn parse_grid(dimension: SweepDimension, grid: &str) -> Result<SweepGrid> {
    let items: Vec<&str> = grid.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        bail!("sweep grid is empty");
    }
    match dimension {
        SweepDimension::Layer => Ok(SweepGrid::Layers(
            items
                .iter()
                .map(|s| s.parse().with_context(|| format!("bad layer `{s}`")))
                .collect::<Result<_>>()?,
        )),
        SweepDimension::Context => Ok(SweepGrid::Contexts(
            items
                .iter()
                .map(|s| {
                    let (seg, total) = s
                        .split_once(':')
                        .with_context(|| format!("context entry `{s}` is not of the form S:T"))?;
                    Ok((
                        seg.parse().with_context(|| format!("bad S `{seg}`"))?,
                        total.parse().with_context(|| format!("bad T `{total}`"))?,
                    ))
                })
                .collect::<Result<_>>()?,
        )),
        SweepDimension::Strategy => Ok(SweepGrid::Strategies(
            items
                .iter()
                .map(|s| PositionStrategy::from_str(s).map_err(anyhow::Error::from))
                .collect::<Result<_>>()?,
        )),
    }
}

/// Cross-product of grid x seeds, one row each. Layer sweeps additionally
/// emit both convergence modes per depth.
pub fn sweep(base: &RunRequest, dimension: SweepDimension, grid: &SweepGrid, out: &Path) -> Result<Vec<ResultRow>> {
    let mut variants: Vec<RunRequest> = Vec::new();
    match (dimension, grid) {
        (SweepDimension::Layer, SweepGrid::Layers(layers)) => {
            for &layer in layers {
                if layer < 1 || layer > base.model.num_layers {
                    bail!(
                        "layer {layer} outside 1..={} for this model",
                        base.model.num_layers
                    );
                }
                for mode in [InferenceMode::Regular, InferenceMode::Smooth] {
                    let mut variant = base.clone();
                    variant.reflection_layer = Some(layer);
                    variant.mode = mode;
                    variants.push(variant);
                }
            }
        }
        (SweepDimension::Context, SweepGrid::Contexts(pairs)) => {
            for &(segment_s, frames_t) in pairs {
                if frames_t % segment_s != 0 {
                    bail!("context pair {segment_s}:{frames_t} is not divisible");
                }
                if frames_t > base.video.num_frames {
                    bail!(
                        "context pair {segment_s}:{frames_t} samples more frames than the {}-frame video",
                        base.video.num_frames
                    );
                }
                let mut variant = base.clone();
                variant.segment_s = segment_s;
                variant.frames_t = frames_t;
                variants.push(variant);
            }
        }
        (SweepDimension::Strategy, SweepGrid::Strategies(strategies)) => {
            for &strategy in strategies {
                let mut variant = base.clone();
                variant.position_strategy = strategy;
                variants.push(variant);
            }
        }
        _ => bail!("sweep grid does not match the dimension"),
    }

    let mut all_rows = Vec::new();
    for variant in &variants {
        let rows = run_benchmark(variant, out)?;
        all_rows.extend(rows);
    }
    Ok(all_rows)
}

/// Read every row back from a result CSV (test and tooling helper).
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut file = std::fs::File::open(path)?;
    let mut text = String::new();
    file.read_to_string(&mut text)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.deserialize::<ResultRow>() {
        rows.push(record?);
    }
    Ok(rows)
}
