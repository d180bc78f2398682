//! Brute-force references and workload calibration.
//!
//! Everything here exists to check the engine from the outside: a full
//! standard-attention reimplementation (sharing only the numerics kernels),
//! an exhaustive top-k, the linear-sampling baseline, a cross-path hidden
//! divergence diagnostic, and the bias calibration for planted-signal
//! workloads.

use std::io::{self, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::model::{init_weights, KVCache, ModelConfig, Weights, WorkCounters};
use crate::numerics::{apply_rope, dot, rms_normalize, row_softmax, Matrix};
use crate::pipeline::{
    build_reflection_paths, embed_sequence, reflection_query, run_pipeline, ExecMode,
    InferenceMode, PipelineOutput, PositionStrategy, ReflectionPath, RunSpec, SaliencyTable,
    SegmentKind, Token,
};
use crate::vision::{generate_planted_video, PlantedEvent, SyntheticVideo};

// ---------------------------------------------------------------------------
// Reference attention
// ---------------------------------------------------------------------------

/// Scaled pre-softmax attention logits for one head: rows of `q` against
/// rows of `k`, divided by sqrt(d_k).
pub fn scaled_qk_logits(q: &Matrix, k: &Matrix) -> Matrix {
    debug_assert_eq!(q.cols(), k.cols());
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let mut out = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            out.row_mut(i)[j] = dot(q.row(i), k.row(j)) * scale;
        }
    }
    out
}

fn columns(m: &Matrix, from: usize, to: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), to - from);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[from..to]);
    }
    out
}

struct BlockTrace {
    output: Matrix,
    /// Per-head n x n scaled pre-softmax logits (no causal mask applied).
    head_logits: Vec<Matrix>,
}

/// One pre-norm block, implemented the straightforward full-matrix way:
/// per-head QK^T, causal mask, softmax, value product, output projection,
/// then the MLP. Shares only the numerics kernels with the engine.
fn reference_block(
    weights: &Weights,
    layer: usize,
    hidden: &Matrix,
    positions: &[usize],
) -> BlockTrace {
    let cfg = &weights.config;
    let lw = &weights.layers[layer - 1];
    let n = hidden.rows();
    let d = cfg.model_dim;
    let dk = cfg.head_dim;

    let mut normed = Matrix::zeros(n, d);
    for i in 0..n {
        normed.set_row(i, &rms_normalize(hidden.row(i), &lw.attn_norm_gain, 1e-5));
    }
    let q_full = normed.matmul(&lw.wq);
    let k_full = normed.matmul(&lw.wk);
    let v_full = normed.matmul(&lw.wv);

    let mut head_logits = Vec::with_capacity(cfg.num_heads);
    let mut attn = Matrix::zeros(n, d);
    for h in 0..cfg.num_heads {
        let q_h = apply_rope(&columns(&q_full, h * dk, (h + 1) * dk), positions, cfg.rope_base)
            .expect("even head width");
        let k_h = apply_rope(&columns(&k_full, h * dk, (h + 1) * dk), positions, cfg.rope_base)
            .expect("even head width");
        let v_h = columns(&v_full, h * dk, (h + 1) * dk);
        let logits = scaled_qk_logits(&q_h, &k_h);

        let mut masked = logits.clone();
        for i in 0..n {
            for j in i + 1..n {
                masked.row_mut(i)[j] = f32::NEG_INFINITY;
            }
        }
        let probs = row_softmax(&masked);
        let out_h = probs.matmul(&v_h);
        for i in 0..n {
            attn.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(out_h.row(i));
        }
        head_logits.push(logits);
    }

    let projected = attn.matmul(&lw.wo);
    let mut out = hidden.clone();
    for i in 0..n {
        for c in 0..d {
            out.row_mut(i)[c] += projected.row(i)[c];
        }
    }

    let mut normed2 = Matrix::zeros(n, d);
    for i in 0..n {
        normed2.set_row(i, &rms_normalize(out.row(i), &lw.mlp_norm_gain, 1e-5));
    }
    let mut inner = normed2.matmul(&lw.w_in);
    for r in 0..n {
        for v in inner.row_mut(r) {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    let mlp = inner.matmul(&lw.w_out);
    for i in 0..n {
        for c in 0..d {
            out.row_mut(i)[c] += mlp.row(i)[c];
        }
    }

    BlockTrace { output: out, head_logits }
}

/// Reference forward: run blocks 1..=`through_layer` over raw embeddings.
pub fn reference_forward(
    weights: &Weights,
    mut hidden: Matrix,
    positions: &[usize],
    through_layer: usize,
) -> Matrix {
    for layer in 1..=through_layer {
        hidden = reference_block(weights, layer, &hidden, positions).output;
    }
    hidden
}

/// Reference vocab logits: full forward plus final norm and unembedding.
pub fn reference_logits(weights: &Weights, hidden: Matrix, positions: &[usize]) -> Matrix {
    let hidden = reference_forward(weights, hidden, positions, weights.config.num_layers);
    let mut normed = Matrix::zeros(hidden.rows(), hidden.cols());
    for i in 0..hidden.rows() {
        normed.set_row(i, &rms_normalize(hidden.row(i), &weights.final_norm_gain, 1e-5));
    }
    normed.matmul(&weights.unembedding)
}

fn reference_embed(weights: &Weights, path: &ReflectionPath) -> Result<Matrix> {
    let d = weights.config.model_dim;
    let mut hidden = Matrix::zeros(path.sequence.len(), d);
    for (row, token) in path.sequence.tokens().iter().enumerate() {
        match token {
            Token::Text { id, .. } => {
                hidden.set_row(row, weights.token_embedding.row(*id as usize));
            }
            Token::Visual { embedding, .. } => hidden.set_row(row, embedding),
        }
    }
    Ok(hidden)
}

/// The reflection token's saliency scores recomputed by running full
/// standard attention at `layer` (softmax, value products and all) and
/// extracting the head-averaged pre-softmax logits over the visual keys.
pub fn reference_reflection_logits(
    path: &ReflectionPath,
    weights: &Weights,
    layer: usize,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    if layer < 1 || layer > cfg.num_layers {
        return Err(Error::Config(format!(
            "reflection layer {layer} outside 1..={}",
            cfg.num_layers
        )));
    }
    let mut hidden = reference_embed(weights, path)?;
    for l in 1..layer {
        hidden = reference_block(weights, l, &hidden, &path.positions).output;
    }
    let trace = reference_block(weights, layer, &hidden, &path.positions);

    let refl = path.sequence.reflection_index();
    let visual_rows: Vec<usize> = path
        .sequence
        .visual_labels()
        .iter()
        .map(|&(row, _, _)| row)
        .collect();
    let mut out = Vec::with_capacity(visual_rows.len());
    for &col in &visual_rows {
        let mut acc = 0.0f32;
        for head in &trace.head_logits {
            acc += head.row(refl)[col];
        }
        out.push(acc / cfg.num_heads as f32);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exhaustive top-k
// ---------------------------------------------------------------------------

/// Full-sort top-k: order by (score desc, flat index asc), take `keep`,
/// return ascending. The comparator matches the engine's; the algorithm is
/// deliberately different.
pub fn brute_force_topk(table: &SaliencyTable, keep: usize) -> Vec<usize> {
    let mut rows: Vec<(usize, f32)> = table
        .rows()
        .iter()
        .map(|r| (r.flat_index, r.score))
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = rows.into_iter().take(keep).map(|(i, _)| i).collect();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// Linear baseline
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct BaselineRun {
    pub output_ids: Vec<u32>,
    pub counters: WorkCounters,
}

/// The linear comparator: sample `frames` uniformly, prefill the single
/// concatenated sequence through every layer, then greedy-decode.
pub fn baseline_run(
    weights: &Weights,
    video: &SyntheticVideo,
    system: &[u32],
    query: &[u32],
    frames: usize,
    max_new: usize,
) -> Result<BaselineRun> {
    let cfg = &weights.config;
    let paths = build_reflection_paths(weights, video, system, query, frames, frames)?;
    let path = &paths[0];
    let n = path.sequence.len() as u64;
    let d = cfg.model_dim as u64;
    let f32_bytes = std::mem::size_of::<f32>() as u64;

    let mut counters = WorkCounters::new();
    let hidden_bytes = n * d * f32_bytes;
    let cache_bytes = cfg.num_layers as u64 * n * 2 * d * f32_bytes;
    let logits_bytes = n * cfg.vocab_size as u64 * f32_bytes;
    counters.alloc(hidden_bytes + cache_bytes + logits_bytes);

    let hidden = embed_sequence(weights, &path.sequence)?;
    let mut cache = KVCache::new(cfg.num_layers);
    let logits = crate::model::forward_range(
        weights,
        hidden,
        &path.positions,
        1,
        cfg.num_layers + 1,
        &mut cache,
        &mut counters,
    )?;
    let last = logits.row(logits.rows() - 1).to_vec();
    counters.release(hidden_bytes + logits_bytes);

    let output_ids = crate::model::greedy_decode(
        weights,
        &mut cache,
        &last,
        path.sequence.len(),
        max_new,
        &mut counters,
    )?;
    let decode_bytes = if max_new == 0 {
        0
    } else {
        (max_new as u64 - 1) * cfg.num_layers as u64 * 2 * d * f32_bytes
    };
    counters.release(cache_bytes + decode_bytes);
    Ok(BaselineRun { output_ids, counters })
}

// ---------------------------------------------------------------------------
// Hidden divergence across paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DivergenceRow {
    pub segment: SegmentKind,
    /// Path-local row index of the token.
    pub token_index: usize,
    pub path_a: usize,
    pub path_b: usize,
    pub l2: f32,
    pub cosine: f32,
}

/// Pairwise distances between the reflection-layer hidden states of shared
/// (system and query) tokens across paths.
#[derive(Debug, Clone, Default)]
pub struct DivergenceReport {
    pub rows: Vec<DivergenceRow>,
}

impl DivergenceReport {
    pub fn max_l2(&self, segment: SegmentKind) -> f32 {
        self.rows
            .iter()
            .filter(|r| r.segment == segment)
            .map(|r| r.l2)
            .fold(0.0, f32::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "segment,token_index,path_a,path_b,l2,cosine")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.segment, r.token_index, r.path_a, r.path_b, r.l2, r.cosine
            )?;
        }
        Ok(())
    }
}

/// Measure how far shared-token hidden states drift apart across paths.
/// Requires a completed self-reflective prefill. R = 1 gives an empty
/// report.
pub fn hidden_divergence(paths: &[ReflectionPath]) -> Result<DivergenceReport> {
    let mut report = DivergenceReport::default();
    if paths.len() < 2 {
        return Ok(report);
    }
    let seq = &paths[0].sequence;
    let shared_rows: Vec<(usize, SegmentKind)> = (0..seq.system_len())
        .map(|i| (i, SegmentKind::System))
        .chain(
            (seq.system_len() + seq.visual_len()..seq.len()).map(|i| (i, SegmentKind::Query)),
        )
        .collect();
    for a in 0..paths.len() {
        for b in a + 1..paths.len() {
            let ha = paths[a].hidden_at_l.as_ref().ok_or_else(|| {
                Error::Contract("divergence needs a completed reflective prefill".into())
            })?;
            let hb = paths[b].hidden_at_l.as_ref().ok_or_else(|| {
                Error::Contract("divergence needs a completed reflective prefill".into())
            })?;
            for &(row, segment) in &shared_rows {
                let va = ha.row(row);
                let vb = hb.row(row);
                let mut dist2 = 0.0f32;
                for c in 0..va.len() {
                    let diff = va[c] - vb[c];
                    dist2 += diff * diff;
                }
                let na = dot(va, va).sqrt();
                let nb = dot(vb, vb).sqrt();
                let cosine = if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(va, vb) / (na * nb)
                };
                report.rows.push(DivergenceRow {
                    segment,
                    token_index: row,
                    path_a: a,
                    path_b: b,
                    l2: dist2.sqrt(),
                    cosine,
                });
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Planted-signal workload and bias calibration
// ---------------------------------------------------------------------------

const PROBE_SEED: u64 = 0xA11C_E5ED;
const PLACEMENT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

fn solve_linear_f64(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Calibration("singular projection gram matrix".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Ok(x)
}

/// Least-norm feature-space preimage of an embedding-space target under the
/// vision projection: solves (W^T W) z = target and returns W z.
fn least_norm_preimage(projection: &Matrix, target: &[f64]) -> Result<Vec<f64>> {
    let d = projection.cols();
    debug_assert_eq!(target.len(), d);
    let mut gram = vec![vec![0.0f64; d]; d];
    for v in 0..projection.rows() {
        let row = projection.row(v);
        for i in 0..d {
            for j in 0..d {
                gram[i][j] += row[i] as f64 * row[j] as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| gram[i][i]).sum();
    let ridge = trace.max(1e-30) / d as f64 * 1e-9;
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += ridge;
    }
    let z = solve_linear_f64(gram, target.to_vec())?;
    let mut feature = vec![0.0f64; projection.rows()];
    for (v, f) in feature.iter_mut().enumerate() {
        let row = projection.row(v);
        for j in 0..d {
            *f += row[j] as f64 * z[j];
        }
    }
    Ok(feature)
}

/// Compute the feature-space direction that a prompt-relevant event should
/// carry: the unit vector whose projected embedding maximizes the
/// reflection token's saliency score at the reflection layer.
///
/// The score of a visual key is a linear functional of its pre-norm hidden
/// state; a probe run recovers that functional (averaged over the visual
/// positions of one path), and the least-norm preimage under the vision
/// projection realizes it in feature space. This is what makes a planted
/// event "relevant to the query" for an untrained model: without it the
/// score of a randomly oriented event is symmetric around zero and no bias
/// magnitude can make it reliably salient.
pub fn aligned_event_direction(
    weights: &Weights,
    system: &[u32],
    query: &[u32],
    segment_s: usize,
    patches_per_frame: usize,
) -> Result<Vec<f32>> {
    let cfg = &weights.config;
    let layer = cfg.reflection_layer;
    let dim = cfg.vision_dim;
    if cfg.weight_scale == 0.0 {
        return Err(Error::Calibration(
            "zero weight_scale leaves the vision projection rank-deficient".into(),
        ));
    }

    // Probe: one noise-only path with the target geometry.
    let mut unit0 = vec![0.0f32; dim];
    unit0[0] = 1.0;
    let probe_event = PlantedEvent {
        frame_range: (0, 0),
        patch_range: (0, 0),
        direction: unit0,
        bias: 0.0,
    };
    let video = generate_planted_video(PROBE_SEED, segment_s, patches_per_frame, dim, probe_event)?;
    let paths = build_reflection_paths(weights, &video, system, query, segment_s, segment_s)?;
    let path = &paths[0];

    let mut cache = KVCache::new(cfg.num_layers);
    let mut counters = WorkCounters::new();
    let hidden = embed_sequence(weights, &path.sequence)?;
    let hidden = crate::model::advance_layers(
        weights,
        hidden,
        &path.positions,
        1,
        layer - 1,
        &mut cache,
        &mut counters,
    )?;
    let refl = path.sequence.reflection_index();
    let q = reflection_query(weights, layer, &hidden, refl, path.positions[refl]);

    // Average the key-side score functional over the visual positions: for
    // key input x at position p the score is <K^T R(p)^T q, gain * x/rms>.
    let d = cfg.model_dim;
    let dk = cfg.head_dim;
    let lw = &weights.layers[layer - 1];
    let sys_len = path.sequence.system_len();
    let n_v = path.sequence.visual_len();
    let mut functional = vec![0.0f64; d];
    for p in sys_len..sys_len + n_v {
        let mut v = q.clone();
        for h in 0..cfg.num_heads {
            crate::numerics::rope_rotate_in_place(
                &mut v[h * dk..(h + 1) * dk],
                -(p as f32),
                cfg.rope_base,
            );
        }
        for (j, slot) in functional.iter_mut().enumerate() {
            *slot += dot(lw.wk.row(j), &v) as f64;
        }
    }
    for (j, slot) in functional.iter_mut().enumerate() {
        *slot *= lw.attn_norm_gain[j] as f64 / n_v as f64;
    }

    let feature = least_norm_preimage(&weights.vision_projection, &functional)?;
    let norm: f64 = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Calibration("degenerate alignment direction".into()));
    }
    Ok(feature.iter().map(|v| (v / norm) as f32).collect())
}

/// Flat indices of the saliency rows that fall inside the planted event.
pub fn planted_token_indices(saliency: &SaliencyTable, event: &PlantedEvent) -> Vec<usize> {
    saliency
        .rows()
        .iter()
        .filter(|r| event.contains(r.frame, r.patch))
        .map(|r| r.flat_index)
        .collect()
}

/// Fraction of planted tokens that survived selection. Returns 0 when no
/// planted cell was sampled.
pub fn planted_recall(output: &PipelineOutput, event: &PlantedEvent) -> f32 {
    let planted = planted_token_indices(&output.saliency, event);
    if planted.is_empty() {
        return 0.0;
    }
    let hits = planted
        .iter()
        .filter(|idx| output.selected.binary_search(idx).is_ok())
        .count();
    hits as f32 / planted.len() as f32
}

/// A reproducible planted-signal workload: fixed model, prompt, geometry,
/// and alignment direction; per-seed event placement and noise.
#[derive(Debug, Clone)]
pub struct PlantedWorkload {
    pub weights: Weights,
    pub system: Vec<u32>,
    pub query: Vec<u32>,
    pub video_frames: usize,
    pub patches_per_frame: usize,
    /// Extent of the planted window, in frames and patches.
    pub event_frames: usize,
    pub event_patches: usize,
    pub frames_t: usize,
    pub segment_s: usize,
    pub keep: Option<usize>,
    pub mode: InferenceMode,
    pub strategy: PositionStrategy,
    pub exec: ExecMode,
    pub max_new: usize,
    pub direction: Vec<f32>,
}

impl PlantedWorkload {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &ModelConfig,
        system: Vec<u32>,
        query: Vec<u32>,
        video_frames: usize,
        patches_per_frame: usize,
        event_frames: usize,
        event_patches: usize,
        frames_t: usize,
        segment_s: usize,
    ) -> Result<Self> {
        if frames_t > video_frames {
            return Err(Error::Range(format!(
                "cannot sample {frames_t} frames from {video_frames}"
            )));
        }
        let max_gap = video_frames.div_ceil(frames_t);
        if event_frames < max_gap {
            return Err(Error::Config(format!(
                "event window of {event_frames} frames can fall between samples (max gap {max_gap})"
            )));
        }
        if event_frames > video_frames || event_patches > patches_per_frame {
            return Err(Error::Range("event extent exceeds video".into()));
        }
        let weights = init_weights(config)?;
        let direction =
            aligned_event_direction(&weights, &system, &query, segment_s, patches_per_frame)?;
        Ok(PlantedWorkload {
            weights,
            system,
            query,
            video_frames,
            patches_per_frame,
            event_frames,
            event_patches,
            frames_t,
            segment_s,
            keep: None,
            mode: InferenceMode::Regular,
            strategy: PositionStrategy::Reassigned,
            exec: ExecMode::Batch,
            max_new: 4,
            direction,
        })
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            frames_t: self.frames_t,
            segment_s: self.segment_s,
            keep: self.keep,
            mode: self.mode,
            strategy: self.strategy,
            exec: self.exec,
            max_new_tokens: self.max_new,
        }
    }

    /// Event placement is seeded independently of the noise stream.
    pub fn video(&self, seed: u64, bias: f32) -> Result<SyntheticVideo> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PLACEMENT_SALT);
        let frame_start = rng.next_u32() as usize % (self.video_frames - self.event_frames + 1);
        let patch_start = rng.next_u32() as usize % (self.patches_per_frame - self.event_patches + 1);
        let event = PlantedEvent {
            frame_range: (frame_start, frame_start + self.event_frames - 1),
            patch_range: (patch_start, patch_start + self.event_patches - 1),
            direction: self.direction.clone(),
            bias,
        };
        generate_planted_video(
            seed,
            self.video_frames,
            self.patches_per_frame,
            self.weights.config.vision_dim,
            event,
        )
    }

    pub fn run(&self, seed: u64, bias: f32) -> Result<(PipelineOutput, PlantedEvent)> {
        let video = self.video(seed, bias)?;
        let event = video.event.clone();
        let out = run_pipeline(&self.weights, &video, &self.system, &self.query, &self.run_spec())?;
        Ok((out, event))
    }

    /// Aggregate recall (selected planted tokens / planted tokens) over a
    /// seed set.
    pub fn recall(&self, seeds: &[u64], bias: f32) -> Result<f32> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for &seed in seeds {
            let (out, event) = self.run(seed, bias)?;
            let planted = planted_token_indices(&out.saliency, &event);
            total += planted.len();
            hits += planted
                .iter()
                .filter(|idx| out.selected.binary_search(idx).is_ok())
                .count();
        }
        if total == 0 {
            return Err(Error::Contract("workload sampled no planted tokens".into()));
        }
        Ok(hits as f32 / total as f32)
    }

    /// Chance-level recall for this workload: keep / (R * N_V).
    pub fn chance_recall(&self) -> f32 {
        let n_v = self.segment_s * self.patches_per_frame;
        let total = (self.frames_t / self.segment_s) * n_v;
        self.keep.unwrap_or(n_v) as f32 / total as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub beta: f32,
    pub recall: f32,
}

/// Result of a bias calibration run, with the full evaluation trace.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub beta: f32,
    pub target_recall: f32,
    pub trace: Vec<CalibrationPoint>,
}

impl Calibration {
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "beta,recall")?;
        for p in &self.trace {
            writeln!(w, "{},{}", p.beta, p.recall)?;
        }
        Ok(())
    }
}

const BETA_CAP: f32 = 65_536.0;

/// Find the smallest event bias reaching `target_recall` over the training
/// seeds: double until the target is met, then bisect.
pub fn calibrate_beta(
    workload: &PlantedWorkload,
    target_recall: f32,
    seeds: &[u64],
) -> Result<Calibration> {
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::Range(format!(
            "target recall {target_recall} outside (0, 1]"
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Contract("calibration needs at least one seed".into()));
    }
    let mut trace = Vec::new();
    let mut eval = |beta: f32| -> Result<f32> {
        let recall = workload.recall(seeds, beta)?;
        trace.push(CalibrationPoint { beta, recall });
        Ok(recall)
    };

    let mut lo = 0.0f32;
    let mut hi = 0.5f32;
    loop {
        let recall = eval(hi)?;
        if recall >= target_recall {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > BETA_CAP {
            return Err(Error::Calibration(format!(
                "recall {recall:.4} at bias {lo} still below target {target_recall}"
            )));
        }
    }
    for _ in 0..12 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? >= target_recall {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Calibration { beta: hi, target_recall, trace })
}
