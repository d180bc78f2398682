//! The self-reflective sampling pipeline.
//!
//! A run splits the sampled video frames across independent reflection
//! paths, prefills each path up to the reflection layer, scores every
//! visual token with the reflection token's attention logits (no softmax,
//! no value product), selects the top-k tokens across all paths, and
//! converges into a single inference path that finishes with ordinary
//! causal attention under reassigned positions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{
    advance_layers, greedy_decode, project_logits, KVCache, Weights, WorkCounters, WorkSnapshot,
};
use crate::numerics::{dot, rms_normalize, rope_rotate_in_place, Matrix};
use crate::vision::{encode_and_project, sample_frames_uniform, SyntheticVideo, VisualToken};

const F32_BYTES: u64 = std::mem::size_of::<f32>() as u64;

/// Which part of the input a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    System,
    Visual,
    Query,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegmentKind::System => "system",
            SegmentKind::Visual => "visual",
            SegmentKind::Query => "query",
        })
    }
}

/// One input token: a text id or a projected visual embedding with its
/// source (frame, patch) label.
#[derive(Debug, Clone)]
pub enum Token {
    Text { id: u32, segment: SegmentKind },
    Visual { embedding: Vec<f32>, frame: usize, patch: usize },
}

impl Token {
    pub fn segment(&self) -> SegmentKind {
        match self {
            Token::Text { segment, .. } => *segment,
            Token::Visual { .. } => SegmentKind::Visual,
        }
    }
}

/// A token sequence in system / visual / query order. The final token is
/// the reflection token (the last token of the user query).
#[derive(Debug, Clone)]
pub struct SegmentedSequence {
    tokens: Vec<Token>,
    system_len: usize,
    visual_len: usize,
    query_len: usize,
}

impl SegmentedSequence {
    pub fn new(system: &[u32], visual: Vec<VisualToken>, query: &[u32]) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::Contract(
                "query must be nonempty; the reflection token is its last token".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(system.len() + visual.len() + query.len());
        for &id in system {
            tokens.push(Token::Text { id, segment: SegmentKind::System });
        }
        let visual_len = visual.len();
        for t in visual {
            tokens.push(Token::Visual { embedding: t.embedding, frame: t.frame, patch: t.patch });
        }
        for &id in query {
            tokens.push(Token::Text { id, segment: SegmentKind::Query });
        }
        Ok(SegmentedSequence {
            tokens,
            system_len: system.len(),
            visual_len,
            query_len: query.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn system_len(&self) -> usize {
        self.system_len
    }

    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    /// Row index of the reflection token (always the last token).
    pub fn reflection_index(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn token(&self, i: usize) -> &Token {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// (row, frame, patch) for every visual token, in sequence order.
    pub fn visual_labels(&self) -> Vec<(usize, usize, usize)> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(row, t)| match t {
                Token::Visual { frame, patch, .. } => Some((row, *frame, *patch)),
                _ => None,
            })
            .collect()
    }

    pub fn text_ids(&self, segment: SegmentKind) -> Vec<u32> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Text { id, segment: s } if *s == segment => Some(*id),
                _ => None,
            })
            .collect()
    }
}

/// One independent reflection path. Paths share system and query tokens and
/// differ only in their visual segment; positions are path-local.
#[derive(Debug, Clone)]
pub struct ReflectionPath {
    pub index: usize,
    pub sequence: SegmentedSequence,
    pub positions: Vec<usize>,
    /// Output of the reflection layer, filled by the reflective prefill.
    pub hidden_at_l: Option<Matrix>,
    /// KV entries for layers 1..=reflection_layer, same provenance.
    pub cache: Option<KVCache>,
    /// Saliency score per visual token, same order as the visual segment.
    pub scores: Option<Vec<f32>>,
}

impl ReflectionPath {
    pub fn new(index: usize, sequence: SegmentedSequence) -> Self {
        let positions = (0..sequence.len()).collect();
        ReflectionPath {
            index,
            sequence,
            positions,
            hidden_at_l: None,
            cache: None,
            scores: None,
        }
    }
}

/// Saliency scores for every visual token of every path.
#[derive(Debug, Clone)]
pub struct SaliencyTable {
    rows: Vec<SaliencyRow>,
    tokens_per_path: usize,
}

#[derive(Debug, Clone)]
pub struct SaliencyRow {
    pub path: usize,
    pub frame: usize,
    pub patch: usize,
    /// path * tokens_per_path + local index (frame-major).
    pub flat_index: usize,
    pub score: f32,
}

impl SaliencyTable {
    pub fn from_paths(paths: &[ReflectionPath]) -> Result<Self> {
        let tokens_per_path = paths
            .first()
            .map(|p| p.sequence.visual_len())
            .ok_or_else(|| Error::Contract("no reflection paths".into()))?;
        let mut rows = Vec::with_capacity(paths.len() * tokens_per_path);
        for path in paths {
            let scores = path
                .scores
                .as_ref()
                .ok_or_else(|| Error::Contract("path has no scores; run self_reflect first".into()))?;
            let labels = path.sequence.visual_labels();
            if scores.len() != tokens_per_path || labels.len() != tokens_per_path {
                return Err(Error::Contract(
                    "paths disagree on visual token count".into(),
                ));
            }
            for (local, (&score, &(_, frame, patch))) in
                scores.iter().zip(labels.iter()).enumerate()
            {
                if !score.is_finite() {
                    return Err(Error::Contract(format!(
                        "non-finite saliency score for path {} token {local}",
                        path.index
                    )));
                }
                rows.push(SaliencyRow {
                    path: path.index,
                    frame,
                    patch,
                    flat_index: path.index * tokens_per_path + local,
                    score,
                });
            }
        }
        Ok(SaliencyTable { rows, tokens_per_path })
    }

    pub fn rows(&self) -> &[SaliencyRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn tokens_per_path(&self) -> usize {
        self.tokens_per_path
    }

    /// Build directly from per-path score vectors (labels become frame=local,
    /// patch=0); mainly for selection tests.
    pub fn from_scores(per_path: &[Vec<f32>]) -> Result<Self> {
        let tokens_per_path = per_path.first().map(|p| p.len()).unwrap_or(0);
        let mut rows = Vec::new();
        for (path, scores) in per_path.iter().enumerate() {
            if scores.len() != tokens_per_path {
                return Err(Error::Contract("ragged score table".into()));
            }
            for (local, &score) in scores.iter().enumerate() {
                rows.push(SaliencyRow {
                    path,
                    frame: local,
                    patch: 0,
                    flat_index: path * tokens_per_path + local,
                    score,
                });
            }
        }
        Ok(SaliencyTable { rows, tokens_per_path })
    }
}

/// How the converged path resumes inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Rebuild an input-level sequence from the selected tokens and restart
    /// the forward pass at layer 1.
    Regular,
    /// Gather reflection-layer hidden states and resume after that layer.
    Smooth,
}

/// How positions are assigned in the converged path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionStrategy {
    /// Consecutive 0..N-1.
    #[serde(rename = "reassigned")]
    Reassigned,
    /// Every token keeps its original path-local position (duplicates
    /// across paths possible).
    #[serde(rename = "dup")]
    OriginalDuplicated,
    /// Original position plus path_index * path_length (distinct, gappy).
    #[serde(rename = "inc")]
    OriginalPathIncremented,
    /// All visual tokens share one position.
    #[serde(rename = "single")]
    SinglePosition,
}

/// Whether reflection paths run concurrently or one at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Batch,
    Seq,
}

macro_rules! string_enum {
    ($ty:ty, $(($variant:path, $name:literal)),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($variant => $name),+ };
                f.write_str(s)
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(InferenceMode, (InferenceMode::Regular, "regular"), (InferenceMode::Smooth, "smooth"));
string_enum!(
    PositionStrategy,
    (PositionStrategy::Reassigned, "reassigned"),
    (PositionStrategy::OriginalDuplicated, "dup"),
    (PositionStrategy::OriginalPathIncremented, "inc"),
    (PositionStrategy::SinglePosition, "single")
);
string_enum!(ExecMode, (ExecMode::Batch, "batch"), (ExecMode::Seq, "seq"));

/// Where each converged token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenProvenance {
    pub segment: SegmentKind,
    pub path: usize,
    pub original_position: usize,
}

/// The resolved convergence decision: which tokens survive and how the
/// final path runs.
#[derive(Debug, Clone)]
pub struct ConvergencePlan {
    /// Selected flat global indices, sorted ascending (temporal order).
    pub selected: Vec<usize>,
    pub keep: usize,
    pub mode: InferenceMode,
    pub strategy: PositionStrategy,
    pub exec: ExecMode,
}

impl ConvergencePlan {
    pub fn validate(&self, total_tokens: usize) -> Result<()> {
        if self.selected.len() != self.keep {
            return Err(Error::Contract(format!(
                "plan keeps {} tokens but selected {}",
                self.keep,
                self.selected.len()
            )));
        }
        if !self.selected.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract("selection must be strictly increasing".into()));
        }
        if self.selected.last().is_some_and(|&last| last >= total_tokens) {
            return Err(Error::Contract("selection index out of range".into()));
        }
        Ok(())
    }
}

/// Split the sampled frames' visual tokens into per-path chunks of
/// `segment_s` frames. Frame-major token order is preserved inside a path.
pub fn split_paths(
    tokens: Vec<VisualToken>,
    frames_t: usize,
    segment_s: usize,
) -> Result<Vec<Vec<VisualToken>>> {
    if segment_s == 0 || frames_t == 0 {
        return Err(Error::Range("frame counts must be positive".into()));
    }
    if frames_t % segment_s != 0 {
        return Err(Error::Divisibility { frames: frames_t, segment: segment_s });
    }
    if tokens.len() % frames_t != 0 {
        return Err(Error::Dimension(format!(
            "{} tokens do not cover {frames_t} frames evenly",
            tokens.len()
        )));
    }
    let patches = tokens.len() / frames_t;
    let per_path = segment_s * patches;
    let mut paths = Vec::with_capacity(frames_t / segment_s);
    let mut rest = tokens;
    while !rest.is_empty() {
        let tail = rest.split_off(per_path);
        paths.push(rest);
        rest = tail;
    }
    Ok(paths)
}

/// Assemble one path's input sequence: system + visual + query, with
/// path-local positions 0..N_r-1 and the last query token as reflection
/// token.
pub fn build_path_sequence(
    index: usize,
    system: &[u32],
    visual: Vec<VisualToken>,
    query: &[u32],
) -> Result<ReflectionPath> {
    let sequence = SegmentedSequence::new(system, visual, query)?;
    Ok(ReflectionPath::new(index, sequence))
}

/// Embed a segmented sequence into the model space.
pub fn embed_sequence(weights: &Weights, sequence: &SegmentedSequence) -> Result<Matrix> {
    let d = weights.config.model_dim;
    let mut hidden = Matrix::zeros(sequence.len(), d);
    for (row, token) in sequence.tokens().iter().enumerate() {
        match token {
            Token::Text { id, .. } => {
                let emb = weights.embed_tokens(&[*id])?;
                hidden.set_row(row, emb.row(0));
            }
            Token::Visual { embedding, .. } => {
                if embedding.len() != d {
                    return Err(Error::Dimension(format!(
                        "visual embedding width {} != model_dim {d}",
                        embedding.len()
                    )));
                }
                hidden.set_row(row, embedding);
            }
        }
    }
    Ok(hidden)
}

/// The reflection token's per-head query at `layer`, computed from the
/// hidden state entering that layer (post-norm, layer's own projection,
/// rotary at the token's path-local position). Returned as one d-wide row.
pub fn reflection_query(
    weights: &Weights,
    layer: usize,
    hidden_entering_layer: &Matrix,
    row: usize,
    position: usize,
) -> Vec<f32> {
    let cfg = &weights.config;
    let lw = &weights.layers[layer - 1];
    let normed = rms_normalize(hidden_entering_layer.row(row), &lw.attn_norm_gain, 1e-5);
    let normed = Matrix::from_vec(1, cfg.model_dim, normed).expect("row width");
    let mut q = normed.matmul(&lw.wq);
    let dk = cfg.head_dim;
    for h in 0..cfg.num_heads {
        rope_rotate_in_place(&mut q.row_mut(0)[h * dk..(h + 1) * dk], position as f32, cfg.rope_base);
    }
    q.row(0).to_vec()
}

/// Key projections at `layer` for the given rows (post-norm, rotary at each
/// row's position). One output row per input row.
pub fn layer_keys(
    weights: &Weights,
    layer: usize,
    hidden_entering_layer: &Matrix,
    rows: &[usize],
    positions: &[usize],
) -> Matrix {
    let cfg = &weights.config;
    let lw = &weights.layers[layer - 1];
    let dk = cfg.head_dim;
    let mut keys = Matrix::zeros(rows.len(), cfg.model_dim);
    for (out_row, &r) in rows.iter().enumerate() {
        let normed = rms_normalize(hidden_entering_layer.row(r), &lw.attn_norm_gain, 1e-5);
        let normed = Matrix::from_vec(1, cfg.model_dim, normed).expect("row width");
        let k = normed.matmul(&lw.wk);
        keys.set_row(out_row, k.row(0));
        let p = positions[r] as f32;
        for h in 0..cfg.num_heads {
            rope_rotate_in_place(&mut keys.row_mut(out_row)[h * dk..(h + 1) * dk], p, cfg.rope_base);
        }
    }
    keys
}

/// Scaled query-key scores, head-averaged, without softmax or value
/// multiplication. `query` and each key row are d-wide with `num_heads`
/// head slices.
pub fn saliency_scores(query: &[f32], keys: &Matrix, num_heads: usize) -> Vec<f32> {
    debug_assert_eq!(query.len(), keys.cols());
    debug_assert_eq!(query.len() % num_heads, 0);
    let dk = query.len() / num_heads;
    let scale = 1.0 / (dk as f32).sqrt();
    let mut out = Vec::with_capacity(keys.rows());
    for r in 0..keys.rows() {
        let key = keys.row(r);
        let mut acc = 0.0f32;
        for h in 0..num_heads {
            acc += dot(&query[h * dk..(h + 1) * dk], &key[h * dk..(h + 1) * dk]) * scale;
        }
        out.push(acc / num_heads as f32);
    }
    out
}

/// What must stay live after a path finishes its reflective prefill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathRetention {
    /// Keep everything (batch execution).
    Full,
    /// Scores only; regular convergence rebuilds from input tokens.
    ScoresOnly,
    /// Keep layer hiddens and caches for smooth convergence; non-first
    /// paths only need their visual rows.
    HiddenAndCache,
}

#[derive(Debug, Clone, Copy)]
struct PathBytes {
    hidden: u64,
    cache: u64,
}

impl PathBytes {
    fn new(tokens: usize, model_dim: usize, layers: usize) -> Self {
        let tokens = tokens as u64;
        let d = model_dim as u64;
        PathBytes {
            hidden: tokens * d * F32_BYTES,
            cache: layers as u64 * tokens * 2 * d * F32_BYTES,
        }
    }

    fn footprint(&self) -> u64 {
        self.hidden + self.cache
    }
}

fn retained_path_bytes(
    retention: PathRetention,
    path_index: usize,
    full: PathBytes,
    visual_only: PathBytes,
) -> u64 {
    match retention {
        PathRetention::Full => full.footprint(),
        PathRetention::ScoresOnly => 0,
        PathRetention::HiddenAndCache => {
            if path_index == 0 {
                full.footprint()
            } else {
                visual_only.footprint()
            }
        }
    }
}

fn reflect_one_path(path: &mut ReflectionPath, weights: &Weights, layer: usize) -> Result<WorkCounters> {
    let cfg = &weights.config;
    let mut counters = WorkCounters::new();
    let mut cache = KVCache::new(cfg.num_layers);
    let hidden = embed_sequence(weights, &path.sequence)?;
    // Layers before the reflection layer.
    let hidden = advance_layers(weights, hidden, &path.positions, 1, layer - 1, &mut cache, &mut counters)?;

    // Saliency probe: read the attention inputs of `layer` without running
    // softmax or value products.
    let refl_row = path.sequence.reflection_index();
    let query = reflection_query(weights, layer, &hidden, refl_row, path.positions[refl_row]);
    let visual_rows: Vec<usize> = path
        .sequence
        .visual_labels()
        .iter()
        .map(|&(row, _, _)| row)
        .collect();
    let keys = layer_keys(weights, layer, &hidden, &visual_rows, &path.positions);
    let scores = saliency_scores(&query, &keys, cfg.num_heads);
    counters.sra_macs +=
        (visual_rows.len() * cfg.num_heads * cfg.head_dim) as u64;

    // Complete the reflection layer so smooth convergence can resume after it.
    let hidden = advance_layers(weights, hidden, &path.positions, layer, layer, &mut cache, &mut counters)?;

    path.hidden_at_l = Some(hidden);
    path.cache = Some(cache);
    path.scores = Some(scores);
    Ok(counters)
}

/// Run the self-reflective prefill for every path and collect the saliency
/// table. In batch execution the paths run concurrently (they are fully
/// independent); per-path counters are merged in path order so the result
/// does not depend on scheduling. Sequential execution runs one path at a
/// time and releases whatever the retention policy allows.
pub fn self_reflect(
    paths: &mut [ReflectionPath],
    weights: &Weights,
    layer: usize,
    exec: ExecMode,
    retention: PathRetention,
    run_counters: &mut WorkCounters,
) -> Result<SaliencyTable> {
    let cfg = &weights.config;
    if layer < 1 || layer > cfg.num_layers {
        return Err(Error::Config(format!(
            "reflection layer {layer} outside 1..={}",
            cfg.num_layers
        )));
    }
    if paths.is_empty() {
        return Err(Error::Contract("no reflection paths".into()));
    }
    let n_r = paths[0].sequence.len();
    let n_v = paths[0].sequence.visual_len();
    for p in paths.iter() {
        if p.sequence.len() != n_r || p.sequence.visual_len() != n_v {
            return Err(Error::Contract("paths must share one geometry".into()));
        }
    }
    let full = PathBytes::new(n_r, cfg.model_dim, layer);
    let visual_only = PathBytes::new(n_v, cfg.model_dim, layer);

    match exec {
        ExecMode::Batch => {
            run_counters.alloc(paths.len() as u64 * full.footprint());
            let results: Vec<Result<WorkCounters>> = paths
                .par_iter_mut()
                .map(|p| reflect_one_path(p, weights, layer))
                .collect();
            for result in results {
                run_counters.absorb_work(&result?);
            }
        }
        ExecMode::Seq => {
            for i in 0..paths.len() {
                run_counters.alloc(full.footprint());
                let work = reflect_one_path(&mut paths[i], weights, layer)?;
                run_counters.absorb_work(&work);
                let retained = retained_path_bytes(retention, i, full, visual_only);
                run_counters.release(full.footprint() - retained);
                if retention == PathRetention::ScoresOnly {
                    paths[i].hidden_at_l = None;
                    paths[i].cache = None;
                }
            }
        }
    }
    SaliencyTable::from_paths(paths)
}

/// Bytes still held for path buffers once `self_reflect` returns.
pub fn retained_reflect_bytes(
    paths: &[ReflectionPath],
    layer: usize,
    model_dim: usize,
    exec: ExecMode,
    retention: PathRetention,
) -> u64 {
    let n_r = paths[0].sequence.len();
    let n_v = paths[0].sequence.visual_len();
    let full = PathBytes::new(n_r, model_dim, layer);
    let visual_only = PathBytes::new(n_v, model_dim, layer);
    match exec {
        ExecMode::Batch => paths.len() as u64 * full.footprint(),
        ExecMode::Seq => (0..paths.len())
            .map(|i| retained_path_bytes(retention, i, full, visual_only))
            .sum(),
    }
}

/// Top-k selection across all paths: highest scores win, ties break toward
/// the lower flat index, and the result is sorted ascending so the original
/// temporal order is preserved. `keep = 0` is legal but degenerate.
pub fn select_salient(table: &SaliencyTable, keep: usize) -> Result<Vec<usize>> {
    let rows = table.rows();
    if keep > rows.len() {
        return Err(Error::Range(format!(
            "cannot keep {keep} of {} visual tokens",
            rows.len()
        )));
    }
    if keep == 0 {
        log::warn!("empty selection requested; the converged path will carry no visual tokens");
        return Ok(Vec::new());
    }
    debug_assert!(rows.iter().enumerate().all(|(i, r)| r.flat_index == i));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let best_first = |a: &usize, b: &usize| {
        rows[*b]
            .score
            .total_cmp(&rows[*a].score)
            .then(rows[*a].flat_index.cmp(&rows[*b].flat_index))
    };
    if keep < order.len() {
        order.select_nth_unstable_by(keep, best_first);
        order.truncate(keep);
    }
    order.sort_unstable();
    Ok(order)
}

/// Assign positions to a converged sequence. `path_len` is N_r, the length
/// of one reflection path.
pub fn assign_positions(
    provenance: &[TokenProvenance],
    strategy: PositionStrategy,
    path_len: usize,
) -> Vec<usize> {
    match strategy {
        PositionStrategy::Reassigned => (0..provenance.len()).collect(),
        PositionStrategy::OriginalDuplicated => {
            provenance.iter().map(|p| p.original_position).collect()
        }
        PositionStrategy::OriginalPathIncremented => provenance
            .iter()
            .map(|p| p.original_position + p.path * path_len)
            .collect(),
        PositionStrategy::SinglePosition => {
            let system_len = provenance
                .iter()
                .filter(|p| p.segment == SegmentKind::System)
                .count();
            let mut query_next = system_len + 1;
            provenance
                .iter()
                .map(|p| match p.segment {
                    SegmentKind::System => p.original_position,
                    SegmentKind::Visual => system_len,
                    SegmentKind::Query => {
                        let pos = query_next;
                        query_next += 1;
                        pos
                    }
                })
                .collect()
        }
    }
}

/// A converged context, ready for the final pass.
#[derive(Debug, Clone)]
pub struct ConvergedContext {
    pub mode: InferenceMode,
    /// Input embeddings (regular) or gathered reflection-layer hiddens
    /// (smooth).
    pub hidden: Matrix,
    pub positions: Vec<usize>,
    pub provenance: Vec<TokenProvenance>,
    /// Fresh cache (regular) or per-path KV entries gathered for layers
    /// 1..=reflection_layer (smooth).
    pub cache: KVCache,
    /// First layer the final pass runs (1 for regular, l+1 for smooth).
    pub start_layer: usize,
}

/// Merge the reflection paths into a single inference path.
///
/// Regular mode rebuilds an input-level sequence from the selected visual
/// tokens and restarts at layer 1 with an empty cache. Smooth mode gathers
/// reflection-layer hidden states (system and query from path 0, visual
/// rows from their source paths) together with the matching sub-layer KV
/// entries, and resumes after the reflection layer. In both modes the final
/// pass is ordinary causal attention under positions assigned by the plan's
/// strategy.
pub fn converge(
    paths: &[ReflectionPath],
    plan: &ConvergencePlan,
    weights: &Weights,
) -> Result<ConvergedContext> {
    let cfg = &weights.config;
    let layer = cfg.reflection_layer;
    let first = paths.first().ok_or_else(|| Error::Contract("no paths".into()))?;
    let n_v = first.sequence.visual_len();
    let n_r = first.sequence.len();
    let system_len = first.sequence.system_len();
    plan.validate(paths.len() * n_v)?;

    // Provenance is identical in both modes: system and query come from
    // path 0, visual tokens from their source paths in selection order.
    let mut provenance = Vec::with_capacity(system_len + plan.selected.len() + first.sequence.query_len());
    for i in 0..system_len {
        provenance.push(TokenProvenance { segment: SegmentKind::System, path: 0, original_position: i });
    }
    for &flat in &plan.selected {
        let path = flat / n_v;
        let local = flat % n_v;
        provenance.push(TokenProvenance {
            segment: SegmentKind::Visual,
            path,
            original_position: system_len + local,
        });
    }
    for i in 0..first.sequence.query_len() {
        provenance.push(TokenProvenance {
            segment: SegmentKind::Query,
            path: 0,
            original_position: system_len + n_v + i,
        });
    }
    let positions = assign_positions(&provenance, plan.strategy, n_r);

    match plan.mode {
        InferenceMode::Regular => {
            let d = cfg.model_dim;
            let mut hidden = Matrix::zeros(provenance.len(), d);
            let mut row = 0usize;
            for i in 0..system_len {
                match first.sequence.token(i) {
                    Token::Text { id, .. } => {
                        hidden.set_row(row, weights.embed_tokens(&[*id])?.row(0));
                    }
                    _ => return Err(Error::Contract("system segment must be text".into())),
                }
                row += 1;
            }
            for &flat in &plan.selected {
                let path = flat / n_v;
                let local = flat % n_v;
                match paths[path].sequence.token(system_len + local) {
                    Token::Visual { embedding, .. } => hidden.set_row(row, embedding),
                    _ => return Err(Error::Contract("selected token is not visual".into())),
                }
                row += 1;
            }
            for i in 0..first.sequence.query_len() {
                match first.sequence.token(system_len + n_v + i) {
                    Token::Text { id, .. } => {
                        hidden.set_row(row, weights.embed_tokens(&[*id])?.row(0));
                    }
                    _ => return Err(Error::Contract("query segment must be text".into())),
                }
                row += 1;
            }
            Ok(ConvergedContext {
                mode: plan.mode,
                hidden,
                positions,
                provenance,
                cache: KVCache::new(cfg.num_layers),
                start_layer: 1,
            })
        }
        InferenceMode::Smooth => {
            let d = cfg.model_dim;
            let mut hidden = Matrix::zeros(provenance.len(), d);
            let mut cache = KVCache::new(cfg.num_layers);
            for (row, prov) in provenance.iter().enumerate() {
                let src = &paths[prov.path];
                let src_hidden = src.hidden_at_l.as_ref().ok_or_else(|| {
                    Error::Contract("smooth convergence needs retained path hiddens".into())
                })?;
                hidden.set_row(row, src_hidden.row(prov.original_position));
            }
            for l in 1..=layer {
                for prov in &provenance {
                    let src_cache = paths[prov.path].cache.as_ref().ok_or_else(|| {
                        Error::Contract("smooth convergence needs retained path caches".into())
                    })?;
                    let src = src_cache.layer(l);
                    let r = prov.original_position;
                    let dst = cache.layer_mut(l);
                    dst.keys.extend_from_slice(&src.keys[r * d..(r + 1) * d]);
                    dst.values.extend_from_slice(&src.values[r * d..(r + 1) * d]);
                    dst.positions.push(src.positions[r]);
                }
            }
            Ok(ConvergedContext {
                mode: plan.mode,
                hidden,
                positions,
                provenance,
                cache,
                start_layer: layer + 1,
            })
        }
    }
}

/// Result of the converged final pass.
#[derive(Debug)]
pub struct FinalState {
    pub cache: KVCache,
    pub logits: Matrix,
    pub next_position: usize,
}

/// Run the converged context through the remaining layers and the output
/// projection.
pub fn converged_forward(
    weights: &Weights,
    ctx: ConvergedContext,
    counters: &mut WorkCounters,
) -> Result<FinalState> {
    let cfg = &weights.config;
    let mut cache = ctx.cache;
    let hidden = advance_layers(
        weights,
        ctx.hidden,
        &ctx.positions,
        ctx.start_layer,
        cfg.num_layers,
        &mut cache,
        counters,
    )?;
    let logits = project_logits(weights, &hidden);
    let next_position = ctx.positions.iter().copied().max().unwrap_or(0) + 1;
    Ok(FinalState { cache, logits, next_position })
}

/// Per-phase compute deltas of one pipeline run.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseWork {
    pub reflect: WorkSnapshot,
    pub converge: WorkSnapshot,
    pub decode: WorkSnapshot,
}

/// Everything a pipeline run produces.
#[derive(Debug)]
pub struct PipelineOutput {
    pub output_ids: Vec<u32>,
    pub selected: Vec<usize>,
    pub saliency: SaliencyTable,
    pub counters: WorkCounters,
    pub phases: PhaseWork,
    /// Positions assigned to the converged sequence.
    pub positions: Vec<usize>,
    pub provenance: Vec<TokenProvenance>,
    /// Resolved keep count (defaults to one path's visual capacity).
    pub keep: usize,
    pub paths_run: usize,
}

/// Settings of one end-to-end run.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec {
    /// Total frames sampled from the video (T).
    pub frames_t: usize,
    /// Frames per reflection path (S); `frames_t` must divide evenly.
    pub segment_s: usize,
    /// Visual tokens kept at convergence; defaults to one path's capacity.
    pub keep: Option<usize>,
    pub mode: InferenceMode,
    pub strategy: PositionStrategy,
    pub exec: ExecMode,
    pub max_new_tokens: usize,
}

/// Build the reflection paths for a run: sample frames uniformly, encode
/// and project, split across paths, and attach the shared prompt.
pub fn build_reflection_paths(
    weights: &Weights,
    video: &SyntheticVideo,
    system: &[u32],
    query: &[u32],
    frames_t: usize,
    segment_s: usize,
) -> Result<Vec<ReflectionPath>> {
    let sample = sample_frames_uniform(video.num_frames, frames_t)?;
    let tokens = encode_and_project(video, &sample, weights)?;
    let chunks = split_paths(tokens, frames_t, segment_s)?;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| build_path_sequence(i, system, chunk, query))
        .collect()
}

/// Execute the full pipeline: sample, encode, split, reflect, select,
/// converge, decode.
pub fn run_pipeline(
    weights: &Weights,
    video: &SyntheticVideo,
    system: &[u32],
    query: &[u32],
    spec: &RunSpec,
) -> Result<PipelineOutput> {
    let cfg = &weights.config;
    let layer = cfg.reflection_layer;
    let mut paths = build_reflection_paths(weights, video, system, query, spec.frames_t, spec.segment_s)?;
    let n_r = paths[0].sequence.len();
    let n_v = paths[0].sequence.visual_len();
    if n_r > cfg.default_context {
        return Err(Error::Config(format!(
            "path length {n_r} exceeds default_context {}",
            cfg.default_context
        )));
    }

    let retention = match (spec.exec, spec.mode) {
        (ExecMode::Batch, _) => PathRetention::Full,
        (ExecMode::Seq, InferenceMode::Regular) => PathRetention::ScoresOnly,
        (ExecMode::Seq, InferenceMode::Smooth) => PathRetention::HiddenAndCache,
    };

    let mut counters = WorkCounters::new();
    let start = counters.snapshot();

    // Phase 1: self-reflective prefill.
    let saliency = self_reflect(&mut paths, weights, layer, spec.exec, retention, &mut counters)?;
    let table_bytes = saliency.len() as u64 * F32_BYTES;
    counters.alloc(table_bytes);
    let after_reflect = counters.snapshot();

    // Selection.
    let total = saliency.len();
    let mut keep = spec.keep.unwrap_or(n_v);
    if keep > total {
        log::warn!("keep={keep} exceeds the {total} available visual tokens; clamping");
        keep = total;
    }
    let selected = select_salient(&saliency, keep)?;
    let plan = ConvergencePlan {
        selected,
        keep,
        mode: spec.mode,
        strategy: spec.strategy,
        exec: spec.exec,
    };

    // Phase 2: convergence and final pass.
    let retained = retained_reflect_bytes(&paths, layer, cfg.model_dim, spec.exec, retention);
    let converged_len = paths[0].sequence.system_len() + plan.keep + paths[0].sequence.query_len();
    let d = cfg.model_dim as u64;
    let conv_hidden_bytes = converged_len as u64 * d * F32_BYTES;
    let gathered_cache_bytes = match spec.mode {
        InferenceMode::Regular => 0,
        InferenceMode::Smooth => layer as u64 * converged_len as u64 * 2 * d * F32_BYTES,
    };

    // Convergence reads the live path buffers (input embeddings in regular
    // mode, hiddens and caches in smooth mode); whatever the reflect phase
    // retained is released only once the gather is done.
    counters.alloc(conv_hidden_bytes + gathered_cache_bytes);
    let ctx = converge(&paths, &plan, weights)?;
    counters.release(retained);
    let fresh_layers = (cfg.num_layers + 1 - ctx.start_layer) as u64;
    let fresh_cache_bytes = fresh_layers * converged_len as u64 * 2 * d * F32_BYTES;
    counters.alloc(fresh_cache_bytes);
    let positions = ctx.positions.clone();
    let provenance = ctx.provenance.clone();
    let logits_bytes = converged_len as u64 * cfg.vocab_size as u64 * F32_BYTES;
    counters.alloc(logits_bytes);
    let final_state = converged_forward(weights, ctx, &mut counters)?;
    let last_logits = final_state.logits.row(final_state.logits.rows() - 1).to_vec();
    counters.release(logits_bytes + conv_hidden_bytes);
    let after_converge = counters.snapshot();

    // Phase 3: greedy decode.
    let mut cache = final_state.cache;
    let output_ids = greedy_decode(
        weights,
        &mut cache,
        &last_logits,
        final_state.next_position,
        spec.max_new_tokens,
        &mut counters,
    )?;
    let after_decode = counters.snapshot();

    // Run over; return the meter to baseline without disturbing the peak.
    let decode_append_bytes = if spec.max_new_tokens == 0 {
        0
    } else {
        (spec.max_new_tokens as u64 - 1) * cfg.num_layers as u64 * 2 * d * F32_BYTES
    };
    counters.release(gathered_cache_bytes + fresh_cache_bytes + decode_append_bytes + table_bytes);

    Ok(PipelineOutput {
        output_ids,
        selected: plan.selected,
        saliency,
        phases: PhaseWork {
            reflect: after_reflect.delta_from(&start),
            converge: after_converge.delta_from(&after_reflect),
            decode: after_decode.delta_from(&after_converge),
        },
        counters,
        positions,
        provenance,
        keep,
        paths_run: paths.len(),
    })
}
