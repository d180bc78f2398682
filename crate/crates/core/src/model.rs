//! A toy pre-norm decoder-only transformer with ranged forward passes,
//! per-layer KV caches, greedy decoding, and exact work counters.
//!
//! Layers are indexed 1-based. "Reflection layer 5" means the saliency probe
//! reads the hidden states entering layer 5's attention, and the reflective
//! prefill runs layers 1..=5.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, rms_normalize, rope_rotate_in_place, softmax_in_place, Matrix};

/// Hyperparameters of the toy model. Serializes with exactly these names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub vision_dim: usize,
    /// Token capacity of one reflection path.
    pub default_context: usize,
    /// 1-based layer whose attention inputs the saliency probe reads.
    pub reflection_layer: usize,
    pub rope_base: f32,
    pub weight_scale: f32,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("vision_dim", self.vision_dim),
            ("default_context", self.default_context),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != num_heads {} * head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary encoding",
                self.head_dim
            )));
        }
        if self.reflection_layer < 1 || self.reflection_layer > self.num_layers {
            return Err(Error::Config(format!(
                "reflection_layer {} outside 1..={}",
                self.reflection_layer, self.num_layers
            )));
        }
        Ok(())
    }

    /// Hidden width of the MLP (fixed expansion factor of 2).
    pub fn mlp_dim(&self) -> usize {
        2 * self.model_dim
    }
}

/// One layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm_gain: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm_gain: Vec<f32>,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

/// All model parameters. A deterministic function of (seed, weight_scale):
/// projection and table entries are drawn from uniform(-weight_scale,
/// +weight_scale) in a fixed order; norm gains are initialized to 1 so the
/// normalized residual stream is not randomly attenuated.
#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f32>,
    pub unembedding: Matrix,
    /// Projection from vision feature space into the model embedding space.
    pub vision_projection: Matrix,
}

fn uniform_symmetric(rng: &mut ChaCha8Rng, scale: f32) -> f32 {
    // 24 explicit mantissa bits; bit-stable across platforms and versions.
    let u = (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0);
    (2.0 * u - 1.0) * scale
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for v in m.row_mut(r) {
            *v = uniform_symmetric(rng, scale);
        }
    }
    m
}

/// Build deterministic weights for `config`. Same config, same bits.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let d = config.model_dim;
    let scale = config.weight_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let token_embedding = random_matrix(&mut rng, config.vocab_size, d, scale);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            attn_norm_gain: vec![1.0; d],
            wq: random_matrix(&mut rng, d, d, scale),
            wk: random_matrix(&mut rng, d, d, scale),
            wv: random_matrix(&mut rng, d, d, scale),
            wo: random_matrix(&mut rng, d, d, scale),
            mlp_norm_gain: vec![1.0; d],
            w_in: random_matrix(&mut rng, d, config.mlp_dim(), scale),
            w_out: random_matrix(&mut rng, config.mlp_dim(), d, scale),
        });
    }
    let final_norm_gain = vec![1.0; d];
    let unembedding = random_matrix(&mut rng, d, config.vocab_size, scale);
    let vision_projection = random_matrix(&mut rng, config.vision_dim, d, scale);

    Ok(Weights {
        config: *config,
        token_embedding,
        layers,
        final_norm_gain,
        unembedding,
        vision_projection,
    })
}

impl Weights {
    /// FNV-1a over the raw f32 bit patterns of every parameter tensor.
    pub fn checksum(&self) -> u64 {
        fn eat(h: &mut Fnv64, m: &Matrix) {
            for &v in m.data() {
                h.write_u32(v.to_bits());
            }
        }
        fn eat_vec(h: &mut Fnv64, v: &[f32]) {
            for &g in v {
                h.write_u32(g.to_bits());
            }
        }
        let mut h = Fnv64::new();
        eat(&mut h, &self.token_embedding);
        for layer in &self.layers {
            eat_vec(&mut h, &layer.attn_norm_gain);
            eat(&mut h, &layer.wq);
            eat(&mut h, &layer.wk);
            eat(&mut h, &layer.wv);
            eat(&mut h, &layer.wo);
            eat_vec(&mut h, &layer.mlp_norm_gain);
            eat(&mut h, &layer.w_in);
            eat(&mut h, &layer.w_out);
        }
        eat_vec(&mut h, &self.final_norm_gain);
        eat(&mut h, &self.unembedding);
        eat(&mut h, &self.vision_projection);
        h.finish()
    }

    /// Look up embeddings for a sequence of token ids.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.config.model_dim);
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Range(format!(
                    "token id {id} >= vocab_size {}",
                    self.config.vocab_size
                )));
            }
            out.set_row(r, self.token_embedding.row(id as usize));
        }
        Ok(out)
    }
}

/// Tiny FNV-1a accumulator, also used for config hashing in the CLI.
#[derive(Debug, Clone)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write_u8(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn write_u32(&mut self, v: u32) {
        for b in v.to_le_bytes() {
            self.write_u8(b);
        }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u8(b);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-layer key/value store. Keys are stored after rotary encoding, and the
/// position each key was rotated at is kept alongside so converged contexts
/// with reassigned positions remain self-describing.
#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<LayerKv>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerKv {
    /// len x d, flattened row-major.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub positions: Vec<usize>,
}

impl KVCache {
    pub fn new(num_layers: usize) -> Self {
        KVCache {
            layers: (0..num_layers).map(|_| LayerKv::default()).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Cached entries for 1-based `layer`.
    pub fn layer(&self, layer: usize) -> &LayerKv {
        &self.layers[layer - 1]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerKv {
        &mut self.layers[layer - 1]
    }

    /// Number of tokens cached at 1-based `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer - 1].positions.len()
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }
}

/// Deterministic work counters. MAC counts use the dense-rectangle
/// convention: one layer forwarding n new tokens against c cached tokens
/// adds 2*n*(c+n)*d attention MACs (the QK^T and AV products), regardless
/// of causal masking. Projection and MLP MACs are not counted.
///
/// Activation bytes are metered by the orchestration layer (pipeline and
/// baseline runners) for the buffers it owns: hidden matrices, KV caches,
/// score tables, gathered/converged buffers, and decode-time cache growth.
/// `greedy_decode` accounts its own cache growth.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkCounters {
    pub attention_macs: u64,
    pub layer_invocations: u64,
    /// Multiply-accumulates spent on reflection-token saliency scores.
    pub sra_macs: u64,
    pub live_activation_bytes: u64,
    pub peak_live_activation_bytes: u64,
}

impl WorkCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn alloc(&mut self, bytes: u64) {
        self.live_activation_bytes += bytes;
        if self.live_activation_bytes > self.peak_live_activation_bytes {
            self.peak_live_activation_bytes = self.live_activation_bytes;
        }
    }

    pub fn release(&mut self, bytes: u64) {
        self.live_activation_bytes = self.live_activation_bytes.saturating_sub(bytes);
    }

    /// Fold another counter's compute work (not its byte meter) into this
    /// one; used to merge per-path counters in deterministic path order.
    pub fn absorb_work(&mut self, other: &WorkCounters) {
        self.attention_macs += other.attention_macs;
        self.layer_invocations += other.layer_invocations;
        self.sra_macs += other.sra_macs;
    }

    pub fn snapshot(&self) -> WorkSnapshot {
        WorkSnapshot {
            attention_macs: self.attention_macs,
            layer_invocations: self.layer_invocations,
            sra_macs: self.sra_macs,
        }
    }
}

/// Compute-work numbers at a phase boundary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkSnapshot {
    pub attention_macs: u64,
    pub layer_invocations: u64,
    pub sra_macs: u64,
}

impl WorkSnapshot {
    pub fn delta_from(&self, earlier: &WorkSnapshot) -> WorkSnapshot {
        WorkSnapshot {
            attention_macs: self.attention_macs - earlier.attention_macs,
            layer_invocations: self.layer_invocations - earlier.layer_invocations,
            sra_macs: self.sra_macs - earlier.sra_macs,
        }
    }
}

fn relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Run one pre-norm block over `hidden` (n tokens) against `cache`.
fn run_block(
    weights: &Weights,
    layer_idx: usize,
    hidden: &mut Matrix,
    positions: &[usize],
    cache: &mut KVCache,
    counters: &mut WorkCounters,
) {
    let cfg = &weights.config;
    let lw = &weights.layers[layer_idx - 1];
    let n = hidden.rows();
    let d = cfg.model_dim;
    let dk = cfg.head_dim;
    let heads = cfg.num_heads;
    let scale = 1.0 / (dk as f32).sqrt();
    let cached = cache.len(layer_idx);

    counters.attention_macs += 2 * (n as u64) * ((cached + n) as u64) * (d as u64);
    counters.layer_invocations += 1;

    // Pre-norm, projections, rotary.
    let mut normed = Matrix::zeros(n, d);
    for i in 0..n {
        normed.set_row(i, &rms_normalize(hidden.row(i), &lw.attn_norm_gain, 1e-5));
    }
    let mut q = normed.matmul(&lw.wq);
    let mut k = normed.matmul(&lw.wk);
    let v = normed.matmul(&lw.wv);
    for i in 0..n {
        let p = positions[i] as f32;
        for h in 0..heads {
            rope_rotate_in_place(&mut q.row_mut(i)[h * dk..(h + 1) * dk], p, cfg.rope_base);
            rope_rotate_in_place(&mut k.row_mut(i)[h * dk..(h + 1) * dk], p, cfg.rope_base);
        }
    }

    // Append the chunk to the cache first so the attention loop always reads
    // keys in global sequence order; chunked and whole-sequence execution
    // then produce bit-identical results.
    {
        let entry = cache.layer_mut(layer_idx);
        for i in 0..n {
            entry.keys.extend_from_slice(k.row(i));
            entry.values.extend_from_slice(v.row(i));
            entry.positions.push(positions[i]);
        }
    }
    let entry = cache.layer(layer_idx);

    let mut attn_out = Matrix::zeros(n, d);
    let mut logits = vec![0.0f32; cached + n];
    for i in 0..n {
        let visible = cached + i + 1;
        let q_row = q.row(i);
        let out_row = attn_out.row_mut(i);
        for h in 0..heads {
            let q_head = &q_row[h * dk..(h + 1) * dk];
            for j in 0..visible {
                let k_head = &entry.keys[j * d + h * dk..j * d + (h + 1) * dk];
                logits[j] = dot(q_head, k_head) * scale;
            }
            softmax_in_place(&mut logits[..visible]);
            for j in 0..visible {
                let w = logits[j];
                let v_head = &entry.values[j * d + h * dk..j * d + (h + 1) * dk];
                for c in 0..dk {
                    out_row[h * dk + c] += w * v_head[c];
                }
            }
        }
    }

    let projected = attn_out.matmul(&lw.wo);
    for i in 0..n {
        let dst = hidden.row_mut(i);
        let src = projected.row(i);
        for c in 0..d {
            dst[c] += src[c];
        }
    }

    // MLP with its own pre-norm.
    let mut normed2 = Matrix::zeros(n, d);
    for i in 0..n {
        normed2.set_row(i, &rms_normalize(hidden.row(i), &lw.mlp_norm_gain, 1e-5));
    }
    let mut inner = normed2.matmul(&lw.w_in);
    for r in 0..n {
        for vv in inner.row_mut(r) {
            *vv = relu(*vv);
        }
    }
    let mlp_out = inner.matmul(&lw.w_out);
    for i in 0..n {
        let dst = hidden.row_mut(i);
        let src = mlp_out.row(i);
        for c in 0..d {
            dst[c] += src[c];
        }
    }
}

/// Run layers `first..=last` (1-based, inclusive) over `hidden`.
pub fn advance_layers(
    weights: &Weights,
    mut hidden: Matrix,
    positions: &[usize],
    first_layer: usize,
    last_layer: usize,
    cache: &mut KVCache,
    counters: &mut WorkCounters,
) -> Result<Matrix> {
    let num_layers = weights.config.num_layers;
    if first_layer < 1 || last_layer > num_layers || first_layer > last_layer + 1 {
        return Err(Error::Config(format!(
            "layer range {first_layer}..={last_layer} outside 1..={num_layers}"
        )));
    }
    if positions.len() != hidden.rows() {
        return Err(Error::Dimension(format!(
            "{} positions for {} hidden rows",
            positions.len(),
            hidden.rows()
        )));
    }
    for layer in first_layer..=last_layer {
        run_block(weights, layer, &mut hidden, positions, cache, counters);
    }
    Ok(hidden)
}

/// Final norm and unembedding; produces vocab logits for every row.
pub fn project_logits(weights: &Weights, hidden: &Matrix) -> Matrix {
    let mut normed = Matrix::zeros(hidden.rows(), hidden.cols());
    for i in 0..hidden.rows() {
        normed.set_row(i, &rms_normalize(hidden.row(i), &weights.final_norm_gain, 1e-5));
    }
    normed.matmul(&weights.unembedding)
}

/// Ranged forward pass: runs layers `from_layer..to_layer` (1-based,
/// end-exclusive). `to_layer = num_layers + 1` additionally applies the
/// final norm and unembedding and returns logits instead of hidden states.
pub fn forward_range(
    weights: &Weights,
    hidden: Matrix,
    positions: &[usize],
    from_layer: usize,
    to_layer: usize,
    cache: &mut KVCache,
    counters: &mut WorkCounters,
) -> Result<Matrix> {
    let num_layers = weights.config.num_layers;
    if from_layer < 1 || to_layer > num_layers + 1 || from_layer > to_layer {
        return Err(Error::Config(format!(
            "forward range {from_layer}..{to_layer} outside 1..={}",
            num_layers + 1
        )));
    }
    let last = to_layer.min(num_layers + 1) - 1;
    let hidden = advance_layers(weights, hidden, positions, from_layer, last, cache, counters)?;
    if to_layer == num_layers + 1 {
        Ok(project_logits(weights, &hidden))
    } else {
        Ok(hidden)
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding from a completed prefill.
///
/// `last_logits` is the vocab row of the final prefill token. Each emitted
/// token is fed back through all layers; the cache grows by one entry per
/// layer per step and that growth is charged to the byte meter here.
pub fn greedy_decode(
    weights: &Weights,
    cache: &mut KVCache,
    last_logits: &[f32],
    start_position: usize,
    max_new: usize,
    counters: &mut WorkCounters,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_new);
    if max_new == 0 {
        return Ok(out);
    }
    let cfg = &weights.config;
    let mut logits = last_logits.to_vec();
    let mut position = start_position;
    let step_bytes = (cfg.num_layers * 2 * cfg.model_dim * std::mem::size_of::<f32>()) as u64;
    loop {
        let token = argmax_lowest(&logits);
        out.push(token);
        if out.len() == max_new {
            return Ok(out);
        }
        let hidden = weights.embed_tokens(&[token])?;
        counters.alloc(step_bytes);
        let next = forward_range(
            weights,
            hidden,
            &[position],
            1,
            cfg.num_layers + 1,
            cache,
            counters,
        )?;
        logits = next.row(0).to_vec();
        position += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            vocab_size: 16,
            vision_dim: 8,
            default_context: 256,
            reflection_layer: 2,
            rope_base: 10_000.0,
            weight_scale: 0.05,
            seed,
        }
    }

    fn random_hidden(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for v in m.row_mut(r) {
                *v = uniform_symmetric(&mut rng, 1.0);
            }
        }
        m
    }

    #[test]
    fn same_seed_same_checksum() {
        let cfg = tiny_config(7);
        let a = init_weights(&cfg).unwrap();
        let b = init_weights(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_weights(&tiny_config(0)).unwrap();
        let b = init_weights(&tiny_config(1)).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn zero_weight_scale_is_residual_identity() {
        let mut cfg = tiny_config(3);
        cfg.weight_scale = 0.0;
        let w = init_weights(&cfg).unwrap();
        let hidden = random_hidden(5, cfg.model_dim, 99);
        let mut cache = KVCache::new(cfg.num_layers);
        let mut counters = WorkCounters::new();
        let out = forward_range(
            &w,
            hidden.clone(),
            &[0, 1, 2, 3, 4],
            1,
            cfg.num_layers,
            &mut cache,
            &mut counters,
        )
        .unwrap();
        assert_eq!(out, hidden);
    }

    #[test]
    fn attention_mac_counter_formula() {
        // n=4 tokens, d=8, empty cache, one layer: 2*4*4*8 = 256.
        let cfg = tiny_config(5);
        let w = init_weights(&cfg).unwrap();
        let hidden = random_hidden(4, cfg.model_dim, 1);
        let mut cache = KVCache::new(cfg.num_layers);
        let mut counters = WorkCounters::new();
        forward_range(&w, hidden, &[0, 1, 2, 3], 1, 2, &mut cache, &mut counters).unwrap();
        assert_eq!(counters.attention_macs, 256);
        assert_eq!(counters.layer_invocations, 1);
    }

    #[test]
    fn split_forward_matches_whole_forward_bitwise() {
        let cfg = tiny_config(11);
        let w = init_weights(&cfg).unwrap();
        let hidden = random_hidden(6, cfg.model_dim, 42);
        let positions: Vec<usize> = (0..6).collect();

        let mut cache_whole = KVCache::new(cfg.num_layers);
        let mut c1 = WorkCounters::new();
        let whole = forward_range(
            &w,
            hidden.clone(),
            &positions,
            1,
            cfg.num_layers + 1,
            &mut cache_whole,
            &mut c1,
        )
        .unwrap();

        for split in 1..=cfg.num_layers {
            let mut cache = KVCache::new(cfg.num_layers);
            let mut c2 = WorkCounters::new();
            let mid = forward_range(&w, hidden.clone(), &positions, 1, split, &mut cache, &mut c2)
                .unwrap();
            let end = forward_range(
                &w,
                mid,
                &positions,
                split,
                cfg.num_layers + 1,
                &mut cache,
                &mut c2,
            )
            .unwrap();
            assert_eq!(end, whole, "split at layer {split} diverged");
            assert_eq!(c2.attention_macs, c1.attention_macs);
        }
    }

    #[test]
    fn chunked_prefill_matches_whole_bitwise() {
        let cfg = tiny_config(13);
        let w = init_weights(&cfg).unwrap();
        let hidden = random_hidden(6, cfg.model_dim, 17);
        let positions: Vec<usize> = (0..6).collect();

        let mut cache_whole = KVCache::new(cfg.num_layers);
        let mut c = WorkCounters::new();
        let whole = forward_range(
            &w,
            hidden.clone(),
            &positions,
            1,
            cfg.num_layers + 1,
            &mut cache_whole,
            &mut c,
        )
        .unwrap();

        // Forward the first 4 tokens, then the remaining 2 against the cache.
        let first = hidden.gather_rows(&[0, 1, 2, 3]);
        let rest = hidden.gather_rows(&[4, 5]);
        let mut cache = KVCache::new(cfg.num_layers);
        let mut c2 = WorkCounters::new();
        forward_range(&w, first, &positions[..4], 1, cfg.num_layers + 1, &mut cache, &mut c2)
            .unwrap();
        let tail = forward_range(
            &w,
            rest,
            &positions[4..],
            1,
            cfg.num_layers + 1,
            &mut cache,
            &mut c2,
        )
        .unwrap();
        assert_eq!(tail.row(0), whole.row(4));
        assert_eq!(tail.row(1), whole.row(5));
    }

    #[test]
    fn full_prefill_counter_exactness() {
        let cfg = tiny_config(19);
        let w = init_weights(&cfg).unwrap();
        let n = 7usize;
        let hidden = random_hidden(n, cfg.model_dim, 3);
        let positions: Vec<usize> = (0..n).collect();
        let mut cache = KVCache::new(cfg.num_layers);
        let mut counters = WorkCounters::new();
        forward_range(
            &w,
            hidden,
            &positions,
            1,
            cfg.num_layers + 1,
            &mut cache,
            &mut counters,
        )
        .unwrap();
        let expected = cfg.num_layers as u64 * 2 * (n as u64) * (n as u64) * cfg.model_dim as u64;
        assert_eq!(counters.attention_macs, expected);
        assert_eq!(counters.layer_invocations, cfg.num_layers as u64);
    }

    #[test]
    fn greedy_tie_breaks_toward_lowest_id() {
        assert_eq!(argmax_lowest(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.5]), 0);
    }

    #[test]
    fn greedy_zero_new_tokens_is_empty() {
        let cfg = tiny_config(23);
        let w = init_weights(&cfg).unwrap();
        let mut cache = KVCache::new(cfg.num_layers);
        let mut counters = WorkCounters::new();
        let out = greedy_decode(&w, &mut cache, &[1.0, 0.0], 0, 0, &mut counters).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_decode_repeat_runs_identical() {
        let cfg = tiny_config(29);
        let w = init_weights(&cfg).unwrap();
        let run = || {
            let hidden = w.embed_tokens(&[1, 2, 3]).unwrap();
            let mut cache = KVCache::new(cfg.num_layers);
            let mut counters = WorkCounters::new();
            let logits = forward_range(
                &w,
                hidden,
                &[0, 1, 2],
                1,
                cfg.num_layers + 1,
                &mut cache,
                &mut counters,
            )
            .unwrap();
            let last = logits.row(logits.rows() - 1).to_vec();
            greedy_decode(&w, &mut cache, &last, 3, 6, &mut counters).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causality_prefix_unaffected_by_later_tokens() {
        let cfg = tiny_config(31);
        let w = init_weights(&cfg).unwrap();
        let mut a = random_hidden(5, cfg.model_dim, 8);
        let b = a.clone();
        // Perturb token 3; tokens 0..3 must be bit-unchanged.
        a.row_mut(3)[0] += 1.0;
        let positions: Vec<usize> = (0..5).collect();
        let run = |h: Matrix| {
            let mut cache = KVCache::new(cfg.num_layers);
            let mut counters = WorkCounters::new();
            forward_range(&w, h, &positions, 1, cfg.num_layers, &mut cache, &mut counters).unwrap()
        };
        let out_a = run(a);
        let out_b = run(b);
        for i in 0..3 {
            assert_eq!(out_a.row(i), out_b.row(i), "token {i} changed");
        }
        assert_ne!(out_a.row(3), out_b.row(3));
    }

    #[test]
    fn config_json_round_trip_field_names() {
        let cfg = tiny_config(1);
        let json = serde_json::to_value(cfg).unwrap();
        for key in [
            "num_layers",
            "num_heads",
            "model_dim",
            "head_dim",
            "vocab_size",
            "vision_dim",
            "default_context",
            "reflection_layer",
            "rope_base",
            "weight_scale",
            "seed",
        ] {
            assert!(json.get(key).is_some(), "missing field {key}");
        }
        let back: ModelConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_config(1);
        cfg.reflection_layer = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(1);
        cfg.model_dim = 10;
        assert!(cfg.validate().is_err());
    }
}
