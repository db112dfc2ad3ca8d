//! A toy vision-language attention model with exact ablation effects.
//!
//! Each decoding step builds a query state from the previous token and its
//! position, then runs `L` layers of `H` heads that attend over the vision
//! tokens plus one sink slot. The sink carries no value, so a row's vision
//! mass is a sub-distribution and masking every vision token leaves only the
//! language prior. Masked tokens get a `-inf` logit before the softmax and the
//! remaining slots renormalize. Steps do not attend to each other, so the
//! generated sequence is fully teacher-forced.
//!
//! Attention weights are rounded to `f32` (the precision of the trace file)
//! before they mix values, and log-probabilities are rounded to a `2^-32` nat
//! grid so that span effects add exactly across any split of the span.
//!
//! [`PlantedModel`] wraps the same model but replaces the log-probability
//! response with one that is exactly linear in the pooled region features.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::estimator::{sample_masks, TrainingSample, TrainingSet};
use crate::features::{pool_span_region, MaskSample};
use crate::stats;
use crate::trace::{AttentionTrace, Span};
use crate::unitization::{self, AgglomerativeConfig, PartitionMethod, RegionPartition};
use crate::{Error, Result};

/// Log-probabilities are multiples of `1 / LOGP_GRID`.
pub const LOGP_GRID: f64 = 4_294_967_296.0; // 2^32

fn quantize_logp(x: f64) -> f64 {
    libm::round(x * LOGP_GRID) / LOGP_GRID
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * scale).collect()
}

const WORDS: &[&str] = &[
    ".", " the", " red", " cup", " is", " left", " of", " a", " blue", " box", " so", " answer", " top", " right",
    " near", " small", " large", " object", " count", " two", " three", " and", " then", " image", " shows", " on",
    " table", " green", " ball", " under", " sign", " text",
];

/// Surface text of a vocabulary id.
pub fn token_text(id: usize) -> String {
    match WORDS.get(id) {
        Some(w) => String::from(*w),
        None => format!(" t{id}"),
    }
}

/// Inverse of [`token_text`] over a vocabulary of `vocab_size` ids.
pub fn token_id(text: &str, vocab_size: usize) -> Option<usize> {
    (0..vocab_size).find(|&id| token_text(id) == text)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyModelSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Divides attention logits; smaller is sharper.
    pub attention_temperature: f64,
    /// Logit of the value-free sink slot.
    pub sink_logit: f64,
    /// Log-normal spread of per-head output gains.
    pub gain_log_std: f64,
    /// Fraction of heads that attend sharply but barely write to the output.
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            num_layers: 2,
            num_heads: 4,
            model_dim: 16,
            head_dim: 8,
            feature_dim: 8,
            vocab_size: 32,
            attention_temperature: 0.5,
            sink_logit: 2.0,
            gain_log_std: 1.0,
            distractor_fraction: 0.5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    /// `[head_dim][model_dim]`
    query: Vec<f64>,
    /// `[head_dim][feature_dim]`
    key: Vec<f64>,
    /// `[model_dim][feature_dim]`
    value: Vec<f64>,
    query_scale: f64,
    sink: f64,
}

/// Read-only view of one head.
///
/// At step `t` with residual state `h`, the head computes
/// `q = query_scale * Q h`, logits `q . (K x_i) / (sqrt(head_dim) * temperature)`
/// for every visible token `i` plus the constant `sink` logit, softmaxes them,
/// and adds `V * sum_i a_i x_i` to the residual of the next layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams<'a> {
    /// `[head_dim][model_dim]`
    pub query: &'a [f64],
    /// `[head_dim][feature_dim]`
    pub key: &'a [f64],
    /// `[model_dim][feature_dim]`
    pub value: &'a [f64],
    pub query_scale: f64,
    pub sink: f64,
}

/// The toy model. Forward passes are pure apart from the pass counter.
///
/// The residual state of step `t` starts as the embedding of the previous
/// token plus `0.3 * sin((t + 1) * 0.37 * (j + 1))` in coordinate `j`. Heads of
/// one layer all read the same state; their outputs are summed into it before
/// the next layer. Logits are `U h + prior`.
#[derive(Debug)]
pub struct ToyModel {
    spec: ToyModelSpec,
    /// `[vocab + 1][model_dim]`; the last row is the start-of-sequence state.
    embed: Vec<f64>,
    heads: Vec<Head>,
    /// `[vocab][model_dim]`
    unembed: Vec<f64>,
    prior: Vec<f64>,
    passes: AtomicU64,
}

/// One image plus the frozen generated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInput {
    /// `[vision token][feature_dim]`
    pub features: Vec<Vec<f64>>,
    /// Generated token ids `y_1..y_T`.
    pub tokens: Vec<usize>,
    /// Vision tokens the model can never attend to.
    pub blocked: Vec<bool>,
    /// Region structure, needed only by [`PlantedModel`].
    pub partition: Option<RegionPartition>,
}

impl ToyInput {
    pub fn num_vision_tokens(&self) -> usize {
        self.features.len()
    }
}

/// Set of masked vision tokens. Masking is a set union, so the order in which
/// regions are added does not matter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VisionMask {
    masked: Vec<bool>,
}

impl VisionMask {
    pub fn none(num_tokens: usize) -> Self {
        VisionMask {
            masked: vec![false; num_tokens],
        }
    }

    pub fn all(num_tokens: usize) -> Self {
        VisionMask {
            masked: vec![true; num_tokens],
        }
    }

    pub fn from_bools(masked: Vec<bool>) -> Self {
        VisionMask { masked }
    }

    /// Masks the regions a [`MaskSample`] does not retain.
    pub fn from_sample(partition: &RegionPartition, mask: &MaskSample) -> Self {
        VisionMask {
            masked: partition.token_mask(mask.ablated()),
        }
    }

    pub fn from_regions(partition: &RegionPartition, regions: &[usize]) -> Self {
        VisionMask {
            masked: partition.token_mask(regions.iter().copied()),
        }
    }

    /// Adds tokens to the masked set.
    pub fn ablate(&mut self, tokens: &[usize]) -> &mut Self {
        tokens.iter().for_each(|&i| self.masked[i] = true);
        self
    }

    pub fn union(&self, other: &VisionMask) -> VisionMask {
        VisionMask {
            masked: self.masked.iter().zip(&other.masked).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.masked[token]
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Teacher-forced outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_steps: usize,
    pub num_vision_tokens: usize,
    /// `log p(y_t | x, y_<t)` for every step.
    pub log_probs: Vec<f64>,
    /// `[layer][head][step][vision token]`
    pub attn: Vec<f32>,
}

impl ForwardOutput {
    pub fn attention(&self, layer: usize, head: usize, step: usize, token: usize) -> f32 {
        self.attn[((layer * self.num_heads + head) * self.num_steps + step) * self.num_vision_tokens + token]
    }
}

/// Anything that can be queried with masked forward passes.
pub trait AblationOracle {
    fn forward(&self, input: &ToyInput, mask: &VisionMask) -> Result<ForwardOutput>;
    fn pass_count(&self) -> u64;
    fn reset_pass_count(&self);
}

struct PreparedInput {
    /// per head: `[token][head_dim]`
    keys: Vec<Vec<f64>>,
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        if spec.num_layers == 0 || spec.num_heads == 0 || spec.model_dim == 0 || spec.head_dim == 0 {
            return Err(Error::validation("model", "dimensions must be positive"));
        }
        if spec.feature_dim == 0 || spec.vocab_size < 2 {
            return Err(Error::validation("model", "need a feature dimension and at least 2 vocabulary ids"));
        }
        if !(spec.attention_temperature > 0.0) {
            return Err(Error::validation("attention_temperature", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dm = spec.model_dim;
        let dk = spec.head_dim;
        let df = spec.feature_dim;
        let embed = normal_vec(&mut rng, (spec.vocab_size + 1) * dm, 1.0 / libm::sqrt(dm as f64));
        let total_heads = spec.num_layers * spec.num_heads;
        let distractors = libm::round(spec.distractor_fraction * total_heads as f64) as usize;
        let mut heads = Vec::with_capacity(total_heads);
        for idx in 0..total_heads {
            let distractor = idx % total_heads.max(1) >= total_heads - distractors.min(total_heads);
            let mut gain = libm::exp(spec.gain_log_std * normal(&mut rng));
            let mut query_scale = 1.0;
            if distractor {
                gain *= 0.02;
                query_scale = 3.0;
            }
            heads.push(Head {
                query: normal_vec(&mut rng, dk * dm, 1.0 / libm::sqrt(dm as f64) * 3.0),
                key: normal_vec(&mut rng, dk * df, 1.0 / libm::sqrt(df as f64)),
                value: normal_vec(&mut rng, dm * df, gain / libm::sqrt(df as f64)),
                query_scale,
                sink: spec.sink_logit + 0.5 * normal(&mut rng),
            });
        }
        // interleave distractors across layers rather than bunching them at the end
        let mut order: Vec<usize> = (0..total_heads).collect();
        order.sort_by_key(|&i| (i * 7919) % total_heads.max(1));
        let heads = order.into_iter().map(|i| heads[i].clone()).collect();
        let unembed = normal_vec(&mut rng, spec.vocab_size * dm, 0.6);
        let prior = normal_vec(&mut rng, spec.vocab_size, 0.5);
        Ok(ToyModel {
            spec,
            embed,
            heads,
            unembed,
            prior,
            passes: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    /// `[vocab + 1][model_dim]` token embeddings; the last row starts the sequence.
    pub fn embedding(&self) -> &[f64] {
        &self.embed
    }

    /// `[vocab][model_dim]`
    pub fn unembedding(&self) -> &[f64] {
        &self.unembed
    }

    /// Per-token logit bias of the language prior.
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn head_params(&self, layer: usize, head: usize) -> HeadParams<'_> {
        let h = self.head(layer, head);
        HeadParams {
            query: &h.query,
            key: &h.key,
            value: &h.value,
            query_scale: h.query_scale,
            sink: h.sink,
        }
    }

    fn head(&self, layer: usize, head: usize) -> &Head {
        &self.heads[layer * self.spec.num_heads + head]
    }

    fn check_input(&self, input: &ToyInput, mask: &VisionMask) -> Result<()> {
        let m = input.num_vision_tokens();
        Error::check_dim("vision mask", m, mask.len())?;
        Error::check_dim("blocked mask", m, input.blocked.len())?;
        for row in &input.features {
            Error::check_dim("vision feature row", self.spec.feature_dim, row.len())?;
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t >= self.spec.vocab_size) {
            return Err(Error::validation("tokens", format!("id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn prepare(&self, input: &ToyInput) -> PreparedInput {
        let dk = self.spec.head_dim;
        let keys = self
            .heads
            .iter()
            .map(|head| {
                let mut k = vec![0.0; input.features.len() * dk];
                for (i, x) in input.features.iter().enumerate() {
                    for a in 0..dk {
                        k[i * dk + a] = stats::dot(&head.key[a * self.spec.feature_dim..(a + 1) * self.spec.feature_dim], x);
                    }
                }
                k
            })
            .collect();
        PreparedInput { keys }
    }

    fn initial_state(&self, prev: Option<usize>, step: usize) -> Vec<f64> {
        let dm = self.spec.model_dim;
        let row = prev.unwrap_or(self.spec.vocab_size);
        let mut h = self.embed[row * dm..(row + 1) * dm].to_vec();
        for (j, v) in h.iter_mut().enumerate() {
            *v += 0.3 * libm::sin((step + 1) as f64 * 0.37 * (j + 1) as f64);
        }
        h
    }

    /// One decoding step. Writes the step's attention into `attn_out`
    /// (`[layer][head][token]`) and returns the next-token logits.
    fn step(
        &self,
        input: &ToyInput,
        prepared: &PreparedInput,
        mask: &VisionMask,
        prev: Option<usize>,
        step: usize,
        attn_out: &mut [f32],
    ) -> Vec<f64> {
        let dm = self.spec.model_dim;
        let dk = self.spec.head_dim;
        let df = self.spec.feature_dim;
        let m = input.num_vision_tokens();
        let inv = 1.0 / (libm::sqrt(dk as f64) * self.spec.attention_temperature);
        let mut h = self.initial_state(prev, step);
        let mut q = vec![0.0; dk];
        let mut logits = vec![0.0; m];
        let mut pooled = vec![0.0; df];

        for l in 0..self.spec.num_layers {
            let mut delta = vec![0.0; dm];
            for hd in 0..self.spec.num_heads {
                let idx = l * self.spec.num_heads + hd;
                let head = self.head(l, hd);
                for (a, qa) in q.iter_mut().enumerate() {
                    *qa = stats::dot(&head.query[a * dm..(a + 1) * dm], &h) * head.query_scale;
                }
                let keys = &prepared.keys[idx];
                let mut max = head.sink;
                for i in 0..m {
                    if mask.is_masked(i) || input.blocked[i] {
                        logits[i] = f64::NEG_INFINITY;
                    } else {
                        logits[i] = stats::dot(&q, &keys[i * dk..(i + 1) * dk]) * inv;
                        max = max.max(logits[i]);
                    }
                }
                let mut z = libm::exp(head.sink - max);
                for lg in logits.iter_mut() {
                    *lg = libm::exp(*lg - max);
                    z += *lg;
                }
                pooled.iter_mut().for_each(|p| *p = 0.0);
                let row = &mut attn_out[idx * m..(idx + 1) * m];
                for i in 0..m {
                    let a = (logits[i] / z) as f32;
                    row[i] = a;
                    if a != 0.0 {
                        let a = f64::from(a);
                        pooled.iter_mut().zip(&input.features[i]).for_each(|(p, x)| *p += a * x);
                    }
                }
                for (r, d) in delta.iter_mut().enumerate() {
                    *d += stats::dot(&head.value[r * df..(r + 1) * df], &pooled);
                }
            }
            h.iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
        }

        (0..self.spec.vocab_size)
            .map(|v| stats::dot(&self.unembed[v * dm..(v + 1) * dm], &h) + self.prior[v])
            .collect()
    }

    fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&x| libm::exp(x - max)).sum();
        logits[target] - max - libm::log(z)
    }

    fn run(&self, input: &ToyInput, mask: &VisionMask) -> ForwardOutput {
        let (l, h, m, t) = (self.spec.num_layers, self.spec.num_heads, input.num_vision_tokens(), input.tokens.len());
        let prepared = self.prepare(input);
        let mut step_attn = vec![0.0f32; l * h * m];
        let mut attn = vec![0.0f32; l * h * t * m];
        let mut log_probs = Vec::with_capacity(t);
        for s in 0..t {
            let prev = if s == 0 { None } else { Some(input.tokens[s - 1]) };
            let logits = self.step(input, &prepared, mask, prev, s, &mut step_attn);
            log_probs.push(quantize_logp(Self::log_softmax_at(&logits, input.tokens[s])));
            scatter_step(&mut attn, &step_attn, s, t, m);
        }
        ForwardOutput {
            num_layers: l,
            num_heads: h,
            num_steps: t,
            num_vision_tokens: m,
            log_probs,
            attn,
        }
    }

    /// Log-probabilities from the language prior alone (no vision input at
    /// all). Does not count as a forward pass.
    pub fn prior_log_probs(&self, tokens: &[usize]) -> Vec<f64> {
        let dm = self.spec.model_dim;
        (0..tokens.len())
            .map(|s| {
                let prev = if s == 0 { None } else { Some(tokens[s - 1]) };
                let h = self.initial_state(prev, s);
                let logits: Vec<f64> = (0..self.spec.vocab_size)
                    .map(|v| stats::dot(&self.unembed[v * dm..(v + 1) * dm], &h) + self.prior[v])
                    .collect();
                quantize_logp(Self::log_softmax_at(&logits, tokens[s]))
            })
            .collect()
    }

    /// Samples a sequence of `num_steps` tokens from the unmasked model and
    /// returns it with the baseline outputs of that same run. Counts as one
    /// forward pass.
    pub fn generate(
        &self,
        features: Vec<Vec<f64>>,
        blocked: Vec<bool>,
        num_steps: usize,
        sampling_temperature: f64,
        seed: u64,
    ) -> Result<(ToyInput, ForwardOutput)> {
        let mut input = ToyInput {
            features,
            tokens: Vec::with_capacity(num_steps),
            blocked,
            partition: None,
        };
        let m = input.num_vision_tokens();
        let mask = VisionMask::none(m);
        self.check_input(&input, &mask)?;
        let (l, h) = (self.spec.num_layers, self.spec.num_heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prepared = self.prepare(&input);
        let mut step_attn = vec![0.0f32; l * h * m];
        let mut per_step = Vec::with_capacity(num_steps);
        let mut log_probs = Vec::with_capacity(num_steps);
        for s in 0..num_steps {
            let prev = input.tokens.last().copied();
            let logits = self.step(&input, &prepared, &mask, prev, s, &mut step_attn);
            let tok = sample_categorical(&logits, sampling_temperature, &mut rng);
            log_probs.push(quantize_logp(Self::log_softmax_at(&logits, tok)));
            input.tokens.push(tok);
            per_step.push(step_attn.clone());
        }
        let mut attn = vec![0.0f32; l * h * num_steps * m];
        for (s, row) in per_step.iter().enumerate() {
            scatter_step(&mut attn, row, s, num_steps, m);
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok((
            input,
            ForwardOutput {
                num_layers: l,
                num_heads: h,
                num_steps,
                num_vision_tokens: m,
                log_probs,
                attn,
            },
        ))
    }
}

fn scatter_step(attn: &mut [f32], step_attn: &[f32], step: usize, num_steps: usize, m: usize) {
    for (lh, row) in step_attn.chunks_exact(m).enumerate() {
        let start = (lh * num_steps + step) * m;
        attn[start..start + m].copy_from_slice(row);
    }
}

fn sample_categorical(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if !(temperature > 0.0) {
        return logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&x| libm::exp((x - max) / temperature)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    logits.len() - 1
}

impl AblationOracle for ToyModel {
    fn forward(&self, input: &ToyInput, mask: &VisionMask) -> Result<ForwardOutput> {
        self.check_input(input, mask)?;
        let out = self.run(input, mask);
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    fn pass_count(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    fn reset_pass_count(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }
}

/// Oracle whose span effects are exactly linear in pooled region features.
///
/// Under a mask, the log-probability of step `t` drops by
/// `sum over masked i of (1 / |R(i)|) * sum_{l,h} w*[l,h] * A[l,h,t,i]`,
/// using the unmasked attention. Summed over a span `S`, ablating regions `B`
/// therefore costs exactly `|S| * sum_{k in B} w* . F_{S,k}`. Returned
/// attention is the unmasked attention with masked columns zeroed.
#[derive(Debug)]
pub struct PlantedModel {
    base: ToyModel,
    plant: Vec<f64>,
}

impl PlantedModel {
    pub fn new(base: ToyModel, plant: Vec<f64>) -> Result<Self> {
        Error::check_dim("planted weights", base.spec.num_layers * base.spec.num_heads, plant.len())?;
        Ok(PlantedModel { base, plant })
    }

    /// Plant drawn from a standard normal with the given seed.
    pub fn with_random_plant(base: ToyModel, seed: u64) -> Self {
        let d = base.spec.num_layers * base.spec.num_heads;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plant = normal_vec(&mut rng, d, 1.0);
        PlantedModel { base, plant }
    }

    pub fn plant(&self) -> &[f64] {
        &self.plant
    }

    pub fn base(&self) -> &ToyModel {
        &self.base
    }
}

impl AblationOracle for PlantedModel {
    fn forward(&self, input: &ToyInput, mask: &VisionMask) -> Result<ForwardOutput> {
        self.base.check_input(input, mask)?;
        let partition = input
            .partition
            .as_ref()
            .ok_or_else(|| Error::validation("partition", "planted oracle needs the input's partition"))?;
        Error::check_dim("partition vision tokens", input.num_vision_tokens(), partition.num_tokens())?;
        let clean = self.base.run(input, &VisionMask::none(input.num_vision_tokens()));
        let (l, h, t, m) = (clean.num_layers, clean.num_heads, clean.num_steps, clean.num_vision_tokens);
        let mut log_probs = Vec::with_capacity(t);
        for s in 0..t {
            let mut drop = 0.0;
            for i in (0..m).filter(|&i| mask.is_masked(i)) {
                let size = partition.region_size(partition.region_of(i)) as f64;
                let mut contrib = 0.0;
                for lh in 0..l * h {
                    contrib += self.plant[lh] * f64::from(clean.attn[(lh * t + s) * m + i]);
                }
                drop += contrib / size;
            }
            log_probs.push(quantize_logp(clean.log_probs[s] - drop));
        }
        let mut attn = clean.attn;
        for (n, a) in attn.iter_mut().enumerate() {
            if mask.is_masked(n % m) {
                *a = 0.0;
            }
        }
        self.base.passes.fetch_add(1, Ordering::Relaxed);
        Ok(ForwardOutput {
            num_layers: l,
            num_heads: h,
            num_steps: t,
            num_vision_tokens: m,
            log_probs,
            attn,
        })
    }

    fn pass_count(&self) -> u64 {
        self.base.pass_count()
    }

    fn reset_pass_count(&self) {
        self.base.reset_pass_count()
    }
}

/// Effects of one ablation on one span.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRecord {
    /// `log p(y_t | x) - log p(y_t | ablated x)` for each `t` in the span.
    pub token_effects: Vec<f64>,
    pub span_effect: f64,
    pub passes: u64,
}

/// Span effect read off an already computed ablated pass.
pub fn span_effect(baseline: &ForwardOutput, ablated: &ForwardOutput, span: &Span) -> Result<AblationRecord> {
    span.check(baseline.num_steps)?;
    Error::check_dim("ablated steps", baseline.num_steps, ablated.num_steps)?;
    let token_effects: Vec<f64> = (span.start..span.end)
        .map(|t| baseline.log_probs[t] - ablated.log_probs[t])
        .collect();
    let span_effect = token_effects.iter().sum();
    Ok(AblationRecord {
        token_effects,
        span_effect,
        passes: 0,
    })
}

/// Measures the effect of `mask` on `span` with one extra forward pass.
pub fn ablation_effect<O: AblationOracle + ?Sized>(
    oracle: &O,
    input: &ToyInput,
    baseline: &ForwardOutput,
    span: &Span,
    mask: &VisionMask,
) -> Result<AblationRecord> {
    span.check(baseline.num_steps)?;
    let ablated = oracle.forward(input, mask)?;
    let mut rec = span_effect(baseline, &ablated, span)?;
    rec.passes = 1;
    Ok(rec)
}

/// Exhaustive single-region effects: `result[s][k]` is the effect of ablating
/// region `k` alone on `spans[s]`. Uses exactly `K` forward passes.
pub fn region_effects<O: AblationOracle + ?Sized>(
    oracle: &O,
    input: &ToyInput,
    baseline: &ForwardOutput,
    partition: &RegionPartition,
    spans: &[Span],
) -> Result<Vec<Vec<f64>>> {
    let k = partition.num_regions();
    let mut out = vec![vec![0.0; k]; spans.len()];
    for r in 0..k {
        let ablated = oracle.forward(input, &VisionMask::from_regions(partition, &[r]))?;
        for (s, span) in spans.iter().enumerate() {
            out[s][r] = span_effect(baseline, &ablated, span)?.span_effect;
        }
    }
    Ok(out)
}

/// Synthetic image: rectangular objects over a background, one prototype
/// feature vector per object plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub grid_dims: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise: f64,
    /// Fraction of vision tokens that are blocked from attention.
    pub blocked_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            grid_dims: (8, 8),
            min_objects: 6,
            max_objects: 10,
            noise: 0.1,
            blocked_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub features: Vec<Vec<f64>>,
    pub saliency: Vec<f64>,
    pub blocked: Vec<bool>,
    /// Object id per vision token (0 = background).
    pub objects: Vec<usize>,
}

pub fn generate_scene(spec: &SceneSpec, feature_dim: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = spec.grid_dims;
    let m = rows * cols;
    let n_obj = rng.random_range(spec.min_objects..=spec.max_objects.max(spec.min_objects));
    let protos: Vec<Vec<f64>> = (0..=n_obj).map(|_| normal_vec(&mut rng, feature_dim, 1.0)).collect();
    let mut objects = vec![0usize; m];
    for o in 1..=n_obj {
        let h = rng.random_range(1..=(rows / 2).max(1));
        let w = rng.random_range(1..=(cols / 2).max(1));
        let r0 = rng.random_range(0..=rows - h);
        let c0 = rng.random_range(0..=cols - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                objects[r * cols + c] = o;
            }
        }
    }
    let features = objects
        .iter()
        .map(|&o| protos[o].iter().map(|&p| p + spec.noise * normal(&mut rng)).collect())
        .collect();
    let saliency = objects
        .iter()
        .map(|&o| {
            let base = if o == 0 { 0.3 } else { 1.0 };
            base * libm::exp(0.5 * normal(&mut rng))
        })
        .collect();
    let blocked = (0..m).map(|_| rng.random_bool(spec.blocked_fraction.clamp(0.0, 1.0))).collect();
    Scene {
        features,
        saliency,
        blocked,
        objects,
    }
}

/// How regions are formed for each generated example.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PartitionSpec {
    pub method: PartitionMethod,
    pub tau: f64,
    /// Region count for the fixed-K methods.
    pub k: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            method: PartitionMethod::Agglomerative,
            tau: 0.5,
            k: 8,
        }
    }
}

impl PartitionSpec {
    pub fn build(&self, features: &[Vec<f64>], grid_dims: (usize, usize), seed: u64) -> Result<RegionPartition> {
        match self.method {
            PartitionMethod::Agglomerative => {
                unitization::cluster_agglomerative(features, grid_dims, AgglomerativeConfig::with_tau(self.tau))
            }
            PartitionMethod::Tokenwise => RegionPartition::tokenwise(grid_dims),
            PartitionMethod::RandomBlocks => unitization::partition_random_blocks(grid_dims, self.k, seed),
            PartitionMethod::Voronoi => unitization::partition_voronoi(grid_dims, self.k),
            PartitionMethod::Kmeans => Ok(unitization::cluster_kmeans(features, grid_dims, self.k, seed, 100)?.partition),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OracleMode {
    /// Real masked forward passes through the softmax model.
    Nonlinear,
    /// Linear response; targets get Gaussian noise with standard deviation
    /// `noise_fraction` times the per-sample target standard deviation.
    Planted { noise_fraction: f64, plant_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskStrategy {
    /// `N` i.i.d. random masks per example.
    Random,
    /// Random masks followed by every single-region ablation.
    RandomWithSingletons,
    /// Exactly these masks for every example.
    Fixed(Vec<MaskSample>),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSpec {
    pub model: ToyModelSpec,
    pub mode: OracleMode,
    pub scene: SceneSpec,
    pub partition: PartitionSpec,
    pub num_examples: usize,
    pub num_steps: usize,
    pub spans_per_example: usize,
    pub masks_per_sample: usize,
    pub masks: MaskStrategy,
    pub sampling_temperature: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            model: ToyModelSpec::default(),
            mode: OracleMode::Nonlinear,
            scene: SceneSpec::default(),
            partition: PartitionSpec::default(),
            num_examples: 8,
            num_steps: 24,
            spans_per_example: 3,
            masks_per_sample: 32,
            masks: MaskStrategy::Random,
            sampling_temperature: 0.7,
            seed: 42,
        }
    }
}

/// Either flavour of oracle, built from a [`DatasetSpec`].
#[derive(Debug)]
pub enum SpecOracle {
    Nonlinear(ToyModel),
    Planted(PlantedModel),
}

impl SpecOracle {
    pub fn build(spec: &DatasetSpec) -> Result<Self> {
        let model = ToyModel::new(spec.model.clone())?;
        Ok(match spec.mode {
            OracleMode::Nonlinear => SpecOracle::Nonlinear(model),
            OracleMode::Planted { plant_seed, .. } => SpecOracle::Planted(PlantedModel::with_random_plant(model, plant_seed)),
        })
    }

    pub fn model(&self) -> &ToyModel {
        match self {
            SpecOracle::Nonlinear(m) => m,
            SpecOracle::Planted(p) => p.base(),
        }
    }
}

impl AblationOracle for SpecOracle {
    fn forward(&self, input: &ToyInput, mask: &VisionMask) -> Result<ForwardOutput> {
        match self {
            SpecOracle::Nonlinear(m) => m.forward(input, mask),
            SpecOracle::Planted(p) => p.forward(input, mask),
        }
    }

    fn pass_count(&self) -> u64 {
        self.model().pass_count()
    }

    fn reset_pass_count(&self) {
        self.model().reset_pass_count()
    }
}

/// One generated example with everything needed to score and re-ablate it.
#[derive(Debug, Clone)]
pub struct GeneratedExample {
    pub input: ToyInput,
    pub baseline: ForwardOutput,
    pub trace: AttentionTrace,
    pub partition: RegionPartition,
    pub spans: Vec<Span>,
}

#[derive(Debug)]
pub struct Dataset {
    pub examples: Vec<GeneratedExample>,
    pub training: TrainingSet,
    pub forward_passes: u64,
}

/// Splits `[0, num_steps)` into `parts` contiguous spans of near-equal length.
pub fn even_spans(num_steps: usize, parts: usize) -> Vec<Span> {
    let parts = parts.clamp(1, num_steps.max(1));
    (0..parts)
        .map(|p| Span::labeled(p * num_steps / parts, (p + 1) * num_steps / parts, format!("step {}", p + 1)))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Derives per-example seeds so examples are independent of each other.
pub fn example_seed(seed: u64, index: usize, salt: u64) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds the trace, partition and baseline for example `index` of `spec`.
pub fn generate_example(oracle: &SpecOracle, spec: &DatasetSpec, index: usize) -> Result<GeneratedExample> {
    let model = oracle.model();
    let scene = generate_scene(&spec.scene, spec.model.feature_dim, example_seed(spec.seed, index, 1));
    let partition = spec
        .partition
        .build(&scene.features, spec.scene.grid_dims, example_seed(spec.seed, index, 2))?;
    let (mut input, baseline) = model.generate(
        scene.features.clone(),
        scene.blocked.clone(),
        spec.num_steps,
        spec.sampling_temperature,
        example_seed(spec.seed, index, 3),
    )?;
    input.partition = Some(partition.clone());
    let spans = even_spans(spec.num_steps, spec.spans_per_example);
    let trace = build_trace(&input, &baseline, spec.scene.grid_dims, &scene.saliency, spans.clone());
    Ok(GeneratedExample {
        input,
        baseline,
        trace,
        partition,
        spans,
    })
}

/// Packages an unmasked run as an [`AttentionTrace`].
pub fn build_trace(
    input: &ToyInput,
    baseline: &ForwardOutput,
    grid_dims: (usize, usize),
    saliency: &[f64],
    spans: Vec<Span>,
) -> AttentionTrace {
    let d = input.features.first().map_or(0, Vec::len);
    AttentionTrace {
        num_layers: baseline.num_layers,
        num_heads: baseline.num_heads,
        num_steps: baseline.num_steps,
        num_vision_tokens: baseline.num_vision_tokens,
        feature_dim: d,
        grid_dims,
        tokens: input.tokens.iter().map(|&t| token_text(t)).collect(),
        attn: baseline.attn.clone(),
        feature_grid: input.features.iter().flatten().map(|&x| x as f32).collect(),
        saliency: saliency.iter().map(|&x| x as f32).collect(),
        spans,
    }
}

/// Generates examples, samples masks and measures every target with real
/// forward passes: one baseline per example plus one pass per mask. Masks are
/// shared by all spans of an example, so spans cost no extra passes.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let oracle = SpecOracle::build(spec)?;
    generate_dataset_with(&oracle, spec)
}

pub fn generate_dataset_with(oracle: &SpecOracle, spec: &DatasetSpec) -> Result<Dataset> {
    check_collect_spec(spec)?;
    let start_passes = oracle.pass_count();
    let mut examples = Vec::with_capacity(spec.num_examples);
    let mut samples = Vec::new();
    for e in 0..spec.num_examples {
        let (ex, s) = collect_example(oracle, spec, e)?;
        examples.push(ex);
        samples.extend(s);
    }
    Ok(Dataset {
        examples,
        training: TrainingSet { samples },
        forward_passes: oracle.pass_count() - start_passes,
    })
}

pub fn check_collect_spec(spec: &DatasetSpec) -> Result<()> {
    if spec.masks_per_sample == 0 && !matches!(spec.masks, MaskStrategy::Fixed(_)) {
        return Err(Error::validation("masks_per_sample", "must be positive"));
    }
    if spec.num_steps == 0 {
        return Err(Error::validation("num_steps", "must be positive"));
    }
    Ok(())
}

/// Example `index` of `spec` with one training sample per span. Depends only
/// on `(spec, index)`, so examples can be collected in any order or in
/// parallel.
pub fn collect_example(oracle: &SpecOracle, spec: &DatasetSpec, index: usize) -> Result<(GeneratedExample, Vec<TrainingSample>)> {
    let e = index;
    let ex = generate_example(oracle, spec, e)?;
    let k = ex.partition.num_regions();
    let masks = match &spec.masks {
        MaskStrategy::Random => sample_masks(k, spec.masks_per_sample, example_seed(spec.seed, e, 4)),
        MaskStrategy::RandomWithSingletons => {
            let mut m = sample_masks(k, spec.masks_per_sample, example_seed(spec.seed, e, 4));
            m.extend((0..k).map(|r| MaskSample::ablating(k, &[r])));
            m
        }
        MaskStrategy::Fixed(m) => {
            for mask in m {
                Error::check_dim("fixed mask", k, mask.len())?;
            }
            m.clone()
        }
    };
    let mut targets = vec![Vec::with_capacity(masks.len()); ex.spans.len()];
    for mask in &masks {
        let ablated = oracle.forward(&ex.input, &VisionMask::from_sample(&ex.partition, mask))?;
        for (s, span) in ex.spans.iter().enumerate() {
            targets[s].push(span_effect(&ex.baseline, &ablated, span)?.span_effect);
        }
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(example_seed(spec.seed, e, 5));
    let mut samples = Vec::with_capacity(ex.spans.len());
    for (s, span) in ex.spans.iter().enumerate() {
        let mut t = core::mem::take(&mut targets[s]);
        if let OracleMode::Planted { noise_fraction, .. } = spec.mode {
            let sigma = noise_fraction * stats::std_dev(&t);
            t.iter_mut().for_each(|x| *x += sigma * normal(&mut noise_rng));
        }
        samples.push(TrainingSample {
            features: pool_span_region(&ex.trace, span, &ex.partition)?,
            masks: masks.clone(),
            targets: t,
            correct: true,
        });
    }
    Ok((ex, samples))
}
