//! The amortized linear estimator.
//!
//! A single weight per (layer, head) maps a region's pooled attention features
//! to its predicted ablation effect. The effect of ablating a set of regions is
//! predicted as the sum of their scores. Weights are fit by maximizing, per
//! span, the Pearson correlation between predicted and measured mask effects.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{ablated_feature, pool_span_region, MaskSample, SpanFeatureMatrix};
use crate::stats::{self, dot};
use crate::trace::{AttentionTrace, Span};
use crate::unitization::RegionPartition;
use crate::{Error, Result};

pub use crate::stats::pearson;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimatorWeights {
    pub num_layers: usize,
    pub num_heads: usize,
    pub w: Vec<f64>,
    pub config_hash: u64,
    pub seed: u64,
}

impl EstimatorWeights {
    pub fn new(num_layers: usize, num_heads: usize, w: Vec<f64>) -> Result<Self> {
        Error::check_dim("weights", num_layers * num_heads, w.len())?;
        if let Some(i) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "weights", index: i });
        }
        Ok(EstimatorWeights {
            num_layers,
            num_heads,
            w,
            config_hash: 0,
            seed: 0,
        })
    }

    /// `w = 1 / (L * H)` everywhere: scores become mean attention.
    pub fn uniform(num_layers: usize, num_heads: usize) -> Self {
        let d = num_layers * num_heads;
        EstimatorWeights {
            num_layers,
            num_heads,
            w: vec![1.0 / d as f64; d],
            config_hash: 0,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// One training span: its pooled features, the sampled masks and the measured
/// effect of each mask.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingSample {
    pub features: SpanFeatureMatrix,
    pub masks: Vec<MaskSample>,
    /// Drop in span log-probability (nats) under each mask.
    pub targets: Vec<f64>,
    /// Samples flagged incorrect are kept in the file but skipped by training.
    pub correct: bool,
}

impl TrainingSample {
    pub fn check(&self) -> Result<()> {
        let k = self.features.num_regions;
        Error::check_dim("targets", self.masks.len(), self.targets.len())?;
        if self.masks.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "sample has {} masks, need at least 2",
                self.masks.len()
            )));
        }
        for m in &self.masks {
            Error::check_dim("mask length", k, m.len())?;
        }
        if let Some(i) = self.targets.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "targets", index: i });
        }
        Ok(())
    }

    fn targets_degenerate(&self) -> bool {
        self.targets.iter().all(|&t| t == self.targets[0])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// (sample, mask) pairs per batch.
    pub batch_size: usize,
    pub masks_per_sample: usize,
    pub seed: u64,
    pub min_learning_rate: f64,
    pub warmup_iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            iterations: 2000,
            batch_size: 512,
            masks_per_sample: 32,
            seed: 42,
            min_learning_rate: 1e-5,
            warmup_iterations: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("min_learning_rate", self.min_learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("{v} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay", "must be nonnegative"));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::validation("iterations", "iterations and batch size must be positive"));
        }
        if self.masks_per_sample < 2 {
            return Err(Error::validation("masks_per_sample", "need at least 2 masks"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("beta", "moment decay rates must lie in [0, 1)"));
        }
        Ok(())
    }

    /// FNV-1a over the textual form of every field.
    pub fn hash(&self) -> u64 {
        let text = format!(
            "lr={};wd={};iters={};batch={};n={};seed={};min_lr={};warmup={};b1={};b2={};eps={}",
            self.learning_rate,
            self.weight_decay,
            self.iterations,
            self.batch_size,
            self.masks_per_sample,
            self.seed,
            self.min_learning_rate,
            self.warmup_iterations,
            self.beta1,
            self.beta2,
            self.epsilon
        );
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Step size at iteration `i`: linear warmup, then cosine decay to the floor.
    pub fn learning_rate_at(&self, i: usize) -> f64 {
        let warm = self.warmup_iterations.min(self.iterations.saturating_sub(1));
        if i < warm {
            return self.learning_rate * (i + 1) as f64 / warm as f64;
        }
        let span = (self.iterations - warm).saturating_sub(1).max(1) as f64;
        let progress = ((i - warm) as f64 / span).min(1.0);
        self.min_learning_rate
            + (self.learning_rate - self.min_learning_rate) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

/// `n` masks over `k` regions with i.i.d. fair bits.
pub fn sample_masks(k: usize, n: usize, seed: u64) -> Vec<MaskSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| MaskSample::from_retained((0..k).map(|_| rng.random_bool(0.5)).collect()))
        .collect()
}

/// Predicted effect of ablating the regions `mask` does not retain.
pub fn predict_mask_effect(weights: &EstimatorWeights, features: &SpanFeatureMatrix, mask: &MaskSample) -> Result<f64> {
    Error::check_dim("weights", features.dim(), weights.dim())?;
    Ok(dot(&weights.w, &ablated_feature(features, mask)?))
}

/// Per-region scores `w . F[k]`.
pub fn score_regions(weights: &EstimatorWeights, features: &SpanFeatureMatrix) -> Result<Vec<f64>> {
    Error::check_dim("weights", features.dim(), weights.dim())?;
    Ok(features.rows().map(|row| dot(&weights.w, row)).collect())
}

/// Mean attention per region over all layers and heads.
pub fn attention_baseline(trace: &AttentionTrace, span: &Span, partition: &RegionPartition) -> Result<Vec<f64>> {
    let features = pool_span_region(trace, span, partition)?;
    score_regions(&EstimatorWeights::uniform(trace.num_layers, trace.num_heads), &features)
}

/// Uniform `[0, 1)` scores.
pub fn random_baseline(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| rng.random::<f64>()).collect()
}

/// Pearson correlation of `design * w` against `targets`, and its gradient in
/// `w`. `design[j]` is the ablated-feature vector of mask `j`.
pub fn pearson_with_gradient(w: &[f64], design: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    Error::check_dim("targets", design.len(), targets.len())?;
    let preds: Vec<f64> = design.iter().map(|g| dot(w, g)).collect();
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let my = targets.iter().sum::<f64>() / n;
    let pc: Vec<f64> = preds.iter().map(|p| p - mp).collect();
    let yc: Vec<f64> = targets.iter().map(|y| y - my).collect();
    let spp: f64 = pc.iter().map(|x| x * x).sum();
    let syy: f64 = yc.iter().map(|x| x * x).sum();
    if !(spp > 0.0) {
        return Err(Error::DegenerateVariance { what: "predictions" });
    }
    if !(syy > 0.0) {
        return Err(Error::DegenerateVariance { what: "targets" });
    }
    let spy: f64 = pc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let denom = libm::sqrt(spp * syy);
    let rho = spy / denom;
    let mut grad = vec![0.0; w.len()];
    for ((g, a), b) in design.iter().zip(&pc).zip(&yc) {
        let coef = b / denom - rho * a / spp;
        grad.iter_mut().zip(g).for_each(|(o, x)| *o += coef * x);
    }
    Ok((rho, grad))
}

/// Loss of one batch: the negated mean per-sample correlation, with its
/// gradient. Samples whose predictions or targets are constant are skipped;
/// `None` means every sample was skipped.
pub fn batch_loss_with_gradient(w: &[f64], batch: &[(&[Vec<f64>], &[f64])]) -> Option<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; w.len()];
    let mut used = 0usize;
    for (design, targets) in batch {
        match pearson_with_gradient(w, design, targets) {
            Ok((rho, g)) => {
                total += rho;
                grad.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                used += 1;
            }
            Err(_) => continue,
        }
    }
    if used == 0 {
        return None;
    }
    let scale = -1.0 / used as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Some((total * scale, grad))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: EstimatorWeights,
    /// Batch loss per iteration (`NaN` where the batch was skipped).
    pub loss_history: Vec<f64>,
    pub skipped_batches: usize,
}

/// Fits the estimator with AdamW on the per-span Pearson objective.
pub fn train(dataset: &TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.check()?;
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::Training(String::from("empty training set")))?;
    let (num_layers, num_heads) = (first.features.num_layers, first.features.num_heads);
    let d = num_layers * num_heads;

    struct Prepared {
        design: Vec<Vec<f64>>,
        targets: Vec<f64>,
    }
    let mut prepared = Vec::new();
    for (idx, s) in dataset.samples.iter().enumerate() {
        s.check()?;
        Error::check_dim("sample feature dim", d, s.features.dim())?;
        if !s.correct {
            continue;
        }
        if s.targets_degenerate() {
            log::warn!("sample {idx}: constant targets, skipped");
            continue;
        }
        let design = s
            .masks
            .iter()
            .map(|m| ablated_feature(&s.features, m))
            .collect::<Result<Vec<_>>>()?;
        prepared.push(Prepared {
            design,
            targets: s.targets.clone(),
        });
    }
    if prepared.is_empty() {
        return Err(Error::Training(String::from(
            "no usable samples: every sample is degenerate or flagged incorrect",
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / libm::sqrt(d as f64);
    let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-bound..bound)).collect();
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut adam_steps = 0i32;

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut history = Vec::with_capacity(config.iterations);
    let mut skipped = 0usize;

    for it in 0..config.iterations {
        let mut batch: Vec<(&[Vec<f64>], &[f64])> = Vec::new();
        let mut pairs = 0usize;
        while pairs < config.batch_size && batch.len() < prepared.len() {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let p = &prepared[order[cursor]];
            cursor += 1;
            pairs += p.targets.len();
            batch.push((&p.design, &p.targets));
        }

        let Some((loss, grad)) = batch_loss_with_gradient(&w, &batch) else {
            log::warn!("iteration {it}: every sample in the batch is degenerate, skipped");
            skipped += 1;
            history.push(f64::NAN);
            continue;
        };
        history.push(loss);

        adam_steps += 1;
        let lr = config.learning_rate_at(it);
        let bc1 = 1.0 - libm::pow(config.beta1, f64::from(adam_steps));
        let bc2 = 1.0 - libm::pow(config.beta2, f64::from(adam_steps));
        for j in 0..d {
            w[j] -= lr * config.weight_decay * w[j];
            m1[j] = config.beta1 * m1[j] + (1.0 - config.beta1) * grad[j];
            m2[j] = config.beta2 * m2[j] + (1.0 - config.beta2) * grad[j] * grad[j];
            let mhat = m1[j] / bc1;
            let vhat = m2[j] / bc2;
            w[j] -= lr * mhat / (libm::sqrt(vhat) + config.epsilon);
        }
    }

    if skipped == config.iterations {
        return Err(Error::Training(String::from("every batch was degenerate")));
    }
    Ok(TrainOutcome {
        weights: EstimatorWeights {
            num_layers,
            num_heads,
            w,
            config_hash: config.hash(),
            seed: config.seed,
        },
        loss_history: history,
        skipped_batches: skipped,
    })
}

/// Best affine fit `alpha * z + beta` of the standardized targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub alpha: f64,
    pub beta: f64,
    /// Mean squared residual against the standardized targets.
    pub mse: f64,
}

/// Closed-form least-squares rescaling of predictions `z` onto the
/// standardized targets. The residual equals `1 - pearson(z, targets)^2`.
pub fn standardized_affine_fit(z: &[f64], targets: &[f64]) -> Result<AffineFit> {
    Error::check_dim("targets", z.len(), targets.len())?;
    let sd = stats::std_dev(targets);
    if !(sd > 0.0) {
        return Err(Error::DegenerateVariance { what: "targets" });
    }
    let mt = stats::mean(targets);
    let std_targets: Vec<f64> = targets.iter().map(|t| (t - mt) / sd).collect();
    let vz = stats::variance(z);
    if !(vz > 0.0) {
        return Err(Error::DegenerateVariance { what: "predictions" });
    }
    let mz = stats::mean(z);
    let cov = z.iter().zip(&std_targets).map(|(a, b)| (a - mz) * b).sum::<f64>() / z.len() as f64;
    let alpha = cov / vz;
    let beta = stats::mean(&std_targets) - alpha * mz;
    Ok(AffineFit {
        alpha,
        beta,
        mse: affine_mse(z, &std_targets, alpha, beta),
    })
}

/// Mean of `(y - (alpha * z + beta))^2`.
pub fn affine_mse(z: &[f64], y: &[f64], alpha: f64, beta: f64) -> f64 {
    z.iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (alpha * a + beta);
            r * r
        })
        .sum::<f64>()
        / z.len() as f64
}
