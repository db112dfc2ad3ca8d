//! Span/region attention pooling and mask combination.
//!
//! For span `S` and region `R_k`, feature `l * H + h` is the mean of
//! `attn[l][h][t][i]` over `t` in `S` and `i` in `R_k`.
//!
//! Mask polarity: in a [`MaskSample`] a `true` bit means the region is
//! *retained*. Ablation effects are always about the complement, the
//! regions whose bit is `false`.

use alloc::vec;
use alloc::vec::Vec;

use crate::trace::{AttentionTrace, Span};
use crate::unitization::RegionPartition;
use crate::{Error, Result};

/// Pooled features for one span: `K` rows of `L * H` means.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpanFeatureMatrix {
    pub num_layers: usize,
    pub num_heads: usize,
    /// `[region][layer * H + head]`, row-major.
    pub data: Vec<f64>,
    pub num_regions: usize,
}

impl SpanFeatureMatrix {
    pub fn zeros(num_regions: usize, num_layers: usize, num_heads: usize) -> Self {
        SpanFeatureMatrix {
            num_layers,
            num_heads,
            data: vec![0.0; num_regions * num_layers * num_heads],
            num_regions,
        }
    }

    pub fn from_rows(num_layers: usize, num_heads: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let d = num_layers * num_heads;
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            Error::check_dim("feature row", d, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(SpanFeatureMatrix {
            num_layers,
            num_heads,
            data,
            num_regions: rows.len(),
        })
    }

    /// `L * H`.
    pub fn dim(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.data[k * d..(k + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim().max(1))
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for row in self.rows() {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }
}

/// Running per-region attention sums for one open span.
///
/// State is `K * L * H` sums plus a token count, independent of span length.
/// Both the offline pooling and the streaming consumer fold token rows through
/// this type, so the two paths perform identical floating-point operations.
#[derive(Debug, Clone)]
pub struct SpanAccumulator {
    num_layers: usize,
    num_heads: usize,
    num_regions: usize,
    sums: Vec<f64>,
    tokens: usize,
}

impl SpanAccumulator {
    pub fn new(num_layers: usize, num_heads: usize, num_regions: usize) -> Self {
        SpanAccumulator {
            num_layers,
            num_heads,
            num_regions,
            sums: vec![0.0; num_regions * num_layers * num_heads],
            tokens: 0,
        }
    }

    /// Number of reals held, for memory accounting.
    pub fn state_len(&self) -> usize {
        self.sums.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Folds one decoding step's attention, laid out `[layer][head][token]`.
    pub fn add_step(&mut self, row: &[f32], partition: &RegionPartition) -> Result<()> {
        let m = partition.num_tokens();
        let d = self.num_layers * self.num_heads;
        Error::check_dim("attention step row", d * m, row.len())?;
        let labels = partition.labels();
        for (lh, head_row) in row.chunks_exact(m).enumerate() {
            for (&a, &k) in head_row.iter().zip(labels) {
                self.sums[k * d + lh] += f64::from(a);
            }
        }
        self.tokens += 1;
        Ok(())
    }

    /// Divides by `|S| * |R_k|` and resets the accumulator.
    pub fn finish(&mut self, partition: &RegionPartition) -> Result<SpanFeatureMatrix> {
        if self.tokens == 0 {
            return Err(Error::EmptySpan);
        }
        let d = self.num_layers * self.num_heads;
        let mut data = vec![0.0; self.sums.len()];
        for k in 0..self.num_regions {
            let denom = (self.tokens * partition.region_size(k)) as f64;
            for lh in 0..d {
                data[k * d + lh] = self.sums[k * d + lh] / denom;
            }
        }
        self.sums.iter_mut().for_each(|s| *s = 0.0);
        self.tokens = 0;
        Ok(SpanFeatureMatrix {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            data,
            num_regions: self.num_regions,
        })
    }
}

/// Mean attention pooled over the span and each region.
pub fn pool_span_region(
    trace: &AttentionTrace,
    span: &Span,
    partition: &RegionPartition,
) -> Result<SpanFeatureMatrix> {
    span.check(trace.num_steps)?;
    Error::check_dim("partition vision tokens", trace.num_vision_tokens, partition.num_tokens())?;
    let mut acc = SpanAccumulator::new(trace.num_layers, trace.num_heads, partition.num_regions());
    for t in span.start..span.end {
        acc.add_step(&trace.step_rows(t), partition)?;
    }
    acc.finish(partition)
}

/// A subset of regions: bit `k` is `true` when region `k` is retained.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct MaskSample {
    retained: Vec<bool>,
}

impl MaskSample {
    pub fn from_retained(retained: Vec<bool>) -> Self {
        MaskSample { retained }
    }

    /// Ablates exactly the listed regions.
    pub fn ablating(num_regions: usize, ablated: &[usize]) -> Self {
        let mut retained = vec![true; num_regions];
        ablated.iter().for_each(|&k| retained[k] = false);
        MaskSample { retained }
    }

    pub fn retain_all(num_regions: usize) -> Self {
        MaskSample {
            retained: vec![true; num_regions],
        }
    }

    /// From a `{-1, +1}` vector (`+1` = retained).
    pub fn from_signed(signed: &[f64]) -> Self {
        MaskSample {
            retained: signed.iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    pub fn is_ablated(&self, k: usize) -> bool {
        !self.retained[k]
    }

    pub fn ablated(&self) -> impl Iterator<Item = usize> + '_ {
        self.retained.iter().enumerate().filter(|(_, &r)| !r).map(|(k, _)| k)
    }

    /// `v_k = 2 b_k - 1`.
    pub fn signed(&self) -> Vec<f64> {
        self.retained.iter().map(|&r| if r { 1.0 } else { -1.0 }).collect()
    }

    /// Indicator of ablated regions as 0/1 reals.
    pub fn ablation_indicator(&self) -> Vec<f64> {
        self.retained.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect()
    }
}

/// `sum_k v_k * F[k]` for a signed mask `v`.
pub fn combine_signed(features: &SpanFeatureMatrix, signed: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim("signed mask", features.num_regions, signed.len())?;
    let mut out = vec![0.0; features.dim()];
    for (row, &v) in features.rows().zip(signed) {
        out.iter_mut().zip(row).for_each(|(o, f)| *o += v * f);
    }
    Ok(out)
}

/// Sum of the rows of `F` flagged by a 0/1 indicator.
///
/// With the ablation indicator of a mask, the dot product of this vector with
/// the weights is the predicted effect of that mask.
pub fn combine_binary(features: &SpanFeatureMatrix, flags: &[bool]) -> Result<Vec<f64>> {
    Error::check_dim("binary mask", features.num_regions, flags.len())?;
    let mut out = vec![0.0; features.dim()];
    for (row, _) in features.rows().zip(flags).filter(|(_, &b)| b) {
        out.iter_mut().zip(row).for_each(|(o, f)| *o += f);
    }
    Ok(out)
}

/// Feature vector whose dot with the weights predicts the effect of `mask`:
/// the sum of feature rows of the ablated regions.
pub fn ablated_feature(features: &SpanFeatureMatrix, mask: &MaskSample) -> Result<Vec<f64>> {
    let flags: Vec<bool> = mask.retained().iter().map(|r| !r).collect();
    combine_binary(features, &flags)
}
