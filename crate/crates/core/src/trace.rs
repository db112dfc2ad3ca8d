//! Attention traces: cached text-to-vision attention for one generation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

/// Slack allowed on the per-row vision mass.
pub const ROW_MASS_TOLERANCE: f32 = 1e-4;

/// A contiguous range `[start, end)` of generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span {
            start,
            end,
            label: String::new(),
        }
    }

    pub fn labeled(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, num_steps: usize) -> Result<()> {
        if self.start >= self.end {
            return Err(Error::EmptySpan);
        }
        if self.end > num_steps {
            return Err(Error::SpanOutOfRange {
                start: self.start,
                end: self.end,
                len: num_steps,
            });
        }
        Ok(())
    }
}

/// Cached attention for one generated sequence over one image.
///
/// `attn` is stored flat in `[layer][head][step][vision token]` order. Each
/// row over vision tokens is a sub-distribution: mass on text positions is
/// not carried.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_steps: usize,
    pub num_vision_tokens: usize,
    pub feature_dim: usize,
    pub grid_dims: (usize, usize),
    pub tokens: Vec<String>,
    pub attn: Vec<f32>,
    /// `[vision token][feature_dim]`, row-major.
    pub feature_grid: Vec<f32>,
    pub saliency: Vec<f32>,
    pub spans: Vec<Span>,
}

/// One failed invariant, with the offending location.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub index: Vec<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}: {}", self.field, self.index, self.detail)
    }
}

impl AttentionTrace {
    pub fn num_features(&self) -> usize {
        self.num_layers * self.num_heads
    }

    #[inline]
    pub fn attn_index(&self, layer: usize, head: usize, step: usize, token: usize) -> usize {
        ((layer * self.num_heads + head) * self.num_steps + step) * self.num_vision_tokens + token
    }

    #[inline]
    pub fn attention(&self, layer: usize, head: usize, step: usize, token: usize) -> f32 {
        self.attn[self.attn_index(layer, head, step, token)]
    }

    /// Attention over vision tokens for one `(layer, head, step)`.
    pub fn attention_row(&self, layer: usize, head: usize, step: usize) -> &[f32] {
        let start = self.attn_index(layer, head, step, 0);
        &self.attn[start..start + self.num_vision_tokens]
    }

    /// All attention emitted at one decoding step, laid out `[layer][head][token]`.
    /// This is the unit the streaming producer pushes.
    pub fn step_rows(&self, step: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_features() * self.num_vision_tokens);
        for l in 0..self.num_layers {
            for h in 0..self.num_heads {
                out.extend_from_slice(self.attention_row(l, h, step));
            }
        }
        out
    }

    pub fn feature_row(&self, token: usize) -> &[f32] {
        &self.feature_grid[token * self.feature_dim..(token + 1) * self.feature_dim]
    }

    /// Feature grid widened to `f64`, one row per vision token.
    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_vision_tokens)
            .map(|i| self.feature_row(i).iter().map(|&x| f64::from(x)).collect())
            .collect()
    }

    pub fn saliency_f64(&self) -> Vec<f64> {
        self.saliency.iter().map(|&x| f64::from(x)).collect()
    }

    /// Every invariant violation, in a fixed scan order. Empty iff the trace
    /// is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, index: Vec<usize>, detail: String| {
            out.push(Violation {
                field,
                index,
                detail,
            })
        };

        let m = self.num_vision_tokens;
        let (rows, cols) = self.grid_dims;
        if rows * cols != m {
            push(
                "grid_dims",
                Vec::new(),
                format!("{rows}x{cols} does not cover {m} vision tokens"),
            );
        }
        if self.tokens.len() != self.num_steps {
            push(
                "tokens",
                Vec::new(),
                format!("{} token strings for {} steps", self.tokens.len(), self.num_steps),
            );
        }

        let expected_attn = self.num_layers * self.num_heads * self.num_steps * m;
        if self.attn.len() != expected_attn {
            push(
                "attn",
                Vec::new(),
                format!("{} entries, expected {expected_attn}", self.attn.len()),
            );
        } else {
            for l in 0..self.num_layers {
                for h in 0..self.num_heads {
                    for t in 0..self.num_steps {
                        let row = self.attention_row(l, h, t);
                        let mut mass = 0.0f32;
                        for (i, &a) in row.iter().enumerate() {
                            if !(0.0..=1.0).contains(&a) {
                                push("attn", alloc::vec![l, h, t, i], format!("entry {a} outside [0, 1]"));
                            }
                            mass += a;
                        }
                        if !(mass <= 1.0 + ROW_MASS_TOLERANCE) {
                            push("attn", alloc::vec![l, h, t], format!("row mass {mass} exceeds 1"));
                        }
                    }
                }
            }
        }

        if self.feature_grid.len() != m * self.feature_dim {
            push(
                "feature_grid",
                Vec::new(),
                format!(
                    "{} entries, expected {} rows of {}",
                    self.feature_grid.len(),
                    m,
                    self.feature_dim
                ),
            );
        } else if let Some(i) = self.feature_grid.iter().position(|x| !x.is_finite()) {
            push("feature_grid", alloc::vec![i], String::from("non-finite entry"));
        }

        if self.saliency.len() != m {
            push(
                "saliency",
                Vec::new(),
                format!("{} entries, expected {m}", self.saliency.len()),
            );
        } else {
            for (i, &s) in self.saliency.iter().enumerate() {
                if !(s >= 0.0) || !s.is_finite() {
                    push("saliency", alloc::vec![i], format!("entry {s} is not a finite nonnegative value"));
                }
            }
        }

        let mut prev_end = 0;
        for (n, span) in self.spans.iter().enumerate() {
            if span.start >= span.end || span.end > self.num_steps {
                push("spans", alloc::vec![n], format!("[{}, {}) invalid for {} steps", span.start, span.end, self.num_steps));
            } else if span.start < prev_end {
                push("spans", alloc::vec![n], String::from("overlaps or precedes previous span"));
            }
            prev_end = prev_end.max(span.end);
        }
        out
    }

    /// [`validate`](Self::validate), collapsed into the first violation.
    pub fn check(&self) -> Result<()> {
        match self.validate().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::Validation {
                field: v.field,
                reason: format!("{:?}: {}", v.index, v.detail),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny() -> AttentionTrace {
        AttentionTrace {
            num_layers: 1,
            num_heads: 1,
            num_steps: 2,
            num_vision_tokens: 2,
            feature_dim: 1,
            grid_dims: (1, 2),
            tokens: vec!["a".into(), "b".into()],
            attn: vec![0.5, 0.5, 0.2, 0.3],
            feature_grid: vec![1.0, 2.0],
            saliency: vec![1.0, 0.0],
            spans: vec![Span::new(0, 2)],
        }
    }

    #[test]
    fn valid_trace_has_no_violations() {
        assert!(tiny().validate().is_empty());
    }

    #[test]
    fn negative_attention_names_location() {
        let mut t = tiny();
        t.attn[3] = -0.1;
        let v = t.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "attn");
        assert_eq!(v[0].index, vec![0, 0, 1, 1]);
    }

    #[test]
    fn overfull_row() {
        let mut t = tiny();
        t.attn[0] = 0.8;
        let v = t.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, vec![0, 0, 0]);
    }

    #[test]
    fn negative_saliency() {
        let mut t = tiny();
        t.saliency[1] = -1.0;
        let v = t.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "saliency");
        assert_eq!(v[0].index, vec![1]);
    }

    #[test]
    fn grid_mismatch() {
        let mut t = tiny();
        t.grid_dims = (2, 2);
        assert_eq!(t.validate()[0].field, "grid_dims");
        assert!(t.check().is_err());
    }

    #[test]
    fn step_rows_layout() {
        let t = tiny();
        assert_eq!(t.step_rows(1), vec![0.2, 0.3]);
    }
}
