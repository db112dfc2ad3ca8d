//! Faithfulness metrics: LDS, Top-K drop, R² and per-progress fidelity.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::oracle::{ablation_effect, region_effects, AblationOracle, GeneratedExample, VisionMask};
use crate::stats::{self, Summary};
use crate::{Error, Result};

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    Error::check_dim("spearman operands", x.len(), y.len())?;
    stats::pearson(&stats::average_ranks(x), &stats::average_ranks(y))
}

/// Rank agreement between predicted and true per-region effects of one span.
pub fn lds(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() < 2 {
        return Err(Error::InsufficientData(alloc::format!(
            "LDS needs at least 2 regions, got {}",
            predicted.len()
        )));
    }
    spearman(predicted, actual)
}

/// Indices of the `k` highest scores; ties go to the lower index.
pub fn top_k_regions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// True span effect of ablating the top-`k` scored regions together, in one
/// forward pass. With `k` at least the region count, every region is ablated.
pub fn top_k_drop<O: AblationOracle + ?Sized>(
    scores: &[f64],
    oracle: &O,
    example: &GeneratedExample,
    span: usize,
    k: usize,
) -> Result<f64> {
    Error::check_dim("scores", example.partition.num_regions(), scores.len())?;
    if k == 0 {
        return Err(Error::validation("top_k", "must be at least 1"));
    }
    let mask = VisionMask::from_regions(&example.partition, &top_k_regions(scores, k));
    let span = example
        .spans
        .get(span)
        .ok_or_else(|| Error::validation("span", alloc::format!("no span {span}")))?;
    Ok(ablation_effect(oracle, &example.input, &example.baseline, span, &mask)?.span_effect)
}

/// Coefficient of determination of the least-squares line of `actual` on
/// `predicted`. Equals the squared Pearson correlation.
pub fn r_squared(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    Error::check_dim("r_squared operands", predicted.len(), actual.len())?;
    if predicted.len() < 2 {
        return Err(Error::InsufficientData("R² needs at least 2 points".into()));
    }
    let my = stats::mean(actual);
    let ss_tot: f64 = actual.iter().map(|y| (y - my) * (y - my)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::DegenerateVariance { what: "actual" });
    }
    let mx = stats::mean(predicted);
    let sxx: f64 = predicted.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 {
        predicted.iter().zip(actual).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx
    } else {
        0.0
    };
    let ss_res: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(x, y)| {
            let r = y - (my + slope * (x - mx));
            r * r
        })
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityPoint {
    /// Normalized position in the reasoning chain, in `[0, 1]`.
    pub progress: f64,
    pub predicted: f64,
    pub actual: f64,
}

/// R² per progress bin. A bin with fewer than two points or no target
/// variance is `None`.
pub fn fidelity_curve(points: &[FidelityPoint], bins: usize) -> Result<Vec<Option<f64>>> {
    if bins == 0 {
        return Err(Error::validation("bins", "must be at least 1"));
    }
    let mut pred = vec![Vec::new(); bins];
    let mut act = vec![Vec::new(); bins];
    for p in points {
        if !(0.0..=1.0).contains(&p.progress) {
            return Err(Error::validation("progress", alloc::format!("{} outside [0, 1]", p.progress)));
        }
        let b = ((p.progress * bins as f64) as usize).min(bins - 1);
        pred[b].push(p.predicted);
        act[b].push(p.actual);
    }
    Ok(pred.iter().zip(&act).map(|(x, y)| r_squared(x, y).ok()).collect())
}

/// Scores of one method on one span.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpanEval {
    pub example: usize,
    pub span: usize,
    pub lds: Option<f64>,
    pub top_k_drop: f64,
    pub r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub method: String,
    pub top_k: usize,
    pub spans: Vec<SpanEval>,
    /// LDS over all (example, span) pairs.
    pub lds_pooled: Option<Summary>,
    /// LDS averaged within each example first.
    pub lds_by_example: Option<Summary>,
    pub top_k_drop: Option<Summary>,
    pub r_squared: Option<Summary>,
    /// Spans whose LDS was undefined (constant scores or effects).
    pub lds_undefined: usize,
}

impl EvalReport {
    pub fn mean_lds(&self) -> Option<f64> {
        self.lds_pooled.map(|s| s.mean)
    }
}

/// True single-region effects, `[example][span][region]`, from `K` passes
/// per example.
pub fn ground_truth<O: AblationOracle + ?Sized>(oracle: &O, examples: &[GeneratedExample]) -> Result<Vec<Vec<Vec<f64>>>> {
    examples
        .iter()
        .map(|ex| region_effects(oracle, &ex.input, &ex.baseline, &ex.partition, &ex.spans))
        .collect()
}

/// Evaluates `scores[example][span][region]` against precomputed
/// `truth` with the same layout. Top-K drop costs one pass per span.
pub fn evaluate<O: AblationOracle + ?Sized>(
    method: &str,
    oracle: &O,
    examples: &[GeneratedExample],
    truth: &[Vec<Vec<f64>>],
    scores: &[Vec<Vec<f64>>],
    top_k: usize,
) -> Result<EvalReport> {
    Error::check_dim("truth examples", examples.len(), truth.len())?;
    Error::check_dim("scored examples", examples.len(), scores.len())?;
    let mut spans = Vec::new();
    let mut by_example = Vec::new();
    let mut undefined = 0;
    for (e, ex) in examples.iter().enumerate() {
        Error::check_dim("truth spans", ex.spans.len(), truth[e].len())?;
        Error::check_dim("scored spans", ex.spans.len(), scores[e].len())?;
        let mut ex_lds = Vec::new();
        for s in 0..ex.spans.len() {
            let pred = &scores[e][s];
            let actual = &truth[e][s];
            let l = match lds(pred, actual) {
                Ok(v) => Some(v),
                Err(Error::DegenerateVariance { .. }) | Err(Error::InsufficientData(_)) => {
                    undefined += 1;
                    None
                }
                Err(err) => return Err(err),
            };
            ex_lds.extend(l);
            spans.push(SpanEval {
                example: e,
                span: s,
                lds: l,
                top_k_drop: top_k_drop(pred, oracle, ex, s, top_k)?,
                r_squared: r_squared(pred, actual).ok(),
            });
        }
        if !ex_lds.is_empty() {
            by_example.push(stats::mean(&ex_lds));
        }
    }
    let pooled: Vec<f64> = spans.iter().filter_map(|s| s.lds).collect();
    let drops: Vec<f64> = spans.iter().map(|s| s.top_k_drop).collect();
    let r2: Vec<f64> = spans.iter().filter_map(|s| s.r_squared).collect();
    Ok(EvalReport {
        method: method.into(),
        top_k,
        lds_pooled: Summary::of(&pooled),
        lds_by_example: Summary::of(&by_example),
        top_k_drop: Summary::of(&drops),
        r_squared: Summary::of(&r2),
        lds_undefined: undefined,
        spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(spearman(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn lds_needs_two_regions() {
        assert!(matches!(lds(&[1.0], &[1.0]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn top_k_tie_rule() {
        assert_eq!(top_k_regions(&[0.0; 7], 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(top_k_regions(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_regions(&[1.0, 2.0], 5), vec![1, 0]);
    }

    #[test]
    fn r_squared_affine_is_one() {
        let y = [1.0, 4.0, 2.0, 8.0];
        let x: Vec<f64> = y.iter().map(|v| -3.0 * v + 1.0).collect();
        assert!((r_squared(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r_squared(&[1.0; 4], &y).unwrap(), 0.0);
        assert!(r_squared(&y, &[2.0; 4]).is_err());
    }

    #[test]
    fn fidelity_single_bin_is_global() {
        let pts: Vec<FidelityPoint> = (0..10)
            .map(|i| FidelityPoint {
                progress: i as f64 / 9.0,
                predicted: i as f64,
                actual: (i * i) as f64,
            })
            .collect();
        let curve = fidelity_curve(&pts, 1).unwrap();
        let x: Vec<f64> = pts.iter().map(|p| p.predicted).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.actual).collect();
        assert_eq!(curve, vec![Some(r_squared(&x, &y).unwrap())]);
    }

    #[test]
    fn fidelity_empty_bin_is_missing() {
        let pts = [
            FidelityPoint { progress: 0.0, predicted: 0.0, actual: 0.0 },
            FidelityPoint { progress: 0.1, predicted: 1.0, actual: 2.0 },
        ];
        assert_eq!(fidelity_curve(&pts, 2).unwrap(), vec![Some(1.0), None]);
    }
}
