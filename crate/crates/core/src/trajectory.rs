//! Geometry of reasoning trajectories: the sequence of per-span region-effect
//! vectors, projected to a few principal components.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::linalg::{symmetric_eigen, SymMatrix};
use crate::stats;
use crate::{Error, Result};

/// Number of regions kept per trajectory.
pub const CANONICAL_REGIONS: usize = 32;

/// Off-diagonal tolerance of the covariance eigensolver.
pub const PCA_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Outcome {
    Success,
    ReasoningFailure,
    Hallucination,
    Unknown,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::ReasoningFailure => "reasoning_failure",
            Outcome::Hallucination => "hallucination",
            Outcome::Unknown => "unknown",
        }
    }

    /// Failure for AUC purposes; `None` when the outcome is unknown.
    pub fn is_failure(self) -> Option<bool> {
        match self {
            Outcome::Success => Some(false),
            Outcome::ReasoningFailure | Outcome::Hallucination => Some(true),
            Outcome::Unknown => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "success" => Outcome::Success,
            "reasoning_failure" => Outcome::ReasoningFailure,
            "hallucination" => Outcome::Hallucination,
            "unknown" => Outcome::Unknown,
            other => return Err(Error::validation("outcome", alloc::format!("unknown label {other:?}"))),
        })
    }
}

/// Effect sequence restricted to a fixed set of `R` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTrajectory {
    /// Source region of each coordinate; `None` marks zero padding.
    pub regions: Vec<Option<usize>>,
    pub steps: Vec<Vec<f64>>,
}

/// Keeps the `r` regions with the largest mean absolute effect (ties to the
/// lower index), ordered by that mean, and zero-pads when fewer exist.
pub fn canonicalize(effects: &[Vec<f64>], r: usize) -> Result<CanonicalTrajectory> {
    let k = effects
        .first()
        .ok_or_else(|| Error::InsufficientData("empty effect sequence".into()))?
        .len();
    for step in effects {
        Error::check_dim("effect vector", k, step.len())?;
    }
    let mean_abs: Vec<f64> = (0..k)
        .map(|j| effects.iter().map(|e| libm::fabs(e[j])).sum::<f64>() / effects.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    order.truncate(r);
    let mut regions: Vec<Option<usize>> = order.iter().copied().map(Some).collect();
    regions.resize(r, None);
    let steps = effects
        .iter()
        .map(|e| regions.iter().map(|c| c.map_or(0.0, |j| e[j])).collect())
        .collect();
    Ok(CanonicalTrajectory { regions, steps })
}

/// Principal axes fit to a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit axes, or all-zero rows where the covariance has no more rank.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalue over total variance for each kept axis.
    pub explained: Vec<f64>,
}

impl PcaModel {
    pub fn fit(points: &[Vec<f64>], dims: usize) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InsufficientData(alloc::format!(
                "PCA needs at least 2 steps, got {}",
                points.len()
            )));
        }
        let d = points[0].len();
        for p in points {
            Error::check_dim("trajectory step", d, p.len())?;
        }
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let mut cov = SymMatrix::zeros(d);
        for a in 0..d {
            for b in a..d {
                let c = points.iter().map(|p| (p[a] - mean[a]) * (p[b] - mean[b])).sum::<f64>() / n;
                cov.set(a, b, c);
                cov.set(b, a, c);
            }
        }
        let eig = symmetric_eigen(&cov, PCA_TOLERANCE);
        let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
        let mut components = Vec::with_capacity(dims);
        let mut explained = Vec::with_capacity(dims);
        for k in 0..dims {
            let value = eig.values.get(k).copied().unwrap_or(0.0);
            if total > 0.0 && value > 1e-12 * total {
                components.push(eig.vectors[k].clone());
                explained.push(value / total);
            } else {
                components.push(vec![0.0; d]);
                explained.push(0.0);
            }
        }
        Ok(PcaModel {
            mean,
            components,
            explained,
        })
    }

    pub fn project(&self, points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|p| {
                let centered: Vec<f64> = p.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
                self.components.iter().map(|c| stats::dot(c, &centered)).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
}

/// Fits PCA to one trajectory's own steps and projects them.
pub fn pca_project(steps: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let model = PcaModel::fit(steps, dims)?;
    Ok(Projection {
        points: model.project(steps),
        explained: model.explained,
    })
}

/// Fits one PCA over every step of every trajectory and projects each.
pub fn pca_project_pooled(trajectories: &[Vec<Vec<f64>>], dims: usize) -> Result<(Vec<Vec<Vec<f64>>>, Vec<f64>)> {
    let all: Vec<Vec<f64>> = trajectories.iter().flatten().cloned().collect();
    let model = PcaModel::fit(&all, dims)?;
    Ok((trajectories.iter().map(|t| model.project(t)).collect(), model.explained))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Total Euclidean length of the polyline.
pub fn path_length(points: &[Vec<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientData("path length needs at least 2 points".into()));
    }
    Ok(points.windows(2).map(|w| distance(&w[0], &w[1])).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Tortuosity {
    Open(f64),
    /// Start and end coincide, so the ratio is undefined.
    ClosedPath { path_length: f64 },
}

impl Tortuosity {
    pub fn value(self) -> Option<f64> {
        match self {
            Tortuosity::Open(v) => Some(v),
            Tortuosity::ClosedPath { .. } => None,
        }
    }
}

/// Path length over net displacement.
pub fn tortuosity(points: &[Vec<f64>]) -> Result<Tortuosity> {
    let length = path_length(points)?;
    let net = distance(&points[0], &points[points.len() - 1]);
    Ok(if net > 0.0 {
        Tortuosity::Open(length / net)
    } else {
        Tortuosity::ClosedPath { path_length: length }
    })
}

/// Herfindahl index of positive effect shares, or of absolute shares when no
/// effect is positive.
pub fn concentration(effects: &[f64]) -> Result<f64> {
    if let Some(i) = effects.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFinite { what: "effect", index: i });
    }
    let positive: f64 = effects.iter().map(|e| e.max(0.0)).sum();
    let shares: Vec<f64> = if positive > 0.0 {
        effects.iter().map(|e| e.max(0.0) / positive).collect()
    } else {
        let total: f64 = effects.iter().map(|e| libm::fabs(*e)).sum();
        if !(total > 0.0) {
            return Err(Error::InsufficientData("concentration of an all-zero effect vector".into()));
        }
        effects.iter().map(|e| libm::fabs(*e) / total).collect()
    };
    Ok(shares.iter().map(|p| p * p).sum())
}

/// Mann-Whitney AUC of `values` for separating failures from successes
/// (higher value means failure), ties counted one half.
pub fn failure_auc(values: &[f64], failed: &[bool]) -> Result<f64> {
    Error::check_dim("labels", values.len(), failed.len())?;
    let n_fail = failed.iter().filter(|f| **f).count();
    let n_ok = failed.len() - n_fail;
    if n_fail == 0 || n_ok == 0 {
        return Err(Error::InsufficientData("AUC needs both classes".into()));
    }
    let ranks = stats::average_ranks(values);
    let rank_sum: f64 = ranks.iter().zip(failed).filter(|(_, f)| **f).map(|(r, _)| r).sum();
    let u = rank_sum - (n_fail * (n_fail + 1)) as f64 / 2.0;
    Ok(u / (n_fail * n_ok) as f64)
}

/// AUC after truncating every trajectory to the first `fraction` of its
/// steps (at least two). `metric` maps a truncated effect sequence to a value
/// or `None` when undefined; trajectories with unknown outcome or undefined
/// metric are left out. A fraction where one class is missing gives `None`.
pub fn auc_vs_progress<F>(
    trajectories: &[(Vec<Vec<f64>>, Outcome)],
    fractions: &[f64],
    metric: F,
) -> Vec<Option<f64>>
where
    F: Fn(&[Vec<f64>]) -> Option<f64>,
{
    fractions
        .iter()
        .map(|&f| {
            let mut values = Vec::new();
            let mut labels = Vec::new();
            for (effects, outcome) in trajectories {
                let Some(failed) = outcome.is_failure() else { continue };
                let n = effects.len();
                let keep = (libm::ceil(f.clamp(0.0, 1.0) * n as f64) as usize).clamp(2.min(n), n);
                if let Some(v) = metric(&effects[..keep]) {
                    values.push(v);
                    labels.push(failed);
                }
            }
            failure_auc(&values, &labels).ok()
        })
        .collect()
}

/// Tortuosity of the per-trajectory 3-D PCA projection of canonical effects.
pub fn tortuosity_metric(effects: &[Vec<f64>]) -> Option<f64> {
    let canon = canonicalize(effects, CANONICAL_REGIONS).ok()?;
    let proj = pca_project(&canon.steps, 3).ok()?;
    tortuosity(&proj.points).ok()?.value()
}

/// Per-trajectory scalar summaries.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectoryStats {
    pub id: String,
    pub outcome: Outcome,
    pub steps: usize,
    pub path_length: f64,
    pub tortuosity: Tortuosity,
    pub mean_concentration: Option<f64>,
    pub explained: Vec<f64>,
}

impl TrajectoryStats {
    /// Canonicalizes to `r` coordinates, projects to 3-D with a PCA fit to this
    /// trajectory alone, and measures the projected path.
    pub fn compute(id: String, outcome: Outcome, effects: &[Vec<f64>], r: usize) -> Result<(Self, Projection)> {
        let canon = canonicalize(effects, r)?;
        let proj = pca_project(&canon.steps, 3)?;
        let conc: Vec<f64> = effects.iter().filter_map(|e| concentration(e).ok()).collect();
        let stats = TrajectoryStats {
            id,
            outcome,
            steps: effects.len(),
            path_length: path_length(&proj.points)?,
            tortuosity: tortuosity(&proj.points)?,
            mean_concentration: (!conc.is_empty()).then(|| stats::mean(&conc)),
            explained: proj.explained.clone(),
        };
        Ok((stats, proj))
    }
}
