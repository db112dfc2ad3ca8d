//! Spreads region scores over the patches of each region using a saliency
//! prior, so that patch scores inside a region sum to the region's score.

use alloc::vec;
use alloc::vec::Vec;

use crate::unitization::RegionPartition;
use crate::{Error, Result};

/// `s_i = score[R(i)] * sal_i / sum_{j in R(i)} sal_j`.
///
/// A region whose saliency sums to zero is split uniformly and a warning is
/// logged. The last patch of each region absorbs the rounding residue, so
/// per-region sums match the region score to within one ulp of the score.
pub fn refine_to_patches(region_scores: &[f64], partition: &RegionPartition, saliency: &[f64]) -> Result<Vec<f64>> {
    Error::check_dim("region scores", partition.num_regions(), region_scores.len())?;
    Error::check_dim("saliency", partition.num_tokens(), saliency.len())?;
    if let Some(i) = saliency.iter().position(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::validation("saliency", alloc::format!("entry {i} is not a finite nonnegative value")));
    }
    let mut out = vec![0.0; saliency.len()];
    for (k, members) in partition.regions().iter().enumerate() {
        let total: f64 = members.iter().map(|&i| saliency[i]).sum();
        let score = region_scores[k];
        if total > 0.0 {
            for &i in members {
                out[i] = score * (saliency[i] / total);
            }
        } else {
            log::warn!("region {k} has zero total saliency; splitting its score uniformly");
            let share = score / members.len() as f64;
            for &i in members {
                out[i] = share;
            }
        }
        // fold the rounding residue into the region's last patch
        let placed: f64 = members.iter().map(|&i| out[i]).sum();
        if let Some(&last) = members.last() {
            out[last] += score - placed;
        }
    }
    Ok(out)
}
