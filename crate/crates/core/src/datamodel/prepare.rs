use super::InteractionLog;
use crate::numerics::Rng;
use crate::{Error, Result};

/// Minimum sequence length for the general configuration.
pub const DEFAULT_MIN_LEN: usize = 5;
/// Minimum sequence length for the cold-start configuration.
pub const COLD_START_MIN_LEN: usize = 3;

/// Drop sequences shorter than `min_len`, then keep the most recent
/// `keep_last` interactions of each survivor (`None` keeps everything).
pub fn prepare_dataset(
    logs: &[InteractionLog],
    min_len: usize,
    keep_last: Option<usize>,
) -> Result<Vec<InteractionLog>> {
    if min_len == 0 {
        return Err(Error::config("min_len", "must be at least 1"));
    }
    if let Some(k) = keep_last {
        // Truncating below min_len would make a second pass drop the user.
        if k < min_len {
            return Err(Error::config(
                "keep_last",
                format!("{k} is smaller than min_len {min_len}"),
            ));
        }
    }
    Ok(logs
        .iter()
        .filter(|l| l.sequence.len() >= min_len)
        .map(|l| {
            let start = keep_last.map_or(0, |k| l.sequence.len().saturating_sub(k));
            InteractionLog {
                sequence: l.sequence[start..].to_vec(),
                ..l.clone()
            }
        })
        .collect())
}

/// Interaction-count strata `[b0, b1), [b1, b2), …, [b_{n-2}, b_{n-1}]`.
/// The final stratum includes its upper bound; use `usize::MAX` for an open
/// top stratum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrataBounds(Vec<usize>);

impl StrataBounds {
    pub fn new(bounds: Vec<usize>) -> Result<Self> {
        if bounds.len() < 2 {
            return Err(Error::config("strata", "need at least two bounds"));
        }
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("strata", "bounds must be strictly increasing"));
        }
        Ok(Self(bounds))
    }

    pub fn bounds(&self) -> &[usize] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.len() - 1
    }

    /// Stratum holding a user with `n` interactions.
    pub fn stratum_of(&self, n: usize) -> Option<usize> {
        let b = &self.0;
        let last = b.len() - 2;
        (0..=last).find(|&i| n >= b[i] && (n < b[i + 1] || (i == last && n == b[i + 1])))
    }
}

impl Default for StrataBounds {
    fn default() -> Self {
        Self(vec![5, 10, 15, usize::MAX])
    }
}

/// Draw up to `per_stratum` users uniformly from each interaction-count
/// stratum. Users outside every stratum are not eligible; empty strata are
/// skipped. Output keeps the input order.
pub fn stratified_sample(
    logs: &[InteractionLog],
    strata: &StrataBounds,
    per_stratum: usize,
    rng: &mut Rng,
) -> Vec<InteractionLog> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); strata.count()];
    for (i, l) in logs.iter().enumerate() {
        if let Some(s) = strata.stratum_of(l.sequence.len()) {
            members[s].push(i);
        }
    }
    let mut chosen = Vec::new();
    for m in &members {
        let take = per_stratum.min(m.len());
        chosen.extend(rng.sample_indices(m.len(), take).into_iter().map(|k| m[k]));
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| logs[i].clone()).collect()
}
