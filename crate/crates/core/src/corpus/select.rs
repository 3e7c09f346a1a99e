//! Seeded subset selection.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): state advances by
//! `0x9E3779B97F4A7C15`, output is mixed with multipliers
//! `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB` and shifts 30, 27, 31.
//! Bounded draws use rejection sampling below the largest multiple of the
//! bound, then `x % bound`. Each category draws by partial Fisher-Yates over
//! its cases sorted by `case_id`. Categories are visited in ascending CWE
//! order, vulnerable before clean, all from one stream. Any implementation
//! following these steps selects the same files for the same seed.

use std::collections::BTreeMap;

use super::{CaseRecord, CorpusError, CorpusManifest};
use crate::cwe::CweId;

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `0..bound`. `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// `k` distinct picks, in draw order.
    pub fn sample<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut pool: Vec<T> = items.to_vec();
        let n = pool.len();
        for i in 0..k.min(n) {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k.min(n));
        pool
    }
}

/// Picks `per_cwe` vulnerable and `per_cwe` clean cases from every CWE.
pub fn select_subset(
    manifest: &CorpusManifest,
    per_cwe: usize,
    seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    let mut groups: BTreeMap<CweId, (Vec<&CaseRecord>, Vec<&CaseRecord>)> = BTreeMap::new();
    for case in &manifest.cases {
        let entry = groups.entry(case.expected_cwe).or_default();
        if case.vulnerable {
            entry.0.push(case);
        } else {
            entry.1.push(case);
        }
    }

    let mut rng = SplitMix64::new(seed);
    let mut chosen: Vec<CaseRecord> = Vec::new();
    for (cwe, (mut vulnerable, mut clean)) in groups {
        for (label, pool) in [("vulnerable", &mut vulnerable), ("clean", &mut clean)] {
            if pool.len() < per_cwe {
                return Err(CorpusError::InsufficientCases {
                    cwe,
                    label,
                    available: pool.len(),
                    requested: per_cwe,
                });
            }
            pool.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            chosen.extend(rng.sample(pool, per_cwe).into_iter().cloned());
        }
    }
    chosen.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(CorpusManifest::new(chosen, Some(seed), Some(per_cwe)))
}
