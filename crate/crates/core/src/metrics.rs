//! Ranking metrics: pairwise AUC and query-grouped AUC.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Probability that a random positive outranks a random negative, with
/// ties counted as 0.5.
///
/// Computed from exact integer win/tie counts, so the result equals the
/// O(n^2) pairwise definition bit for bit. Returns `None` when either
/// class is absent (the caller decides how to treat undefined groups).
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let pos_total = labels.iter().filter(|&&l| l != 0).count() as u64;
    let neg_total = labels.len() as u64 - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut wins: u64 = 0; // pairs with s_pos > s_neg
    let mut ties: u64 = 0; // pairs with s_pos == s_neg
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut run_pos: u64 = 0;
        let mut run_neg: u64 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                run_pos += 1;
            } else {
                run_neg += 1;
            }
            j += 1;
        }
        wins += run_pos * neg_below;
        ties += run_pos * run_neg;
        neg_below += run_neg;
        i = j;
    }
    Some((wins as f64 + 0.5 * ties as f64) / (pos_total * neg_total) as f64)
}

/// Result of a grouped-AUC evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Qauc {
    /// Mean of per-group AUC over groups with both classes present.
    pub value: f64,
    pub valid_groups: usize,
    /// Single-class groups that were skipped.
    pub skipped_groups: usize,
}

/// Mean per-group AUC over (user, query) groups.
///
/// Groups without both a positive and a negative are skipped and counted;
/// if every group is single-class this is an error.
pub fn qauc(scores: &[f64], labels: &[u8], group_keys: &[(u64, u64)]) -> Result<Qauc> {
    assert_eq!(scores.len(), labels.len());
    assert_eq!(scores.len(), group_keys.len());
    let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, &key) in group_keys.iter().enumerate() {
        groups.entry(key).or_default().push(i);
    }
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    for idx in groups.values() {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        match auc(&s, &l) {
            Some(a) => {
                sum += a;
                valid += 1;
            }
            None => skipped += 1,
        }
    }
    if valid == 0 {
        return Err(Error::NoValidGroups);
    }
    Ok(Qauc {
        value: sum / valid as f64,
        valid_groups: valid,
        skipped_groups: skipped,
    })
}
