//! Ranking metrics: average precision and the pairwise (Mann-Whitney) area
//! under the ROC curve.

use crate::error::{Error, Result};

/// Average precision: mean over positives of precision at that positive's
/// rank, scores descending, ties broken by stable input order. Precision
/// terms are accumulated in rank order.
pub fn compute_ap(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Eval("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut seen_pos = 0usize;
    let mut total = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            seen_pos += 1;
            total += seen_pos as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// AUC in the Mann-Whitney form: the fraction of (positive, negative)
/// pairs ranked correctly, ties counted one half. Computed exactly with
/// integer pair counts.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk equal-score groups from the bottom; every positive in a group
    // beats all strictly lower negatives and half-ties with its group's.
    let mut wins_doubled = 0u64;
    let mut negs_below = 0u64;
    let mut at = 0;
    while at < order.len() {
        let mut end = at + 1;
        while end < order.len() && scores[order[end]] == scores[order[at]] {
            end += 1;
        }
        let group = &order[at..end];
        let group_pos = group.iter().filter(|&&i| labels[i]).count() as u64;
        let group_neg = group.len() as u64 - group_pos;
        wins_doubled += group_pos * (2 * negs_below + group_neg);
        negs_below += group_neg;
        at = end;
    }
    Ok(wins_doubled as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Counting-based AP recount: each positive's rank is one plus the
    /// number of entries that outrank it (greater score, or equal score
    /// with an earlier input index).
    fn ap_recount(scores: &[f64], labels: &[bool]) -> f64 {
        let mut ranked: Vec<(usize, usize)> = Vec::new(); // (rank, pos_at_or_above)
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            let outranks = |j: usize| {
                scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
            };
            let rank = 1 + (0..scores.len()).filter(|&j| j != i && outranks(j)).count();
            let pos_at_or_above = (0..scores.len())
                .filter(|&j| labels[j] && (j == i || outranks(j)))
                .count();
            ranked.push((rank, pos_at_or_above));
        }
        ranked.sort();
        let n_pos = ranked.len() as f64;
        ranked.iter().map(|&(r, p)| p as f64 / r as f64).sum::<f64>() / n_pos
    }

    /// Brute-force pairwise AUC with half-credit ties.
    fn auc_recount(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins_doubled = 0u64;
        let mut pairs = 0u64;
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            for j in 0..scores.len() {
                if labels[j] {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    wins_doubled += 2;
                } else if scores[i] == scores[j] {
                    wins_doubled += 1;
                }
            }
        }
        wins_doubled as f64 / (2 * pairs) as f64
    }

    #[test]
    fn ap_hand_cases() {
        // Ranked labels [1, 0, 1] -> (1/1 + 2/3) / 2.
        let ap = compute_ap(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        // All positives first.
        let ap = compute_ap(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert_eq!(ap, 1.0);
        // Single pair, positive on top.
        let ap = compute_ap(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn auc_hand_cases() {
        let auc = compute_auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 0.75);
        let auc = compute_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(auc, 1.0);
        // All ties.
        let auc = compute_auc(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(compute_ap(&[0.5], &[false]).is_err());
        assert!(compute_auc(&[0.5, 0.4], &[true, true]).is_err());
    }

    #[test]
    fn metrics_match_brute_force_recounts_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        for _ in 0..300 {
            let n = rng.random_range(2..20usize);
            // Coarse score grid to force plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[rng.random_range(0..n)] = true;
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            let has_pos = labels.iter().any(|&l| l);
            let has_neg = labels.iter().any(|&l| !l);
            if has_pos {
                let ap = compute_ap(&scores, &labels).unwrap();
                assert_eq!(ap, ap_recount(&scores, &labels));
            }
            if has_pos && has_neg {
                let auc = compute_auc(&scores, &labels).unwrap();
                assert_eq!(auc, auc_recount(&scores, &labels));
            }
        }
    }
}
