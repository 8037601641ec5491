//! Ranking metrics for binary scores.

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("metric labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("metric needs both classes present".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by score ascending; returns runs of equal scores.
fn tie_runs(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match runs.last_mut() {
            Some(r) if scores[r[0]] == scores[i] => r.push(i),
            _ => runs.push(vec![i]),
        }
    }
    runs
}

/// Area under the ROC curve from the Mann-Whitney rank sum, ties averaged.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut rank = 1.0;
    let mut pos_rank_sum = 0.0;
    for run in tie_runs(scores) {
        let avg = rank + (run.len() as f64 - 1.0) / 2.0;
        pos_rank_sum += avg * run.iter().filter(|&&i| labels[i] == 1).count() as f64;
        rank += run.len() as f64;
    }
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Kolmogorov-Smirnov statistic: max |TPR - FPR| over score thresholds.
pub fn ks(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    // walk thresholds from high to low
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best: f64 = 0.0;
    for run in tie_runs(scores).into_iter().rev() {
        for i in run {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        best = best.max((tp as f64 / pos as f64 - fp as f64 / neg as f64).abs());
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn brute_ks(s: &[f64], l: &[u8]) -> f64 {
        let p = l.iter().filter(|&&x| x == 1).count() as f64;
        let n = l.len() as f64 - p;
        let mut best: f64 = 0.0;
        for &t in s {
            let tpr = s.iter().zip(l).filter(|(v, y)| **v >= t && **y == 1).count() as f64 / p;
            let fpr = s.iter().zip(l).filter(|(v, y)| **v >= t && **y == 0).count() as f64 / n;
            best = best.max((tpr - fpr).abs());
        }
        best
    }

    const S: [f64; 8] = [0.9, 0.8, 0.8, 0.6, 0.5, 0.5, 0.5, 0.1];
    const L: [u8; 8] = [1, 1, 0, 1, 0, 1, 0, 0];

    #[test]
    fn trivial_cases() {
        let l = [0, 0, 1, 1];
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.3, 0.2, 0.1], &l).unwrap(), 0.0);
        assert_eq!(ks(&[0.1, 0.2, 0.3, 0.4], &l).unwrap(), 1.0);
        assert_eq!(ks(&[0.5, 0.7, 0.5, 0.7], &l).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(ks(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn tie_fixture_matches_brute_force() {
        // 16 positive/negative pairs: 11 wins and 3 ties
        assert_eq!(brute_auc(&S, &L), 0.78125);
        assert_eq!(auc(&S, &L).unwrap(), 0.78125);
        assert_eq!(brute_ks(&S, &L), 0.5);
        assert_eq!(ks(&S, &L).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn agrees_with_oracles(v in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
            let mut l: Vec<u8> = v.iter().map(|x| x.1 as u8).collect();
            l[0] = 0;
            l[1] = 1;
            prop_assert!((auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() < 1e-12);
            prop_assert!((ks(&s, &l).unwrap() - brute_ks(&s, &l)).abs() < 1e-12);
            let k = ks(&s, &l).unwrap();
            prop_assert!((0.0..=1.0).contains(&k));
        }

        #[test]
        fn monotone_invariance(v in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|x| x.0).collect();
            let mut l: Vec<u8> = v.iter().map(|x| x.1 as u8).collect();
            l[0] = 0;
            l[1] = 1;
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-12);
            let mut distinct = s.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() == s.len() {
                let neg: Vec<f64> = s.iter().map(|x| -x).collect();
                prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
