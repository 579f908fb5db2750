use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::encoder::HistoryItem;
use crate::error::{Error, Result};
use crate::feedback::{Dataset, NUM_TASKS, TASK_NAMES};
use crate::model::{feature_ids, flagged_sequence, Model, ScoreRequest};
use crate::serving::{rank_candidates, FusionConfig, RankRequest};

/// Area under the ROC curve by the rank-sum formula with averaged ranks
/// for ties. `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum, so tied groups stay integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    // U = R - P(P+1)/2 counts won pairs plus half the ties
    let u2 = rank_sum2 - p * (p + 1);
    Some(u2 as f64 / (2 * p * n) as f64)
}

/// Shannon entropy (nats) of the empirical distribution of `window`.
/// `None` for an empty window.
pub fn diversity_entropy(window: &[u32]) -> Option<f64> {
    if window.is_empty() {
        return None;
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &x in window {
        *counts.entry(x).or_default() += 1;
    }
    let n = window.len() as f64;
    let h = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>();
    Some(h.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    /// Per task, in (EVV, FVV, GVV) order; `None` when undefined.
    pub auc: [Option<f64>; NUM_TASKS],
    pub list_len: usize,
    /// Share of top-`ℓ` held-out items the user glanced at.
    pub skip_rate: Option<f64>,
    /// Share of the user's focused views that made the top `ℓ`.
    pub recall: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_owned(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<16} {:>10}", "examples", self.examples);
        for (k, name) in TASK_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{:<16} {:>10}", format!("auc_{name}"), fmt(self.auc[k]));
        }
        let _ = writeln!(s, "{:<16} {:>10}", format!("skip_rate@{}", self.list_len), fmt(self.skip_rate));
        let _ = writeln!(s, "{:<16} {:>10}", format!("recall@{}", self.list_len), fmt(self.recall));
        s
    }
}

/// Scores every interaction at or after `split_ts_ms` with the history
/// that preceded it, then ranks each user's held-out items from the
/// history at the split.
pub fn evaluate(model: &Model, ds: &Dataset, split_ts_ms: u64, fusion: &FusionConfig) -> Result<EvalReport> {
    let side = ds.side();
    let mut scores: [Vec<f64>; NUM_TASKS] = Default::default();
    let mut labels: [Vec<bool>; NUM_TASKS] = Default::default();
    let (mut shown, mut skipped, mut focused, mut focused_hit) = (0usize, 0usize, 0usize, 0usize);
    let seq_len = model.config.seq_len;
    for user in 0..ds.num_users() as u32 {
        let recs = ds.user_history(user);
        let start = recs.partition_point(|r| r.timestamp_ms < split_ts_ms);
        if start == recs.len() {
            continue;
        }
        let seq: Vec<HistoryItem> = flagged_sequence(ds, recs);
        let histories: Vec<&[HistoryItem]> = (start..recs.len()).map(|j| &seq[j.saturating_sub(seq_len)..j]).collect();
        let rows: Vec<ScoreRequest> = recs[start..]
            .iter()
            .enumerate()
            .map(|(h, r)| ScoreRequest {
                history: h,
                ids: feature_ids(side, user, r.item_id, r.platform_id),
            })
            .collect();
        let ys = model.predict(&histories, &rows)?;
        for (y, j) in ys.iter().zip(start..) {
            let flags = seq[j].flags;
            for k in 0..NUM_TASKS {
                scores[k].push(y[k]);
                labels[k].push(flags.get(k));
            }
        }

        // first held-out view of each item decides its label
        let mut first: BTreeMap<u32, usize> = BTreeMap::new();
        for j in start..recs.len() {
            first.entry(recs[j].item_id).or_insert(j);
        }
        let candidates: Vec<u32> = first.keys().copied().collect();
        let req = RankRequest {
            user,
            platform: recs[start].platform_id,
            history: &seq[start.saturating_sub(seq_len)..start],
            side,
        };
        let list = rank_candidates(model, req, &candidates, fusion)?;
        let top: Vec<u32> = list.items();
        shown += top.len();
        skipped += top.iter().filter(|i| seq[first[i]].flags.gvv).count();
        let fvv: Vec<u32> = first.iter().filter(|(_, &j)| seq[j].flags.fvv).map(|(&i, _)| i).collect();
        focused += fvv.len();
        focused_hit += fvv.iter().filter(|i| top.contains(i)).count();
    }
    let examples = scores[0].len();
    if examples == 0 {
        return Err(Error::Usage(format!("no interactions at or after {split_ts_ms}")));
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(EvalReport {
        examples,
        auc: std::array::from_fn(|k| auc(&scores[k], &labels[k])),
        list_len: fusion.list_len,
        skip_rate: ratio(skipped, shown),
        recall: ratio(focused_hit, focused),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) pair count: wins plus half ties over all positive-negative pairs.
    fn pair_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let (mut num2, mut pairs) = (0u64, 0u64);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1;
                    num2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        (pairs > 0).then(|| num2 as f64 / (2 * pairs) as f64)
    }

    #[test]
    fn perfect_and_reversed() {
        let s = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(auc(&s, &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&s, &[true, true, false, false]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auc(&s, &[true; 4]), None);
        assert_eq!(auc(&s, &[false; 4]), None);
    }

    #[test]
    fn matches_pair_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // coarse scores force ties
            let s: Vec<f64> = (0..10).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
            let l: Vec<bool> = (0..10).map(|_| rng.random_bool(0.4)).collect();
            assert_eq!(auc(&s, &l), pair_oracle(&s, &l));
        }
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(diversity_entropy(&[7; 100]), Some(0.0));
        let distinct: Vec<u32> = (0..100).collect();
        assert!((diversity_entropy(&distinct).unwrap() - 100f64.ln()).abs() < 1e-12);
        let half: Vec<u32> = (0..100).map(|i| if i < 50 { 1 } else { 2 }).collect();
        assert!((diversity_entropy(&half).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(diversity_entropy(&[]), None);
    }

    proptest! {
        #[test]
        fn entropy_bounded(w in proptest::collection::vec(0u32..300, 100)) {
            let h = diversity_entropy(&w).unwrap();
            prop_assert!(h >= 0.0 && h <= 100f64.ln() + 1e-12);
        }

        #[test]
        fn auc_in_unit_interval(s in proptest::collection::vec(-1.0f64..1.0, 2..30), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l: Vec<bool> = s.iter().map(|_| rng.random_bool(0.5)).collect();
            let a = auc(&s, &l);
            prop_assert_eq!(a, pair_oracle(&s, &l));
            if let Some(a) = a {
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
