//! Fusion scoring and top-`ℓ` list generation from a candidate pool.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoder::HistoryItem;
use crate::error::{Error, Result};
use crate::feedback::{SideInfo, GVV, NUM_TASKS};
use crate::model::{feature_ids, Model, ScoreRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Per-task weights; the skip task's must be `<= 0`.
    pub gamma: [f64; NUM_TASKS],
    pub list_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma: [1.0, 1.0, -1.0],
            list_len: 10,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("serving.gamma must be finite".into()));
        }
        if self.gamma[GVV] > 0.0 {
            return Err(Error::Config("serving.gamma for the skip task must be <= 0".into()));
        }
        if self.list_len == 0 {
            return Err(Error::Config("serving.list_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// `Σ_k γ_k y_k`.
pub fn fusion_score(y: &[f64; NUM_TASKS], gamma: &[f64; NUM_TASKS]) -> f64 {
    y.iter().zip(gamma).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub item: u32,
    pub y: [f64; NUM_TASKS],
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    /// Candidates dropped because the model does not know the item.
    pub unknown: usize,
    /// Repeated candidate ids removed before scoring.
    pub duplicates: usize,
}

impl RankedList {
    pub fn items(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.item).collect()
    }

    /// Tab-separated `rank item score y_evv y_fvv y_gvv` rows.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#rank\titem\tscore\tevv\tfvv\tgvv")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                i + 1,
                e.item,
                e.score,
                e.y[0],
                e.y[1],
                e.y[2]
            )?;
        }
        Ok(())
    }
}

/// Sorts by descending fused score, ties by ascending item id, and keeps
/// the first `list_len`.
pub fn order_by_fusion(scored: Vec<(u32, [f64; NUM_TASKS])>, gamma: &[f64; NUM_TASKS], list_len: usize) -> Vec<RankedEntry> {
    let mut entries: Vec<RankedEntry> = scored
        .into_iter()
        .map(|(item, y)| RankedEntry {
            item,
            y,
            score: fusion_score(&y, gamma),
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    entries.truncate(list_len);
    entries
}

/// Everything about the request except the candidates.
#[derive(Clone, Copy, Debug)]
pub struct RankRequest<'a> {
    pub user: u32,
    pub platform: u32,
    pub history: &'a [HistoryItem],
    pub side: &'a SideInfo,
}

/// Scores every distinct known candidate against one encoded history and
/// returns the top `list_len`.
pub fn rank_candidates(model: &Model, req: RankRequest<'_>, candidates: &[u32], fusion: &FusionConfig) -> Result<RankedList> {
    if candidates.is_empty() {
        return Err(Error::Usage("candidate list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    let mut list = RankedList::default();
    let mut items = Vec::with_capacity(candidates.len());
    for &c in candidates {
        if !seen.insert(c) {
            list.duplicates += 1;
        } else if c as usize >= model.vocab.items {
            list.unknown += 1;
        } else {
            items.push(c);
        }
    }
    if items.is_empty() {
        return Ok(list);
    }
    let rows: Vec<ScoreRequest> = items
        .iter()
        .map(|&item| ScoreRequest {
            history: 0,
            ids: feature_ids(req.side, req.user, item, req.platform),
        })
        .collect();
    let ys = model.predict(&[req.history], &rows)?;
    list.entries = order_by_fusion(items.into_iter().zip(ys).collect(), &fusion.gamma, fusion.list_len);
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackFlags;
    use crate::model::{ModelConfig, Vocab};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let cfg = ModelConfig {
            dim: 4,
            seq_len: 5,
            blocks: 1,
            slots: 4,
            experts: 2,
            expert_hidden: 4,
            expert_out: 3,
            ..ModelConfig::default()
        };
        let vocab = Vocab {
            users: 2,
            items: 60,
            platforms: 1,
            ages: 1,
            locations: 1,
            categories: 1,
        };
        Model::init(&cfg, vocab, 11).unwrap()
    }

    fn history() -> Vec<HistoryItem> {
        [3u32, 9, 27]
            .iter()
            .map(|&item| HistoryItem {
                item,
                flags: FeedbackFlags { evv: item > 5, fvv: false, gvv: item < 5 },
            })
            .collect()
    }

    #[test]
    fn fusion_arithmetic() {
        assert_eq!(fusion_score(&[0.5, 0.5, 0.5], &[1.0, 1.0, -1.0]), 0.5);
        let g = [0.0, 0.0, -1.0];
        assert!(fusion_score(&[0.3, 0.3, 0.2], &g) > fusion_score(&[0.3, 0.3, 0.21], &g));
        let y = [0.12, 0.8, 0.33];
        let gm = [0.7, 0.2, -1.4];
        assert_eq!(fusion_score(&y, &gm), 0.12 * 0.7 + 0.8 * 0.2 + 0.33 * -1.4);
    }

    #[test]
    fn config_rules() {
        FusionConfig::default().validate().unwrap();
        let pos = FusionConfig { gamma: [1.0, 1.0, 0.5], list_len: 3 };
        assert!(pos.validate().is_err());
        let empty = FusionConfig { list_len: 0, ..FusionConfig::default() };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn ties_break_by_item_id() {
        let y = [0.5; 3];
        let out = order_by_fusion(vec![(9, y), (2, y), (5, y)], &[1.0, 1.0, -1.0], 10);
        assert_eq!(out.iter().map(|e| e.item).collect::<Vec<_>>(), vec![2, 5, 9]);
    }

    #[test]
    fn single_candidate() {
        let m = model();
        let h = history();
        let side = SideInfo::empty(2, 60);
        let req = RankRequest { user: 0, platform: 0, history: &h, side: &side };
        let l = rank_candidates(&m, req, &[4], &FusionConfig::default()).unwrap();
        assert_eq!(l.items(), vec![4]);
        assert!(rank_candidates(&m, req, &[], &FusionConfig::default()).is_err());
    }

    #[test]
    fn duplicates_and_unknown_items() {
        let m = model();
        let h = history();
        let side = SideInfo::empty(2, 60);
        let req = RankRequest { user: 1, platform: 0, history: &h, side: &side };
        let l = rank_candidates(&m, req, &[4, 4, 70, 8, 4], &FusionConfig::default()).unwrap();
        assert_eq!((l.duplicates, l.unknown), (2, 1));
        let mut items = l.items();
        items.sort();
        assert_eq!(items, vec![4, 8]);
    }

    #[test]
    fn matches_brute_force_sort() {
        let m = model();
        let h = history();
        let side = SideInfo::empty(2, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cands: Vec<u32> = (0..50).map(|_| rng.random_range(0..60)).collect();
        let fusion = FusionConfig { list_len: 50, ..FusionConfig::default() };
        let req = RankRequest { user: 1, platform: 0, history: &h, side: &side };
        let got = rank_candidates(&m, req, &cands, &fusion).unwrap();
        let mut distinct: Vec<u32> = cands.clone();
        distinct.sort();
        distinct.dedup();
        let mut want: Vec<(f64, u32)> = distinct
            .iter()
            .map(|&c| {
                let y = m
                    .predict(&[&h], &[ScoreRequest { history: 0, ids: feature_ids(&side, 1, c, 0) }])
                    .unwrap()[0];
                (fusion_score(&y, &fusion.gamma), c)
            })
            .collect();
        want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got.items(), want.iter().map(|w| w.1).collect::<Vec<_>>());
        for (e, w) in got.entries.iter().zip(&want) {
            assert_eq!(e.score, w.0);
        }
    }

    #[test]
    fn same_candidate_twice_scores_identically() {
        let m = model();
        let h = history();
        let side = SideInfo::empty(2, 60);
        let rows = [
            ScoreRequest { history: 0, ids: feature_ids(&side, 0, 7, 0) },
            ScoreRequest { history: 0, ids: feature_ids(&side, 0, 7, 0) },
        ];
        let ys = m.predict(&[&h], &rows).unwrap();
        assert_eq!(ys[0], ys[1]);
    }

    proptest! {
        #[test]
        fn positive_rescaling_keeps_order(
            ys in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..30),
            c in 0.01f64..100.0,
        ) {
            let scored: Vec<(u32, [f64; 3])> = ys.iter().enumerate().map(|(i, &(a, b, g))| (i as u32, [a, b, g])).collect();
            let gamma = [1.0, 0.5, -1.0];
            let scaled = gamma.map(|g| g * c);
            let a: Vec<u32> = order_by_fusion(scored.clone(), &gamma, 100).iter().map(|e| e.item).collect();
            let b: Vec<u32> = order_by_fusion(scored, &scaled, 100).iter().map(|e| e.item).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn list_is_prefix_of_candidates(n in 1usize..40, len in 1usize..15) {
            let scored: Vec<(u32, [f64; 3])> = (0..n as u32).map(|i| (i * 3, [(i as f64 * 0.37).sin().abs(), 0.1, 0.2])).collect();
            let out = order_by_fusion(scored.clone(), &[1.0, 1.0, -1.0], len);
            prop_assert_eq!(out.len(), len.min(n));
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            prop_assert!(out.iter().all(|e| scored.iter().any(|s| s.0 == e.item)));
        }
    }
}
