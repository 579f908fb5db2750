use std::collections::BTreeMap;

use super::{classify_feedback, FeedbackConfig, FeedbackFlags, InteractionRecord};

/// Watch-time percentile thresholds of one item.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoWatchStats {
    pub item_id: u32,
    pub p50_ms: f64,
    pub p60_ms: f64,
    pub count: usize,
}

/// Item id used for the global fallback entry.
pub const GLOBAL_ITEM: u32 = u32::MAX;

const NO_DATA: VideoWatchStats = VideoWatchStats {
    item_id: GLOBAL_ITEM,
    p50_ms: f64::INFINITY,
    p60_ms: f64::INFINITY,
    count: 0,
};

/// Nearest-rank percentile of an ascending slice: the value at 1-based rank
/// `ceil(percent * n / 100)`.
pub fn nearest_rank(sorted: &[u64], percent: u32) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = (percent as usize * n).div_ceil(100).max(1);
    Some(sorted[rank - 1])
}

#[derive(Clone, Debug)]
pub struct WatchStats {
    cfg: FeedbackConfig,
    sorted: BTreeMap<u32, Vec<u64>>,
    per_item: BTreeMap<u32, VideoWatchStats>,
    global: Option<VideoWatchStats>,
}

impl WatchStats {
    pub fn compute<'a>(records: impl IntoIterator<Item = &'a InteractionRecord>, cfg: &FeedbackConfig) -> Self {
        let mut sorted: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        let mut all = Vec::new();
        for r in records {
            sorted.entry(r.item_id).or_default().push(r.watch_time_ms);
            all.push(r.watch_time_ms);
        }
        all.sort_unstable();
        let global = stats_of(GLOBAL_ITEM, &all, cfg);
        let per_item = sorted
            .iter_mut()
            .map(|(&item, v)| {
                v.sort_unstable();
                (item, stats_of(item, v, cfg).unwrap())
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            sorted,
            per_item,
            global,
        }
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.cfg
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_none()
    }

    pub fn global(&self) -> Option<&VideoWatchStats> {
        self.global.as_ref()
    }

    /// Raw per-item entry, without fallback.
    pub fn item_stats(&self, item: u32) -> Option<&VideoWatchStats> {
        self.per_item.get(&item)
    }

    /// Thresholds used for `item`: its own when supported, else global.
    pub fn for_item(&self, item: u32) -> &VideoWatchStats {
        match self.per_item.get(&item) {
            Some(s) if s.count >= self.cfg.min_support => s,
            _ => self.global.as_ref().unwrap_or(&NO_DATA),
        }
    }

    pub fn classify(&self, rec: &InteractionRecord) -> FeedbackFlags {
        if self.cfg.leave_one_out {
            if let Some(s) = self.leave_one_out_stats(rec) {
                return classify_feedback(rec.watch_time_ms, &s, self.cfg.gvv_threshold_ms);
            }
        }
        classify_feedback(rec.watch_time_ms, self.for_item(rec.item_id), self.cfg.gvv_threshold_ms)
    }

    /// Item percentiles with one instance of the record's own watch removed.
    /// `None` when the record is not part of the sample or support drops
    /// below `min_support`.
    fn leave_one_out_stats(&self, rec: &InteractionRecord) -> Option<VideoWatchStats> {
        let v = self.sorted.get(&rec.item_id)?;
        let pos = v.binary_search(&rec.watch_time_ms).ok()?;
        let n = v.len() - 1;
        if n < self.cfg.min_support {
            return None;
        }
        let at = |percent: u32| {
            let rank = (percent as usize * n).div_ceil(100).max(1);
            let idx = rank - 1;
            let value = if idx < pos { v[idx] } else { v[idx + 1] };
            value as f64
        };
        Some(VideoWatchStats {
            item_id: rec.item_id,
            p50_ms: at(self.cfg.evv_percentile),
            p60_ms: at(self.cfg.fvv_percentile),
            count: n,
        })
    }
}

fn stats_of(item: u32, sorted: &[u64], cfg: &FeedbackConfig) -> Option<VideoWatchStats> {
    Some(VideoWatchStats {
        item_id: item,
        p50_ms: nearest_rank(sorted, cfg.evv_percentile)? as f64,
        p60_ms: nearest_rank(sorted, cfg.fvv_percentile)? as f64,
        count: sorted.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(item: u32, watch: u64) -> InteractionRecord {
        InteractionRecord {
            user_id: 0,
            item_id: item,
            timestamp_ms: 0,
            watch_time_ms: watch,
            platform_id: 0,
        }
    }

    fn cfg(min_support: usize) -> FeedbackConfig {
        FeedbackConfig {
            min_support,
            ..FeedbackConfig::default()
        }
    }

    #[test]
    fn nearest_rank_three_values() {
        let s = WatchStats::compute(&[rec(1, 3000), rec(1, 1000), rec(1, 2000)], &cfg(1));
        let st = s.for_item(1);
        assert_eq!((st.p50_ms, st.p60_ms, st.count), (2000.0, 2000.0, 3));
    }

    #[test]
    fn single_record() {
        let s = WatchStats::compute(&[rec(4, 5000)], &cfg(1));
        assert_eq!((s.for_item(4).p50_ms, s.for_item(4).p60_ms), (5000.0, 5000.0));
    }

    #[test]
    fn sparse_item_falls_back_to_global() {
        let recs = [rec(1, 100), rec(2, 1000), rec(2, 2000), rec(2, 3000)];
        let s = WatchStats::compute(&recs, &cfg(2));
        let st = s.for_item(1);
        assert_eq!(st.item_id, GLOBAL_ITEM);
        // global sample [100, 1000, 2000, 3000]: ranks 2 and 3
        assert_eq!((st.p50_ms, st.p60_ms), (1000.0, 2000.0));
        assert_eq!(s.for_item(2).item_id, 2);
        // never seen
        assert_eq!(s.for_item(99).item_id, GLOBAL_ITEM);
    }

    #[test]
    fn empty_input_gives_empty_stats() {
        let s = WatchStats::compute(&[], &cfg(1));
        assert!(s.is_empty());
        let f = s.classify(&rec(0, 1_000_000));
        assert!(!f.evv && !f.fvv && !f.gvv);
    }

    #[test]
    fn leave_one_out_excludes_own_watch() {
        let mut c = cfg(2);
        c.leave_one_out = true;
        let recs = [rec(1, 1000), rec(1, 2000), rec(1, 3000)];
        let s = WatchStats::compute(&recs, &c);
        // others of 3000 are [1000, 2000]: p50 = 1000
        assert!(s.classify(&recs[2]).evv);
        // others of 2000 are [1000, 3000]: p50 = 1000, p60 = 3000
        let f = s.classify(&recs[1]);
        assert!(f.evv && !f.fvv);
    }

    proptest! {
        /// Sort-based oracle: threshold is the ceil(p n / 100)-th smallest
        /// watch, and at most floor(n / 2) of an item's own records are EVV.
        #[test]
        fn item_labels_match_sort_oracle(watches in proptest::collection::vec(0u64..20_000, 1..=20)) {
            let recs: Vec<_> = watches.iter().map(|&w| rec(7, w)).collect();
            let s = WatchStats::compute(&recs, &cfg(1));
            let mut sorted = watches.clone();
            sorted.sort();
            let n = sorted.len();
            let p50 = sorted[(n + 1) / 2 - 1];
            let p60 = sorted[(3 * n).div_ceil(5) - 1];
            prop_assert_eq!(s.for_item(7).p50_ms, p50 as f64);
            prop_assert_eq!(s.for_item(7).p60_ms, p60 as f64);
            let evv = recs.iter().filter(|r| s.classify(r).evv).count();
            let fvv = recs.iter().filter(|r| s.classify(r).fvv).count();
            prop_assert_eq!(evv, watches.iter().filter(|&&w| w > p50).count());
            prop_assert!(evv <= n / 2);
            prop_assert!(fvv <= evv);
        }
    }
}
