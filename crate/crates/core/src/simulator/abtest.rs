use std::fmt::Write as _;

use rand::seq::{index, IndexedRandom};
use serde::{Deserialize, Serialize};

use super::{diversity_entropy, simulate_session, stream, LatentWorld, EPOCH_MS, SESSION_GAP_MS};
use crate::encoder::HistoryItem;
use crate::error::{Error, Result};
use crate::feedback::Dataset;
use crate::model::{flagged_sequence, Model};
use crate::serving::{rank_candidates, FusionConfig, RankRequest};

const LIST_GAP_MS: u64 = 3_600_000;

/// Column names of the comparison table.
pub const AB_METRICS: [&str; 7] = [
    "Play Duration",
    "Players Number",
    "Like Users",
    "Like Times",
    "Skip Times",
    "Reduction Users",
    "Reduction Times",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketMode {
    /// Even user ids get policy A, odd ids policy B.
    #[default]
    Split,
    /// Every user is served by both policies with identical random streams.
    Paired,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyOver {
    #[default]
    Category,
    Item,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbTestConfig {
    /// Candidate pool size per request, drawn uniformly.
    pub candidates: usize,
    /// Lists served to each user.
    pub lists_per_user: usize,
    pub bucket_mode: BucketMode,
    /// A list counts as a reduction when at least `reduction_min_gvv` of
    /// its first `reduction_window` items are glanced at.
    pub reduction_window: usize,
    pub reduction_min_gvv: usize,
    pub entropy_window: usize,
    pub entropy_over: EntropyOver,
    pub seed: u64,
}

impl Default for AbTestConfig {
    fn default() -> Self {
        Self {
            candidates: 50,
            lists_per_user: 10,
            bucket_mode: BucketMode::Split,
            reduction_window: 5,
            reduction_min_gvv: 5,
            entropy_window: 100,
            entropy_over: EntropyOver::Category,
            seed: 11,
        }
    }
}

impl AbTestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.lists_per_user == 0 || self.entropy_window == 0 {
            return Err(Error::Config("abtest sizes must be >= 1".into()));
        }
        if self.reduction_window == 0 || self.reduction_min_gvv == 0 || self.reduction_min_gvv > self.reduction_window {
            return Err(Error::Config("abtest needs 1 <= reduction_min_gvv <= reduction_window".into()));
        }
        Ok(())
    }
}

/// How a bucket picks the list shown from each candidate pool.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Ranker(&'a Model),
    Uniform,
    Constant(u32),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BucketStats {
    pub users: usize,
    pub impressions: usize,
    pub play_duration_ms: u64,
    /// Users with at least one engaged view.
    pub players: usize,
    pub like_users: usize,
    pub like_times: usize,
    pub skip_times: usize,
    pub reduction_users: usize,
    pub reduction_times: usize,
    pub windows: usize,
    pub mean_entropy: Option<f64>,
    #[serde(skip)]
    entropy_sum: f64,
    #[serde(skip)]
    per_user_entropy: Vec<(u32, f64)>,
}

impl BucketStats {
    pub fn skip_rate(&self) -> Option<f64> {
        (self.impressions > 0).then(|| self.skip_times as f64 / self.impressions as f64)
    }

    /// Values in [`AB_METRICS`] order.
    pub fn metric_values(&self) -> [f64; 7] {
        [
            self.play_duration_ms as f64,
            self.players as f64,
            self.like_users as f64,
            self.like_times as f64,
            self.skip_times as f64,
            self.reduction_users as f64,
            self.reduction_times as f64,
        ]
    }

    /// Entropy of every complete window, per user.
    pub fn user_entropies(&self) -> &[(u32, f64)] {
        &self.per_user_entropy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImprovementRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `(A - B) / B · 100`; `None` when `B = 0`.
    pub rate_pct: Option<f64>,
}

/// Mean window entropy of users grouped by their logged skip-rate quartile.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuartileRow {
    pub quartile: usize,
    pub users: usize,
    pub gvv_rate_min: f64,
    pub gvv_rate_max: f64,
    pub entropy_a: Option<f64>,
    pub entropy_b: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AbReport {
    pub mode: BucketMode,
    pub a: BucketStats,
    pub b: BucketStats,
    pub improvements: Vec<ImprovementRow>,
    pub quartiles: Vec<QuartileRow>,
}

pub fn improvement_rate(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| (a - b) / b * 100.0)
}

impl AbReport {
    pub fn rate(&self, metric: &str) -> Option<f64> {
        self.improvements.iter().find(|r| r.metric == metric).and_then(|r| r.rate_pct)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>14} {:>14} {:>18}", "metric", "A", "B", "Improvements rate(%)");
        for r in &self.improvements {
            let rate = r.rate_pct.map_or_else(|| "n/a".to_owned(), |v| format!("{v:+.3}"));
            let _ = writeln!(s, "{:<18} {:>14.3} {:>14.3} {:>18}", r.metric, r.a, r.b, rate);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "diversity entropy by skip-rate quartile");
        let _ = writeln!(s, "{:<9} {:>6} {:>16} {:>10} {:>10}", "quartile", "users", "gvv rate", "A", "B");
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
        for q in &self.quartiles {
            let _ = writeln!(
                s,
                "{:<9} {:>6} {:>16} {:>10} {:>10}",
                format!("Q{}", q.quartile),
                q.users,
                format!("{:.3}-{:.3}", q.gvv_rate_min, q.gvv_rate_max),
                f(q.entropy_a),
                f(q.entropy_b)
            );
        }
        s
    }
}

/// Serves `lists_per_user` lists to every user of the base log under
/// policies A and B and compares the outcomes.
pub fn run_abtest(
    world: &LatentWorld,
    base: &Dataset,
    a: &Policy<'_>,
    b: &Policy<'_>,
    fusion: &FusionConfig,
    cfg: &AbTestConfig,
) -> Result<AbReport> {
    cfg.validate()?;
    fusion.validate()?;
    if base.num_users() > world.config.users || base.num_items() > world.num_items() {
        return Err(Error::Schema("base log does not belong to this world".into()));
    }
    let mut stats = [BucketStats::default(), BucketStats::default()];
    for user in 0..world.config.users as u32 {
        let buckets: &[usize] = match cfg.bucket_mode {
            BucketMode::Paired => &[0, 1],
            BucketMode::Split if user % 2 == 0 => &[0],
            BucketMode::Split => &[1],
        };
        for &bucket in buckets {
            let policy = if bucket == 0 { a } else { b };
            serve_user(world, base, policy, fusion, cfg, user, &mut stats[bucket])?;
        }
    }
    for s in &mut stats {
        s.mean_entropy = (s.windows > 0).then(|| s.entropy_sum / s.windows as f64);
    }
    let [sa, sb] = stats;
    let mut improvements: Vec<ImprovementRow> = AB_METRICS
        .iter()
        .zip(sa.metric_values().into_iter().zip(sb.metric_values()))
        .map(|(name, (x, y))| ImprovementRow {
            metric: (*name).to_owned(),
            a: x,
            b: y,
            rate_pct: improvement_rate(x, y),
        })
        .collect();
    if let (Some(x), Some(y)) = (sa.mean_entropy, sb.mean_entropy) {
        improvements.push(ImprovementRow {
            metric: "Diversity Entropy".into(),
            a: x,
            b: y,
            rate_pct: improvement_rate(x, y),
        });
    }
    let quartiles = quartile_table(base, &sa, &sb);
    Ok(AbReport {
        mode: cfg.bucket_mode,
        a: sa,
        b: sb,
        improvements,
        quartiles,
    })
}

fn serve_user(
    world: &LatentWorld,
    base: &Dataset,
    policy: &Policy<'_>,
    fusion: &FusionConfig,
    cfg: &AbTestConfig,
    user: u32,
    out: &mut BucketStats,
) -> Result<()> {
    let side = base.side();
    let mut history: Vec<HistoryItem> = flagged_sequence(base, base.user_history(user));
    let key = user as u64 + 1;
    let mut pool_rng = stream(cfg.seed, key, 3);
    let mut watch_rng = stream(cfg.seed, key, 4);
    let mut pick_rng = stream(cfg.seed, key, 5);
    let session = world.config.sessions_per_user;
    let items = world.num_items();
    let pool_size = cfg.candidates.min(items);
    let platform = world.primary_platform[user as usize];
    let mut served_all = Vec::with_capacity(cfg.lists_per_user * fusion.list_len);
    let (mut engaged, mut liked, mut reductions) = (false, false, 0usize);
    for list in 0..cfg.lists_per_user {
        let pool: Vec<u32> = index::sample(&mut pool_rng, items, pool_size)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let served: Vec<u32> = match policy {
            Policy::Ranker(model) => {
                let req = RankRequest {
                    user,
                    platform,
                    history: &history,
                    side,
                };
                rank_candidates(model, req, &pool, fusion)?.items()
            }
            Policy::Uniform => pool.choose_multiple(&mut pick_rng, fusion.list_len).copied().collect(),
            Policy::Constant(item) => vec![*item; fusion.list_len],
        };
        let start = EPOCH_MS + session as u64 * SESSION_GAP_MS + list as u64 * LIST_GAP_MS;
        let recs = simulate_session(world, user, session, &served, start, &mut watch_rng);
        let mut head_skips = 0;
        for (pos, r) in recs.iter().enumerate() {
            let flags = base.stats().classify(r);
            out.impressions += 1;
            out.play_duration_ms += r.watch_time_ms;
            engaged |= flags.evv;
            liked |= flags.fvv;
            out.like_times += flags.fvv as usize;
            out.skip_times += flags.gvv as usize;
            if pos < cfg.reduction_window && flags.gvv {
                head_skips += 1;
            }
            history.push(HistoryItem { item: r.item_id, flags });
        }
        if head_skips >= cfg.reduction_min_gvv {
            reductions += 1;
        }
        served_all.extend(served);
    }
    out.users += 1;
    out.players += engaged as usize;
    out.like_users += liked as usize;
    out.reduction_times += reductions;
    out.reduction_users += (reductions > 0) as usize;
    for window in served_all.chunks_exact(cfg.entropy_window) {
        let keyed: Vec<u32> = match cfg.entropy_over {
            EntropyOver::Item => window.to_vec(),
            EntropyOver::Category => window.iter().map(|&i| world.item_category[i as usize]).collect(),
        };
        if let Some(h) = diversity_entropy(&keyed) {
            out.windows += 1;
            out.entropy_sum += h;
            out.per_user_entropy.push((user, h));
        }
    }
    Ok(())
}

fn quartile_table(base: &Dataset, a: &BucketStats, b: &BucketStats) -> Vec<QuartileRow> {
    let mut rates: Vec<(f64, u32)> = (0..base.num_users() as u32)
        .filter_map(|u| {
            let h = base.user_history(u);
            (!h.is_empty()).then(|| {
                let g = h.iter().filter(|r| base.flags(r).gvv).count();
                (g as f64 / h.len() as f64, u)
            })
        })
        .collect();
    rates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let n = rates.len();
    let mut quartile_of = vec![usize::MAX; base.num_users()];
    let mut rows = Vec::new();
    for q in 0..4 {
        let group = &rates[q * n / 4..(q + 1) * n / 4];
        for &(_, u) in group {
            quartile_of[u as usize] = q;
        }
        let mean = |s: &BucketStats| {
            let v: Vec<f64> = s
                .per_user_entropy
                .iter()
                .filter(|(u, _)| quartile_of.get(*u as usize) == Some(&q))
                .map(|&(_, h)| h)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        rows.push(QuartileRow {
            quartile: q + 1,
            users: group.len(),
            gvv_rate_min: group.first().map_or(0.0, |g| g.0),
            gvv_rate_max: group.last().map_or(0.0, |g| g.0),
            entropy_a: mean(a),
            entropy_b: mean(b),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackConfig;
    use crate::simulator::{generate_log, generate_world, WorldConfig};

    fn setup(users: usize, items: usize) -> (LatentWorld, Dataset) {
        let w = generate_world(&WorldConfig {
            users,
            items,
            sessions_per_user: 2,
            ..WorldConfig::default()
        })
        .unwrap();
        let ds = Dataset::from_records(generate_log(&w), None, &FeedbackConfig::default())
            .unwrap()
            .with_side_info(w.side_info())
            .unwrap();
        (w, ds)
    }

    #[test]
    fn rate_formula() {
        assert_eq!(improvement_rate(110.0, 100.0), Some(10.0));
        assert_eq!(improvement_rate(1.0, 0.0), None);
    }

    #[test]
    fn null_experiment_is_exactly_zero() {
        let (w, ds) = setup(20, 300);
        let cfg = AbTestConfig {
            bucket_mode: BucketMode::Paired,
            ..AbTestConfig::default()
        };
        let r = run_abtest(&w, &ds, &Policy::Uniform, &Policy::Uniform, &FusionConfig::default(), &cfg).unwrap();
        assert_eq!(r.a, r.b);
        for row in &r.improvements {
            assert!(row.rate_pct.is_none() || row.rate_pct == Some(0.0), "{row:?}");
        }
        let names: Vec<&str> = r.improvements.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(&names[..7], &AB_METRICS);
    }

    #[test]
    fn constant_policy_has_zero_entropy() {
        let (w, ds) = setup(10, 300);
        let cfg = AbTestConfig {
            bucket_mode: BucketMode::Paired,
            entropy_over: EntropyOver::Item,
            ..AbTestConfig::default()
        };
        let r = run_abtest(&w, &ds, &Policy::Constant(3), &Policy::Uniform, &FusionConfig::default(), &cfg).unwrap();
        assert_eq!(r.a.mean_entropy, Some(0.0));
        assert_eq!(r.a.windows, 10);
        assert!(r.b.mean_entropy.unwrap() > 4.0);
    }

    #[test]
    fn split_mode_halves_users() {
        let (w, ds) = setup(11, 300);
        let r = run_abtest(&w, &ds, &Policy::Uniform, &Policy::Uniform, &FusionConfig::default(), &AbTestConfig::default())
            .unwrap();
        assert_eq!((r.a.users, r.b.users), (6, 5));
        assert_eq!(r.a.impressions, 6 * 100);
        assert_eq!(r.quartiles.len(), 4);
        assert!(r.to_text().contains("Improvements rate(%)"));
    }

    #[test]
    fn report_is_reproducible() {
        let (w, ds) = setup(8, 200);
        let cfg = AbTestConfig::default();
        let run = || run_abtest(&w, &ds, &Policy::Uniform, &Policy::Constant(1), &FusionConfig::default(), &cfg).unwrap();
        assert_eq!(serde_json::to_string(&run()).unwrap(), serde_json::to_string(&run()).unwrap());
    }
}
