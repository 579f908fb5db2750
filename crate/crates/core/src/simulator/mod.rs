//! Synthetic short-video world: latent user and item vectors, a
//! logistic-in-affinity watch-time model, a uniformly logged history and
//! an offline A/B harness.

mod abtest;
mod metrics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use abtest::{
    run_abtest, AbReport, AbTestConfig, BucketMode, BucketStats, EntropyOver, Policy, QuartileRow, AB_METRICS,
};
pub use metrics::{auc, diversity_entropy, evaluate, EvalReport};

use crate::error::{Error, Result};
use crate::feedback::{InteractionRecord, SideInfo};
use crate::numerics::sigmoid;

/// Start of the first logged session.
pub const EPOCH_MS: u64 = 1_700_000_000_000;
/// Sessions are one day apart.
pub const SESSION_GAP_MS: u64 = 86_400_000;
const ITEM_GAP_MS: u64 = 1_000;
const MIN_DURATION_MS: f64 = 3_000.0;
const MAX_DURATION_MS: f64 = 60_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    pub platforms: usize,
    pub categories: usize,
    pub ages: usize,
    pub locations: usize,
    pub latent_dim: usize,
    pub sessions_per_user: usize,
    pub session_length: usize,
    /// Spread of item vectors around their category centre.
    pub category_spread: f64,
    /// Multiplies the cosine between user and item vectors.
    pub affinity_scale: f64,
    /// Constant added to every watch logit.
    pub watch_bias: f64,
    /// Standard deviation of per-view logit noise.
    pub noise_scale: f64,
    /// Standard deviation of per-user platform offsets.
    pub platform_scale: f64,
    pub duration_median_ms: f64,
    pub duration_sigma: f64,
    /// Per-session movement of user interests (0 = static).
    pub drift: f64,
    /// Standard deviation of a logit offset shared by every view in one
    /// session (hurried vs. relaxed sessions).
    pub session_mood_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 5000,
            platforms: 3,
            categories: 20,
            ages: 6,
            locations: 10,
            latent_dim: 8,
            sessions_per_user: 5,
            session_length: 10,
            category_spread: 0.5,
            affinity_scale: 3.0,
            watch_bias: 0.0,
            noise_scale: 1.0,
            platform_scale: 0.3,
            duration_median_ms: 10_000.0,
            duration_sigma: 0.6,
            drift: 0.0,
            session_mood_scale: 1.0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("items", self.items),
            ("platforms", self.platforms),
            ("categories", self.categories),
            ("ages", self.ages),
            ("locations", self.locations),
            ("latent_dim", self.latent_dim),
            ("sessions_per_user", self.sessions_per_user),
            ("session_length", self.session_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("simulator.{name} must be >= 1")));
        }
        let reals = [
            self.category_spread,
            self.affinity_scale,
            self.noise_scale,
            self.platform_scale,
            self.duration_sigma,
            self.drift,
            self.session_mood_scale,
        ];
        if reals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !self.watch_bias.is_finite() {
            return Err(Error::Config("simulator scales must be finite and >= 0".into()));
        }
        if !(self.duration_median_ms > 0.0) {
            return Err(Error::Config("simulator.duration_median_ms must be positive".into()));
        }
        Ok(())
    }

    /// Start of the last logged session: the held-out boundary.
    pub fn split_ts_ms(&self) -> u64 {
        EPOCH_MS + (self.sessions_per_user as u64 - 1) * SESSION_GAP_MS
    }
}

/// Independent deterministic stream `(seed, key, purpose)`.
pub(crate) fn stream(seed: u64, key: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key << 4 | purpose);
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentWorld {
    pub config: WorldConfig,
    pub user_vectors: Vec<Vec<f64>>,
    pub drift_directions: Vec<Vec<f64>>,
    pub item_vectors: Vec<Vec<f64>>,
    pub item_category: Vec<u32>,
    pub durations_ms: Vec<f64>,
    /// `users x platforms` additive logit offsets.
    pub platform_offset: Vec<Vec<f64>>,
    pub primary_platform: Vec<u32>,
    pub user_age: Vec<u32>,
    pub user_location: Vec<u32>,
}

/// Draws the world; everything derives from `config.seed`.
pub fn generate_world(config: &WorldConfig) -> Result<LatentWorld> {
    config.validate()?;
    let c = config;
    let mut rng = stream(c.seed, 0, 0);
    let centres: Vec<Vec<f64>> = (0..c.categories).map(|_| unit_vector(&mut rng, c.latent_dim)).collect();
    let mut item_category = Vec::with_capacity(c.items);
    let mut item_vectors = Vec::with_capacity(c.items);
    for _ in 0..c.items {
        let k = rng.random_range(0..c.categories);
        let v = centres[k]
            .iter()
            .map(|x| x + c.category_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        item_category.push(k as u32);
        item_vectors.push(normalize(v));
    }
    let lognormal = LogNormal::new(c.duration_median_ms.ln(), c.duration_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let durations_ms = (0..c.items)
        .map(|_| lognormal.sample(&mut rng).clamp(MIN_DURATION_MS, MAX_DURATION_MS).round())
        .collect();

    let mut rng = stream(c.seed, 0, 1);
    let mut user_vectors = Vec::with_capacity(c.users);
    let mut drift_directions = Vec::with_capacity(c.users);
    let mut platform_offset = Vec::with_capacity(c.users);
    let mut primary_platform = Vec::with_capacity(c.users);
    let mut user_age = Vec::with_capacity(c.users);
    let mut user_location = Vec::with_capacity(c.users);
    for _ in 0..c.users {
        user_vectors.push(unit_vector(&mut rng, c.latent_dim));
        drift_directions.push(unit_vector(&mut rng, c.latent_dim));
        platform_offset.push(
            (0..c.platforms)
                .map(|_| c.platform_scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        primary_platform.push(rng.random_range(0..c.platforms) as u32);
        user_age.push(rng.random_range(0..c.ages) as u32);
        user_location.push(rng.random_range(0..c.locations) as u32);
    }
    Ok(LatentWorld {
        config: c.clone(),
        user_vectors,
        drift_directions,
        item_vectors,
        item_category,
        durations_ms,
        platform_offset,
        primary_platform,
        user_age,
        user_location,
    })
}

impl LatentWorld {
    /// The user's interest vector during `session`.
    pub fn user_vector(&self, user: u32, session: usize) -> Vec<f64> {
        let u = &self.user_vectors[user as usize];
        if self.config.drift == 0.0 {
            return u.clone();
        }
        let d = &self.drift_directions[user as usize];
        let step = self.config.drift * session as f64;
        normalize(u.iter().zip(d).map(|(a, b)| a + step * b).collect())
    }

    /// `scale · cos(user, item)`.
    pub fn affinity(&self, user: u32, item: u32, session: usize) -> f64 {
        let u = self.user_vector(user, session);
        let v = &self.item_vectors[item as usize];
        self.config.affinity_scale * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn side_info(&self) -> SideInfo {
        SideInfo::new(self.item_category.clone(), self.user_age.clone(), self.user_location.clone())
            .expect("tables sized together")
    }

    pub fn num_items(&self) -> usize {
        self.item_vectors.len()
    }

    /// Logit offset shared by all views of `user` in `session`.
    pub fn session_mood(&self, user: u32, session: usize) -> f64 {
        let c = &self.config;
        if c.session_mood_scale == 0.0 {
            return 0.0;
        }
        let mut rng = stream(c.seed, user as u64 + 1, 6);
        rng.set_word_pos(session as u128 * 16);
        c.session_mood_scale * rng.sample::<f64, _>(StandardNormal)
    }

    fn platform(&self, user: u32, rng: &mut ChaCha8Rng) -> u32 {
        if self.config.platforms > 1 && rng.random_bool(0.2) {
            rng.random_range(0..self.config.platforms) as u32
        } else {
            self.primary_platform[user as usize]
        }
    }
}

/// `duration · logistic(logit)`, floored at 0 and rounded down to ms.
pub fn watch_time_ms(duration_ms: f64, logit: f64) -> u64 {
    (duration_ms * sigmoid(logit)).floor().max(0.0) as u64
}

/// Plays `items` in order for `user`. Each view draws its platform and
/// logit noise from `rng`; timestamps advance by the watch time plus a
/// fixed gap.
pub fn simulate_session(
    world: &LatentWorld,
    user: u32,
    session: usize,
    items: &[u32],
    start_ts_ms: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<InteractionRecord> {
    let c = &world.config;
    let u = world.user_vector(user, session);
    let mood = world.session_mood(user, session);
    let mut ts = start_ts_ms;
    let mut out = Vec::with_capacity(items.len());
    for &item in items {
        let platform = world.platform(user, rng);
        let noise: f64 = rng.sample(StandardNormal);
        let v = &world.item_vectors[item as usize];
        let affinity = c.affinity_scale * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let logit = affinity + c.watch_bias + world.platform_offset[user as usize][platform as usize] + mood + c.noise_scale * noise;
        let watch = watch_time_ms(world.durations_ms[item as usize], logit);
        out.push(InteractionRecord {
            user_id: user,
            item_id: item,
            timestamp_ms: ts,
            watch_time_ms: watch,
            platform_id: platform,
        });
        ts += watch + ITEM_GAP_MS;
    }
    out
}

/// The logged history: every user plays `sessions_per_user` sessions of
/// uniformly drawn items, one day apart. Sorted by user, then time.
pub fn generate_log(world: &LatentWorld) -> Vec<InteractionRecord> {
    let c = &world.config;
    let mut out = Vec::with_capacity(c.users * c.sessions_per_user * c.session_length);
    for user in 0..c.users as u32 {
        let mut rng = stream(c.seed, user as u64 + 1, 2);
        for s in 0..c.sessions_per_user {
            let items: Vec<u32> = (0..c.session_length)
                .map(|_| rng.random_range(0..c.items) as u32)
                .collect();
            let start = EPOCH_MS + s as u64 * SESSION_GAP_MS;
            out.extend(simulate_session(world, user, s, &items, start, &mut rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{Dataset, FeedbackConfig};

    fn small() -> WorldConfig {
        WorldConfig {
            users: 50,
            items: 200,
            sessions_per_user: 4,
            session_length: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_log(&a), generate_log(&b));
        let c = generate_world(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.user_vectors, c.user_vectors);
    }

    #[test]
    fn one_dimensional_world() {
        let w = generate_world(&WorldConfig {
            users: 1,
            items: 1,
            latent_dim: 1,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_eq!(w.affinity(0, 0, 0).abs(), 3.0);
    }

    #[test]
    fn affinity_is_centred() {
        let w = generate_world(&WorldConfig { users: 100, items: 100, ..WorldConfig::default() }).unwrap();
        let a: Vec<f64> = (0..100u32).flat_map(|u| (0..100u32).map(move |i| (u, i))).map(|(u, i)| w.affinity(u, i, 0)).collect();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let sd = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
    }

    #[test]
    fn strongly_disliked_items_are_glances() {
        // logistic(-5) * 60 s < 3 s
        for d in [3_000.0, 10_000.0, 60_000.0] {
            assert!(watch_time_ms(d, -5.0) < 3000);
        }
        assert!(60_000.0 * sigmoid(-5.0) < 3000.0);
        assert_eq!(watch_time_ms(42_000.0, 800.0), 42_000);
        assert_eq!(watch_time_ms(42_000.0, -800.0), 0);
    }

    #[test]
    fn session_is_reproducible_and_ordered() {
        let w = generate_world(&small()).unwrap();
        let items = [3, 1, 4, 1, 5];
        let a = simulate_session(&w, 2, 0, &items, 1000, &mut stream(1, 2, 3));
        let b = simulate_session(&w, 2, 0, &items, 1000, &mut stream(1, 2, 3));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|p| p[0].timestamp_ms < p[1].timestamp_ms));
    }

    #[test]
    fn skips_have_lower_affinity_than_focused_views() {
        let w = generate_world(&WorldConfig { users: 200, items: 500, ..WorldConfig::default() }).unwrap();
        let log = generate_log(&w);
        let cfg = FeedbackConfig::default();
        let ds = Dataset::from_records(log, None, &cfg).unwrap();
        let (mut g, mut f) = ((0.0, 0usize), (0.0, 0usize));
        for r in ds.records() {
            let fl = ds.flags(r);
            let a = w.affinity(r.user_id, r.item_id, 0);
            if fl.gvv {
                g = (g.0 + a, g.1 + 1);
            }
            if fl.fvv {
                f = (f.0 + a, f.1 + 1);
            }
        }
        assert!(g.0 / (g.1 as f64) < f.0 / (f.1 as f64));
        let rate = g.1 as f64 / ds.len() as f64;
        assert!((0.3..=0.5).contains(&rate), "skip rate {rate}");
    }

    #[test]
    fn split_is_last_session_start() {
        let w = generate_world(&small()).unwrap();
        let log = generate_log(&w);
        let split = small().split_ts_ms();
        let held = log.iter().filter(|r| r.timestamp_ms >= split).count();
        assert_eq!(held, 50 * 10);
    }

    #[test]
    fn session_mood_is_shared_and_scaled() {
        let w = generate_world(&WorldConfig { users: 4000, ..small() }).unwrap();
        assert_eq!(w.session_mood(3, 2), w.session_mood(3, 2));
        assert_ne!(w.session_mood(3, 1), w.session_mood(3, 2));
        let draws: Vec<f64> = (0..4000).map(|u| w.session_mood(u, 1)).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let scale = w.config.session_mood_scale;
        // 4 standard errors
        assert!(mean.abs() < 4.0 * scale / n.sqrt(), "mean {mean}");
        assert!((sd / scale - 1.0).abs() < 4.0 / (2.0 * n).sqrt(), "sd {sd}");

        let calm = generate_world(&WorldConfig { session_mood_scale: 0.0, ..small() }).unwrap();
        assert!((0..50).all(|u| calm.session_mood(u, 0) == 0.0));
    }
}
