//! Interaction records and the watch-time feedback taxonomy.
//!
//! Three independent bits are derived from each watch:
//!
//! | flag | meaning                 | rule                                        |
//! |------|-------------------------|---------------------------------------------|
//! | EVV  | engaged viewing         | watch time above the item's 50th percentile |
//! | FVV  | focused viewing         | watch time above the item's 60th percentile |
//! | GVV  | glance (implicit skip)  | watch time under 3 seconds                  |
//!
//! Percentiles are nearest-rank over every user's watch time of the item;
//! items with fewer than `min_support` observations use the global
//! percentiles instead.

mod log;
mod side;
mod stats;

use serde::{Deserialize, Serialize};

pub use log::{ingest_log, parse_candidates, parse_log, write_log, Cardinalities, Dataset, LOG_HEADER};
pub use side::{parse_item_table, parse_user_table, write_item_table, write_user_table, SideInfo};
pub use stats::{nearest_rank, VideoWatchStats, WatchStats};

/// Number of feedback tasks; the order is always (EVV, FVV, GVV).
pub const NUM_TASKS: usize = 3;
/// Index of the negative-feedback task.
pub const GVV: usize = 2;
pub const TASK_NAMES: [&str; NUM_TASKS] = ["evv", "fvv", "gvv"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InteractionRecord {
    pub user_id: u32,
    pub item_id: u32,
    pub timestamp_ms: u64,
    pub watch_time_ms: u64,
    pub platform_id: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct FeedbackFlags {
    pub evv: bool,
    pub fvv: bool,
    pub gvv: bool,
}

impl FeedbackFlags {
    pub fn as_array(self) -> [f64; NUM_TASKS] {
        [self.evv, self.fvv, self.gvv].map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn get(self, task: usize) -> bool {
        [self.evv, self.fvv, self.gvv][task]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    pub evv_percentile: u32,
    pub fvv_percentile: u32,
    pub gvv_threshold_ms: u64,
    /// Items with fewer observations fall back to global percentiles.
    pub min_support: usize,
    /// Exclude the record's own watch time from its item's percentiles.
    pub leave_one_out: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            evv_percentile: 50,
            fvv_percentile: 60,
            gvv_threshold_ms: 3000,
            min_support: 5,
            leave_one_out: false,
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(1..=100).contains(&self.evv_percentile)
            || !(self.evv_percentile..=100).contains(&self.fvv_percentile)
        {
            return Err(crate::Error::Config(
                "feedback percentiles must satisfy 1 <= evv <= fvv <= 100".into(),
            ));
        }
        if self.min_support == 0 {
            return Err(crate::Error::Config("feedback.min_support must be >= 1".into()));
        }
        Ok(())
    }
}

/// Applies the three rules independently.
pub fn classify_feedback(watch_time_ms: u64, stats: &VideoWatchStats, gvv_threshold_ms: u64) -> FeedbackFlags {
    let w = watch_time_ms as f64;
    FeedbackFlags {
        evv: w > stats.p50_ms,
        fvv: w > stats.p60_ms,
        gvv: watch_time_ms < gvv_threshold_ms,
    }
}
