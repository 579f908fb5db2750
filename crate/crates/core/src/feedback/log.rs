//! Tab-separated interaction logs.
//!
//! ```text
//! #user item ts watch platform
//! 0    17    1700000000000    4200    1
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{FeedbackConfig, FeedbackFlags, InteractionRecord, SideInfo, WatchStats};
use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "#user item ts watch platform";
const LOG_FIELDS: [&str; 5] = ["user", "item", "ts", "watch", "platform"];

/// Id-space sizes of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cardinalities {
    pub users: usize,
    pub items: usize,
    pub platforms: usize,
}

/// Parses a whole log. Blank lines are ignored; line numbers are 1-based.
pub fn parse_log(text: &str) -> Result<Vec<InteractionRecord>> {
    let mut lines = text.split('\n').enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l.trim_end_matches('\r')),
            None => return Ok(Vec::new()),
        }
    };
    check_header(header.0, header.1, &LOG_FIELDS)?;

    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(i + 1, line)?);
    }
    Ok(out)
}

pub(crate) fn check_header(line_no: usize, line: &str, fields: &[&str]) -> Result<()> {
    let Some(rest) = line.strip_prefix('#') else {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("missing header, expected `#{}`", fields.join(" ")),
        });
    };
    let names: Vec<&str> = rest.split_whitespace().collect();
    if let Some(unknown) = names.iter().find(|n| !fields.contains(n)) {
        return Err(Error::Schema(format!("unknown field `{unknown}` in header")));
    }
    if names != fields {
        return Err(Error::Schema(format!(
            "header fields {names:?}, expected {fields:?}"
        )));
    }
    Ok(())
}

pub(crate) fn parse_fields<const N: usize>(line_no: usize, line: &str) -> Result<[&str; N]> {
    let parts: Vec<&str> = line.split('\t').collect();
    parts.try_into().map_err(|p: Vec<&str>| Error::Parse {
        line: line_no,
        msg: format!("expected {N} tab-separated fields, found {}", p.len()),
    })
}

pub(crate) fn parse_num<T: std::str::FromStr>(line_no: usize, name: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad {name} value `{s}`"),
    })
}

fn parse_record(line_no: usize, line: &str) -> Result<InteractionRecord> {
    let [u, i, ts, w, p] = parse_fields::<5>(line_no, line)?;
    let watch: i64 = parse_num(line_no, "watch", w)?;
    if watch < 0 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("negative watch time {watch}"),
        });
    }
    Ok(InteractionRecord {
        user_id: parse_num(line_no, "user", u)?,
        item_id: parse_num(line_no, "item", i)?,
        timestamp_ms: parse_num(line_no, "ts", ts)?,
        watch_time_ms: watch as u64,
        platform_id: parse_num(line_no, "platform", p)?,
    })
}

pub fn write_log<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a InteractionRecord>,
) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.user_id, r.item_id, r.timestamp_ms, r.watch_time_ms, r.platform_id
        )?;
    }
    Ok(())
}

/// Candidate list for ranking: one item id per line, optional `#item` header.
pub fn parse_candidates(text: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if out.is_empty() && line == "#item" {
                continue;
            }
            return Err(Error::Schema(format!("unexpected header `{line}`")));
        }
        out.push(parse_num(i + 1, "item", line)?);
    }
    Ok(out)
}

/// Immutable, per-user time-ordered interactions plus their watch statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    sequences: Vec<Vec<InteractionRecord>>,
    cards: Cardinalities,
    stats: WatchStats,
    side: SideInfo,
}

impl Dataset {
    /// Deduplicates `(user, item, ts)` keeping the longest watch, validates
    /// ids against `cards` (inferred as `max id + 1` when absent) and sorts
    /// each user's sequence by timestamp.
    pub fn from_records(
        records: Vec<InteractionRecord>,
        cards: Option<Cardinalities>,
        cfg: &FeedbackConfig,
    ) -> Result<Self> {
        let mut dedup: BTreeMap<(u32, u64, u32), InteractionRecord> = BTreeMap::new();
        for r in records {
            dedup
                .entry((r.user_id, r.timestamp_ms, r.item_id))
                .and_modify(|e| {
                    if r.watch_time_ms > e.watch_time_ms {
                        *e = r;
                    }
                })
                .or_insert(r);
        }
        let cards = match cards {
            Some(c) => c,
            None => {
                let max = |f: fn(&InteractionRecord) -> u32| {
                    dedup.values().map(|r| f(r) as usize + 1).max().unwrap_or(0)
                };
                Cardinalities {
                    users: max(|r| r.user_id),
                    items: max(|r| r.item_id),
                    platforms: max(|r| r.platform_id).max(1),
                }
            }
        };
        let mut sequences = vec![Vec::new(); cards.users];
        for r in dedup.into_values() {
            check_id("user", r.user_id, cards.users)?;
            check_id("item", r.item_id, cards.items)?;
            check_id("platform", r.platform_id, cards.platforms)?;
            sequences[r.user_id as usize].push(r);
        }
        let stats = WatchStats::compute(sequences.iter().flatten(), cfg);
        Ok(Self {
            sequences,
            cards,
            stats,
            side: SideInfo::empty(cards.users, cards.items),
        })
    }

    pub fn with_side_info(mut self, side: SideInfo) -> Result<Self> {
        if side.num_users() != self.cards.users || side.num_items() != self.cards.items {
            return Err(Error::Schema(format!(
                "side info covers {} users / {} items, dataset has {} / {}",
                side.num_users(),
                side.num_items(),
                self.cards.users,
                self.cards.items
            )));
        }
        self.side = side;
        Ok(self)
    }

    pub fn cardinalities(&self) -> Cardinalities {
        self.cards
    }

    pub fn num_users(&self) -> usize {
        self.cards.users
    }

    pub fn num_items(&self) -> usize {
        self.cards.items
    }

    pub fn user_history(&self, user: u32) -> &[InteractionRecord] {
        self.sequences
            .get(user as usize)
            .map_or(&[][..], Vec::as_slice)
    }

    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.sequences.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> &WatchStats {
        &self.stats
    }

    pub fn side(&self) -> &SideInfo {
        &self.side
    }

    pub fn flags(&self, r: &InteractionRecord) -> FeedbackFlags {
        self.stats.classify(r)
    }
}

fn check_id(what: &'static str, id: u32, bound: usize) -> Result<()> {
    if (id as usize) < bound {
        Ok(())
    } else {
        Err(Error::Index {
            what,
            index: id as usize,
            bound,
        })
    }
}

/// Reads and parses a log file into a [`Dataset`].
pub fn ingest_log(path: &Path, cards: Option<Cardinalities>, cfg: &FeedbackConfig) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    Dataset::from_records(parse_log(&text)?, cards, cfg)
}
