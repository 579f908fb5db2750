//! `negfeed`: simulate logs, train, evaluate, rank and run offline A/B tests.
//!
//! Any `--section.key=value` argument overrides the matching config entry,
//! for example `--training.epochs=3` or `--serving.gamma=[1,1,-2]`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use negfeed::encoder::HistoryItem;
use negfeed::feedback::{
    parse_candidates, parse_item_table, parse_log, parse_user_table, write_item_table, write_log, write_user_table,
    Cardinalities, Dataset, SideInfo,
};
use negfeed::model::flagged_sequence;
use negfeed::serving::{rank_candidates, RankRequest};
use negfeed::simulator::{evaluate, generate_log, generate_world, run_abtest, Policy};
use negfeed::training::{train, Checkpoint};
use negfeed::{Config, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "negfeed", version, about = "Short-video ranking with implicit negative feedback")]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and write its log and side tables.
    Simulate {
        /// Output directory for log.tsv, items.tsv and users.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a log and write a checkpoint.
    Train {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        users: Option<PathBuf>,
        /// Hold out interactions at or after this timestamp (ms).
        #[arg(long)]
        split_ts: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines; stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score the held-out part of a log.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        users: Option<PathBuf>,
        /// Defaults to the split the checkpoint was trained with.
        #[arg(long)]
        split_ts: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Rank a candidate file for one user; writes tab-separated rows.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Log providing the user's history.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long)]
        user: u32,
        /// One item id per line.
        #[arg(long)]
        candidates: PathBuf,
        /// Defaults to the platform of the user's latest interaction.
        #[arg(long)]
        platform: Option<u32>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve two checkpoints in the simulated world and compare buckets.
    Abtest {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .and_then(|s| s.split_once('='))
        .is_some_and(|(key, _)| key.contains('.'))
}

fn main() -> ExitCode {
    let (overrides, args): (Vec<String>, Vec<String>) = std::env::args().partition(|a| is_override(a));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(io::BufWriter::new(f))
}

/// The `--config` file (or the checkpoint's own config when there is no
/// file) with command-line overrides on top.
fn effective_config(file: Option<&Path>, base: Option<&Config>, overrides: &[String]) -> Result<Config> {
    match (file, base) {
        (None, Some(b)) => Config::with_overrides(&b.to_toml(), overrides),
        _ => Config::load(file, overrides),
    }
}

/// Reads a log plus optional side tables. Id spaces come from `cards`
/// when given, otherwise from the largest id in any of the inputs.
fn load_dataset(
    log: &Path,
    items: Option<&Path>,
    users: Option<&Path>,
    cards: Option<Cardinalities>,
    cfg: &Config,
) -> Result<Dataset> {
    let records = parse_log(&read(log)?)?;
    let item_rows = items.map(|p| read(p).and_then(|t| parse_item_table(&t))).transpose()?.unwrap_or_default();
    let user_rows = users.map(|p| read(p).and_then(|t| parse_user_table(&t))).transpose()?.unwrap_or_default();
    let cards = cards.unwrap_or_else(|| {
        let top = |a: Option<u32>, b: Option<u32>| a.max(b).map_or(0, |m| m as usize + 1);
        Cardinalities {
            users: top(records.iter().map(|r| r.user_id).max(), user_rows.iter().map(|r| r.0).max()),
            items: top(records.iter().map(|r| r.item_id).max(), item_rows.iter().map(|r| r.0).max()),
            platforms: top(records.iter().map(|r| r.platform_id).max(), None).max(1),
        }
    });
    let ds = Dataset::from_records(records, Some(cards), &cfg.feedback)?;
    let side = SideInfo::from_rows(cards.users, cards.items, &item_rows, &user_rows)?;
    ds.with_side_info(side)
}

fn checkpoint_cards(ck: &Checkpoint) -> Cardinalities {
    Cardinalities {
        users: ck.vocab.users,
        items: ck.vocab.items,
        platforms: ck.vocab.platforms,
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Simulate { out } => {
            let cfg = effective_config(file, None, overrides)?;
            let world = generate_world(&cfg.simulator)?;
            let log = generate_log(&world);
            fs::create_dir_all(&out)?;
            let side = world.side_info();
            let mut w = create(&out.join("log.tsv"))?;
            write_log(&mut w, &log)?;
            w.flush()?;
            let mut w = create(&out.join("items.tsv"))?;
            write_item_table(&mut w, &side)?;
            w.flush()?;
            let mut w = create(&out.join("users.tsv"))?;
            write_user_table(&mut w, &side)?;
            w.flush()?;
            println!("records\t{}", log.len());
            println!("split_ts_ms\t{}", cfg.simulator.split_ts_ms());
        }
        Command::Train { log, items, users, split_ts, out, metrics } => {
            let mut cfg = effective_config(file, None, overrides)?;
            if split_ts.is_some() {
                cfg.training.split_ts_ms = split_ts;
            }
            let ds = load_dataset(&log, items.as_deref(), users.as_deref(), None, &cfg)?;
            let trainer = match metrics {
                Some(p) => {
                    let mut w = create(&p)?;
                    let t = train(&ds, &cfg, &mut w)?;
                    w.flush()?;
                    t
                }
                None => train(&ds, &cfg, &mut io::stdout().lock())?,
            };
            Checkpoint::from_trainer(&trainer, &cfg).save(&out)?;
        }
        Command::Eval { checkpoint, log, items, users, split_ts, format } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = effective_config(file, Some(&ck.config), overrides)?;
            let split = split_ts
                .or(ck.config.training.split_ts_ms)
                .ok_or_else(|| Error::Usage("no --split-ts given and the checkpoint records none".into()))?;
            let ds = load_dataset(&log, items.as_deref(), users.as_deref(), Some(checkpoint_cards(&ck)), &cfg)?;
            let report = evaluate(&ck.model()?, &ds, split, &cfg.serving)?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Rank { checkpoint, log, items, users, user, candidates, platform, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = effective_config(file, Some(&ck.config), overrides)?;
            let ds = load_dataset(&log, items.as_deref(), users.as_deref(), Some(checkpoint_cards(&ck)), &cfg)?;
            if user as usize >= ds.num_users() {
                return Err(Error::Index {
                    what: "user",
                    index: user as usize,
                    bound: ds.num_users(),
                });
            }
            let model = ck.model()?;
            let recs = ds.user_history(user);
            let seq: Vec<HistoryItem> = flagged_sequence(&ds, recs);
            let history = &seq[seq.len().saturating_sub(model.config.seq_len)..];
            let platform = platform.or_else(|| recs.last().map(|r| r.platform_id)).unwrap_or(0);
            let cands = parse_candidates(&read(&candidates)?)?;
            let req = RankRequest { user, platform, history, side: ds.side() };
            let list = rank_candidates(&model, req, &cands, &cfg.serving)?;
            if list.unknown > 0 || list.duplicates > 0 {
                eprintln!(
                    "warning: skipped {} unknown and {} duplicate candidates",
                    list.unknown, list.duplicates
                );
            }
            match out {
                Some(p) => {
                    let mut w = create(&p)?;
                    list.write_tsv(&mut w)?;
                    w.flush()?;
                }
                None => list.write_tsv(io::stdout().lock())?,
            }
        }
        Command::Abtest { a, b, format } => {
            let cfg = effective_config(file, None, overrides)?;
            let (ca, cb) = (Checkpoint::load(&a)?, Checkpoint::load(&b)?);
            let (ma, mb) = (ca.model()?, cb.model()?);
            let world = generate_world(&cfg.simulator)?;
            let cards = Cardinalities {
                users: cfg.simulator.users,
                items: cfg.simulator.items,
                platforms: cfg.simulator.platforms,
            };
            let ds = Dataset::from_records(generate_log(&world), Some(cards), &cfg.feedback)?
                .with_side_info(world.side_info())?;
            for (name, m) in [("a", &ma), ("b", &mb)] {
                if m.vocab.users < ds.num_users() || m.vocab.items < ds.num_items() {
                    return Err(Error::Schema(format!(
                        "checkpoint {name} covers {} users / {} items, the world has {} / {}",
                        m.vocab.users,
                        m.vocab.items,
                        ds.num_users(),
                        ds.num_items()
                    )));
                }
            }
            let report = run_abtest(&world, &ds, &Policy::Ranker(&ma), &Policy::Ranker(&mb), &cfg.serving, &cfg.abtest)?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
    }
    Ok(())
}
