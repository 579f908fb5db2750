//! Example construction with negative sampling, the weighted multi-task
//! loss, the training loop and checkpoints.

mod checkpoint;
mod optimizer;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optimizer::{Optimizer, OptimizerKind, OptimizerSettings, OptimizerState};

use crate::config::Config;
use crate::encoder::HistoryItem;
use crate::error::{Error, Result};
use crate::feedback::{Dataset, SideInfo, NUM_TASKS};
use crate::model::{feature_ids, flagged_sequence, Model, ScoreRequest, Vocab};
use crate::numerics::{bce_value, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Loss weight per task (EVV, FVV, GVV); non-negative, sums to 1.
    pub task_weights: [f64; NUM_TASKS],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sampled unobserved items per observed interaction.
    pub negative_ratio: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Interactions at or after this time are held out from training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_ts_ms: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task_weights: [1.0 / 3.0; NUM_TASKS],
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 5,
            negative_ratio: 1,
            seed: 42,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            split_ts_ms: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("training.task_weights must be non-negative".into()));
        }
        let sum: f64 = self.task_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("training.task_weights sum to {sum}, expected 1")));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("training.learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One scored row. The history is the user's first `history_end`
/// interactions (the model keeps the last `L`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingExample {
    pub user: u32,
    pub history_end: usize,
    pub item: u32,
    pub platform: u32,
    pub labels: [f64; NUM_TASKS],
    pub negative: bool,
}

/// Examples in generation order. Each group is a positive followed by its
/// sampled negatives; groups share one history and are shuffled as units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<TrainingExample>,
    pub groups: Vec<Range<usize>>,
    /// Interactions whose user had no unobserved item left to sample.
    pub skipped: usize,
}

/// For every interaction before `split_ts_ms`: a positive labelled with
/// its feedback flags, plus `negative_ratio` items the user never
/// interacted with, drawn uniformly, labelled all zero.
pub fn build_examples(ds: &Dataset, split_ts_ms: Option<u64>, negative_ratio: usize, seed: u64) -> ExampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = ds.num_items() as u32;
    let mut set = ExampleSet::default();
    for user in 0..ds.num_users() as u32 {
        let seq = ds.user_history(user);
        let seen: BTreeSet<u32> = seq.iter().map(|r| r.item_id).collect();
        let unseen = items as usize - seen.len();
        for (j, r) in seq.iter().enumerate() {
            if split_ts_ms.is_some_and(|s| r.timestamp_ms >= s) {
                break;
            }
            let start = set.examples.len();
            set.examples.push(TrainingExample {
                user,
                history_end: j,
                item: r.item_id,
                platform: r.platform_id,
                labels: ds.flags(r).as_array(),
                negative: false,
            });
            if negative_ratio > 0 && unseen == 0 {
                set.skipped += 1;
            } else {
                for _ in 0..negative_ratio {
                    let item = sample_unseen(&mut rng, items, &seen, unseen);
                    set.examples.push(TrainingExample {
                        item,
                        labels: [0.0; NUM_TASKS],
                        negative: true,
                        ..set.examples[start]
                    });
                }
            }
            set.groups.push(start..set.examples.len());
        }
    }
    set
}

fn sample_unseen(rng: &mut ChaCha8Rng, items: u32, seen: &BTreeSet<u32>, unseen: usize) -> u32 {
    for _ in 0..64 {
        let c = rng.random_range(0..items);
        if !seen.contains(&c) {
            return c;
        }
    }
    // dense interaction set: pick the k-th unseen id directly
    let k = rng.random_range(0..unseen);
    (0..items).filter(|i| !seen.contains(i)).nth(k).expect("k < unseen")
}

/// Binary cross-entropy of one probability, clamped away from 0 and 1.
pub fn task_loss(y: f64, label: f64) -> f64 {
    bce_value(y, label)
}

/// `Σ_k λ_k L_k`.
pub fn total_loss(losses: &[f64; NUM_TASKS], weights: &[f64; NUM_TASKS]) -> f64 {
    losses.iter().zip(weights).map(|(l, w)| l * w).sum()
}

/// Per-user flagged sequences, side features and examples.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sequences: Vec<Vec<HistoryItem>>,
    pub side: SideInfo,
    pub set: ExampleSet,
}

impl TrainData {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Self {
        Self {
            sequences: (0..ds.num_users() as u32)
                .map(|u| flagged_sequence(ds, ds.user_history(u)))
                .collect(),
            side: ds.side().clone(),
            set: build_examples(ds, cfg.split_ts_ms, cfg.negative_ratio, cfg.seed),
        }
    }
}

/// Rows ready for one forward pass: distinct histories, score requests
/// pointing into them, flattened `n x K` labels and the source example
/// indices.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub keys: Vec<(u32, usize)>,
    pub rows: Vec<ScoreRequest>,
    pub labels: Vec<f64>,
    pub examples: Vec<usize>,
}

impl Batch {
    pub fn new(data: &TrainData, example_ids: impl IntoIterator<Item = usize>) -> Self {
        let mut b = Batch::default();
        let mut index: BTreeMap<(u32, usize), usize> = BTreeMap::new();
        for i in example_ids {
            let e = &data.set.examples[i];
            let key = (e.user, e.history_end);
            let h = *index.entry(key).or_insert_with(|| {
                b.keys.push(key);
                b.keys.len() - 1
            });
            b.rows.push(ScoreRequest {
                history: h,
                ids: feature_ids(&data.side, e.user, e.item, e.platform),
            });
            b.labels.extend_from_slice(&e.labels);
            b.examples.push(i);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn histories<'a>(&self, data: &'a TrainData, seq_len: usize) -> Vec<&'a [HistoryItem]> {
        self.keys
            .iter()
            .map(|&(u, end)| &data.sequences[u as usize][end.saturating_sub(seq_len)..end])
            .collect()
    }
}

/// Builds the batch loss on `tape`: returns the scalar mean loss and the
/// `n x 1` per-example weighted losses.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    histories: &[&[HistoryItem]],
    rows: &[ScoreRequest],
    labels: &[f64],
    weights: &[f64; NUM_TASKS],
) -> Result<(Var, Var)> {
    let pr = model.forward(tape, store, histories, rows)?;
    let losses = tape.bce(pr.y, labels)?;
    let w = tape.constant(NUM_TASKS, 1, weights.to_vec())?;
    let per_example = tape.matmul(losses, w)?;
    Ok((tape.mean(per_example), per_example))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps: usize,
    pub examples: usize,
    pub mean_loss: f64,
    pub task_loss: [f64; NUM_TASKS],
    pub skipped: usize,
}

/// Model plus everything needed to continue training deterministically.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
}

impl Trainer {
    pub fn new(model: Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer_settings(), &model.params);
        Ok(Self {
            model,
            optimizer,
            config: config.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed),
            epoch: 0,
        })
    }

    /// One optimizer update on the mean loss of `batch`. Returns the loss
    /// before the update.
    pub fn step(&mut self, data: &TrainData, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let histories = batch.histories(data, self.model.config.seq_len);
        let mut tape = Tape::new();
        let (loss, per_example) = batch_loss(
            &mut tape,
            &self.model,
            &self.model.params,
            &histories,
            &batch.rows,
            &batch.labels,
            &self.config.task_weights,
        )?;
        if let Some(i) = tape.value(per_example).iter().position(|v| !v.is_finite()) {
            let e = &data.set.examples[batch.examples[i]];
            return Err(Error::Numeric(format!(
                "non-finite loss at example {} (user {}, item {}, history length {})",
                batch.examples[i], e.user, e.item, e.history_end
            )));
        }
        tape.backward(loss, &mut self.model.params)?;
        self.optimizer.step(&mut self.model.params);
        Ok(tape.scalar(loss))
    }

    /// One pass over shuffled example groups.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..data.set.groups.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut count, mut steps) = (0.0, 0usize, 0usize);
        let mut ids = Vec::with_capacity(self.config.batch_size + NUM_TASKS);
        let mut flush = |ids: &mut Vec<usize>, this: &mut Self| -> Result<()> {
            if ids.is_empty() {
                return Ok(());
            }
            let batch = Batch::new(data, ids.drain(..));
            let loss = this.step(data, &batch)?;
            total += loss * batch.len() as f64;
            count += batch.len();
            steps += 1;
            Ok(())
        };
        for g in order {
            ids.extend(data.set.groups[g].clone());
            if ids.len() >= self.config.batch_size {
                flush(&mut ids, self)?;
            }
        }
        flush(&mut ids, self)?;
        self.epoch += 1;
        let task_loss = self.task_losses(data)?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            steps,
            examples: count,
            mean_loss: if count > 0 { total / count as f64 } else { 0.0 },
            task_loss,
            skipped: data.set.skipped,
        })
    }

    /// Mean per-task loss of the current parameters over all examples.
    pub fn task_losses(&self, data: &TrainData) -> Result<[f64; NUM_TASKS]> {
        let mut sums = [0.0; NUM_TASKS];
        let n = data.set.examples.len();
        if n == 0 {
            return Ok(sums);
        }
        let chunk = 256;
        for start in (0..n).step_by(chunk) {
            let batch = Batch::new(data, start..(start + chunk).min(n));
            let histories = batch.histories(data, self.model.config.seq_len);
            let ys = self.model.predict(&histories, &batch.rows)?;
            for (y, l) in ys.iter().zip(batch.labels.chunks(NUM_TASKS)) {
                for k in 0..NUM_TASKS {
                    sums[k] += task_loss(y[k], l[k]);
                }
            }
        }
        Ok(sums.map(|s| s / n as f64))
    }
}

/// Trains a fresh model on `ds` and writes one JSON line of metrics per
/// epoch to `metrics`.
pub fn train(ds: &Dataset, config: &Config, metrics: &mut dyn Write) -> Result<Trainer> {
    config.validate()?;
    let model = Model::init(&config.model, Vocab::from_dataset(ds), config.training.seed)?;
    let data = TrainData::new(ds, &config.training);
    if data.set.examples.is_empty() {
        return Err(Error::Usage("no training interactions before the split".into()));
    }
    let mut trainer = Trainer::new(model, &config.training)?;
    for _ in 0..config.training.epochs {
        let m = trainer.run_epoch(&data)?;
        writeln!(metrics, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
    }
    Ok(trainer)
}
