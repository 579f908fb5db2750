//! The full ranking network: history encoder, context layer and
//! multi-task experts wired together over a shared parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::{check_slots, context_forward, ContextParams, ContextVocab, FeatureIds};
use crate::encoder::{encode_history, EncoderParams, HistoryItem, Pooling};
use crate::error::{Error, Result};
use crate::feedback::{Dataset, InteractionRecord, SideInfo, NUM_TASKS};
use crate::multitask::{assemble_input, predict_tasks, MultiTaskParams, TaskPredictions};
use crate::numerics::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// History window `L`.
    pub seq_len: usize,
    pub blocks: usize,
    pub slots: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub layer_norm_eps: f64,
    pub pooling: Pooling,
    /// False zeroes the history feedback channels.
    pub use_feedback: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            seq_len: 50,
            blocks: 2,
            slots: 8,
            experts: 4,
            expert_hidden: 64,
            expert_out: 32,
            layer_norm_eps: 1e-5,
            pooling: Pooling::Last,
            use_feedback: true,
        }
    }
}

impl ModelConfig {
    /// Width `D` of the context feature vector.
    pub fn feature_width(&self) -> usize {
        5 * self.dim
    }

    /// Width of the multi-task input `[Ẽ; e_h]`.
    pub fn input_width(&self) -> usize {
        self.feature_width() + self.dim + NUM_TASKS
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("seq_len", self.seq_len),
            ("blocks", self.blocks),
            ("experts", self.experts),
            ("expert_hidden", self.expert_hidden),
            ("expert_out", self.expert_out),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("model.layer_norm_eps must be positive".into()));
        }
        check_slots(self.feature_width(), self.slots)
    }
}

/// Sizes of every id space the model embeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub users: usize,
    pub items: usize,
    pub platforms: usize,
    pub ages: usize,
    pub locations: usize,
    pub categories: usize,
}

impl Vocab {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let c = ds.cardinalities();
        let side = ds.side();
        Self {
            users: c.users.max(1),
            items: c.items.max(1),
            platforms: c.platforms.max(1),
            ages: side.num_ages(),
            locations: side.num_locations(),
            categories: side.num_categories(),
        }
    }

    fn context(&self) -> ContextVocab {
        ContextVocab {
            users: self.users,
            items: self.items,
            platforms: self.platforms,
            ages: self.ages,
            locations: self.locations,
            categories: self.categories,
        }
    }

    pub fn as_array(&self) -> [usize; 6] {
        [self.users, self.items, self.platforms, self.ages, self.locations, self.categories]
    }

    pub fn from_array(a: [usize; 6]) -> Self {
        Self {
            users: a[0],
            items: a[1],
            platforms: a[2],
            ages: a[3],
            locations: a[4],
            categories: a[5],
        }
    }
}

/// One row to score: which of the supplied histories to use, and the
/// context ids of the candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreRequest {
    pub history: usize,
    pub ids: FeatureIds,
}

pub fn feature_ids(side: &SideInfo, user: u32, item: u32, platform: u32) -> FeatureIds {
    FeatureIds {
        user,
        item,
        platform,
        age: side.age(user),
        location: side.location(user),
        category: side.category(item),
    }
}

/// A user's whole sequence with feedback flags attached; the history
/// before position `j` is `seq[..j]`.
pub fn flagged_sequence(ds: &Dataset, records: &[InteractionRecord]) -> Vec<HistoryItem> {
    records
        .iter()
        .map(|r| HistoryItem {
            item: r.item_id,
            flags: ds.flags(r),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub context: ContextParams,
    pub multitask: MultiTaskParams,
}

impl Model {
    /// Fresh parameters drawn from `N(0, std)` with a seeded generator;
    /// LayerNorm gains start at 1, biases at 0.
    pub fn init(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            let d = Normal::new(0.0, std).expect("positive std");
            Tensor::new(shape, (0..n).map(|_| d.sample(&mut rng)).collect())
                .expect("shape matches data")
                .requires_grad()
        };
        let mut params = ParamStore::new();
        let mut encoder =
            EncoderParams::register(&mut params, vocab.items, config.dim, config.seq_len, config.blocks, &mut init)?;
        configure_encoder(&mut encoder, config);
        let context = ContextParams::register(&mut params, vocab.context(), config.dim, config.slots, &mut init)?;
        let multitask = MultiTaskParams::register(
            &mut params,
            config.input_width(),
            config.experts,
            config.expert_hidden,
            config.expert_out,
            &mut init,
        )?;
        Ok(Self {
            config: config.clone(),
            vocab,
            params,
            encoder,
            context,
            multitask,
        })
    }

    /// Wraps an existing store, checking every tensor name and shape.
    pub fn from_params(config: &ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut encoder = EncoderParams::bind(&params, config.dim, config.seq_len, config.blocks)?;
        if encoder.num_items != vocab.items {
            return Err(Error::Schema(format!(
                "encoder has {} items, vocabulary {}",
                encoder.num_items, vocab.items
            )));
        }
        configure_encoder(&mut encoder, config);
        let context = ContextParams::bind(&params, vocab.context(), config.dim, config.slots)?;
        let multitask = MultiTaskParams::bind(
            &params,
            config.input_width(),
            config.experts,
            config.expert_hidden,
            config.expert_out,
        )?;
        Ok(Self {
            config: config.clone(),
            vocab,
            params,
            encoder,
            context,
            multitask,
        })
    }

    /// Scores `rows` on `tape` against `store` (normally `self.params`).
    /// Each distinct history is encoded once.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        histories: &[&[HistoryItem]],
        rows: &[ScoreRequest],
    ) -> Result<TaskPredictions> {
        if rows.is_empty() {
            return Err(Error::Usage("nothing to score".into()));
        }
        let mut encoded = Vec::with_capacity(histories.len());
        for h in histories {
            encoded.push(encode_history(tape, store, &self.encoder, h, None, false)?.e_h);
        }
        let idx = rows
            .iter()
            .map(|r| {
                if r.history < histories.len() {
                    Ok(r.history)
                } else {
                    Err(Error::Index {
                        what: "history",
                        index: r.history,
                        bound: histories.len(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let all = tape.concat_rows(&encoded)?;
        let e_h = tape.select_rows(all, &idx)?;
        let ids: Vec<FeatureIds> = rows.iter().map(|r| r.ids).collect();
        let ctx = context_forward(tape, store, &self.context, &ids)?;
        let x = assemble_input(tape, ctx, e_h)?;
        predict_tasks(tape, store, &self.multitask, x)
    }

    /// Task probabilities per row, in (EVV, FVV, GVV) order.
    pub fn predict(&self, histories: &[&[HistoryItem]], rows: &[ScoreRequest]) -> Result<Vec<[f64; NUM_TASKS]>> {
        let mut tape = Tape::new();
        let pr = self.forward(&mut tape, &self.params, histories, rows)?;
        Ok(tape
            .value(pr.y)
            .chunks(NUM_TASKS)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }
}

fn configure_encoder(e: &mut EncoderParams, c: &ModelConfig) {
    e.eps = c.layer_norm_eps;
    e.pooling = c.pooling;
    e.use_feedback = c.use_feedback;
}
