//! Synthetic key-value recall documents.
//!
//! The vocabulary is split in three: keys `[0, V/2)`, values `[V/2, 3V/4)`
//! and filler `[3V/4, V)`. The first segment states `pairs` (key, value)
//! facts with distinct keys, each written `repeats` times in a fresh order,
//! and is padded with filler. Then come `gap` segments of filler, then a
//! query segment of equal-sized blocks, each filler followed by one key and
//! its value. A queried value can only be predicted from the first segment,
//! and no key repeats inside the query segment.

use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{document_io, Adam, Chunk, Model, StepStats, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct RecallTask {
    pub vocab_size: usize,
    pub segment_len: usize,
    pub pairs: usize,
    /// How often each fact is written in the first segment.
    pub repeats: usize,
    /// Filler segments between the pairs and the queries, inclusive range.
    pub min_gap: usize,
    pub max_gap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallDocument {
    pub tokens: Vec<u32>,
    /// Positions of the value tokens in the query segment.
    pub query_positions: Vec<usize>,
}

impl RecallDocument {
    /// Model inputs and targets with only the query values labelled.
    pub fn query_io(&self, bos: u32) -> (Vec<u32>, Vec<Option<u32>>) {
        let (inputs, all) = document_io(&self.tokens, bos);
        let mut targets = vec![None; all.len()];
        for &p in &self.query_positions {
            targets[p] = all[p];
        }
        (inputs, targets)
    }
}

impl RecallTask {
    /// Queries two or three segments after the facts, for the toy model.
    pub fn toy() -> Self {
        Self {
            vocab_size: 128,
            segment_len: 32,
            pairs: 4,
            repeats: 4,
            min_gap: 1,
            max_gap: 2,
        }
    }

    /// Same facts, `min_gap..=max_gap` filler segments.
    pub fn with_gap(&self, min_gap: usize, max_gap: usize) -> Self {
        Self {
            min_gap,
            max_gap,
            ..self.clone()
        }
    }

    pub fn keys(&self) -> Range<u32> {
        0..(self.vocab_size / 2) as u32
    }

    pub fn values(&self) -> Range<u32> {
        (self.vocab_size / 2) as u32..(3 * self.vocab_size / 4) as u32
    }

    pub fn filler(&self) -> Range<u32> {
        (3 * self.vocab_size / 4) as u32..self.vocab_size as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 || self.vocab_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "recall vocab_size must be a multiple of 4 and >= 8, got {}",
                self.vocab_size
            )));
        }
        let fits = self.pairs >= 1
            && self.repeats >= 1
            && 2 * self.pairs * self.repeats <= self.segment_len
            && self.segment_len / self.pairs >= 3
            && self.pairs <= self.keys().len();
        if !fits {
            return Err(Error::InvalidConfig(format!(
                "{} pairs x {} repeats do not fit a segment of {} with {} keys",
                self.pairs,
                self.repeats,
                self.segment_len,
                self.keys().len()
            )));
        }
        if self.min_gap > self.max_gap {
            return Err(Error::InvalidConfig("min_gap > max_gap".into()));
        }
        Ok(())
    }

    pub fn generate(&self, rng: &mut impl Rng) -> RecallDocument {
        let keys: Vec<u32> = self.keys().collect();
        let chosen: Vec<u32> = keys.choose_multiple(rng, self.pairs).cloned().collect();
        let mut pairs: Vec<(u32, u32)> = chosen.into_iter().map(|k| (k, rng.random_range(self.values()))).collect();
        let gap = rng.random_range(self.min_gap..=self.max_gap);
        let n = self.segment_len;
        let mut tokens = Vec::with_capacity((gap + 2) * n);
        for _ in 0..self.repeats {
            pairs.shuffle(rng);
            for &(k, v) in &pairs {
                tokens.push(k);
                tokens.push(v);
            }
        }
        while tokens.len() < (gap + 1) * n {
            tokens.push(rng.random_range(self.filler()));
        }
        pairs.shuffle(rng);
        let block = n / self.pairs;
        let mut query_positions = Vec::with_capacity(self.pairs);
        for &(k, v) in &pairs {
            for _ in 0..block - 2 {
                tokens.push(rng.random_range(self.filler()));
            }
            tokens.push(k);
            query_positions.push(tokens.len());
            tokens.push(v);
        }
        while tokens.len() < (gap + 2) * n {
            tokens.push(rng.random_range(self.filler()));
        }
        RecallDocument {
            tokens,
            query_positions,
        }
    }

    pub fn dataset(&self, count: usize, seed: u64) -> Vec<RecallDocument> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.generate(&mut rng)).collect()
    }
}

/// Fraction of query values predicted exactly by greedy decoding.
pub fn recall_accuracy(model: &Model, docs: &[RecallDocument], use_cache: bool) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for doc in docs {
        let predicted = model.greedy_predictions(&doc.tokens, use_cache)?;
        for &p in &doc.query_positions {
            hits += (predicted[p] == doc.tokens[p]) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDocument);
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallTraining {
    pub steps: usize,
    pub lanes: usize,
    pub seed: u64,
    /// Score only the query values instead of every next token.
    pub query_loss_only: bool,
    pub options: TrainOptions,
}

/// Trains on freshly generated documents, one whole document per lane per
/// step, each with its own empty cache. `on_step` sees every step's stats
/// and may stop training early by returning false.
pub fn train_recall(
    model: &mut Model,
    task: &RecallTask,
    schedule: &RecallTraining,
    mut on_step: impl FnMut(usize, &StepStats, &Model) -> bool,
) -> Result<usize> {
    task.validate()?;
    if task.vocab_size != model.config.vocab_size || task.segment_len != model.config.segment_len {
        return Err(Error::ShapeMismatch(format!(
            "recall task (vocab {}, n {}) does not match model (vocab {}, n {})",
            task.vocab_size, task.segment_len, model.config.vocab_size, model.config.segment_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut adam = Adam::new(&model.params);
    let mut caches = (0..schedule.lanes)
        .map(|_| model.new_cache())
        .collect::<Result<Vec<_>>>()?;
    for step in 0..schedule.steps {
        let batch: Vec<_> = (0..schedule.lanes)
            .map(|_| {
                let doc = task.generate(&mut rng);
                if schedule.query_loss_only {
                    doc.query_io(model.bos())
                } else {
                    document_io(&doc.tokens, model.bos())
                }
            })
            .collect();
        let mut chunks: Vec<Chunk<'_>> = batch
            .iter()
            .zip(caches.iter_mut())
            .map(|((inputs, targets), cache)| {
                cache.reset();
                Chunk {
                    cache: Some(cache),
                    inputs,
                    targets,
                }
            })
            .collect();
        let stats = model.train_step(&mut adam, &mut chunks, &schedule.options, step)?;
        if !on_step(step, &stats, model) {
            return Ok(step + 1);
        }
    }
    Ok(schedule.steps)
}
