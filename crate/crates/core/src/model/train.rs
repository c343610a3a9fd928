//! Gradients over consecutive segments, the optimizer, and the step driver.
//!
//! A training chunk is a run of consecutive segments from one document that
//! shares one cache. Within a chunk, the loss of a later segment reaches the
//! compressed states it retrieved from earlier segments of the same chunk,
//! and through them the projection and the lower layers. States cached
//! before the chunk started are constants.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::ModelParams;
use super::stack::SegmentTape;
use super::{document_io, Model, Trainable};
use crate::cache::CacheBuffer;
use crate::error::{Error, Result};
use crate::ops;
use crate::retrieval::{QueryCounter, Slot};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub backprop_through_cache: bool,
    /// When false the cache is bypassed entirely (the ablation).
    pub use_cache: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
            backprop_through_cache: true,
            use_cache: true,
        }
    }
}

/// Fixed-rate Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    step: u64,
    first: ModelParams,
    second: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, trainable: Trainable, opts: &TrainOptions) {
        self.step += 1;
        let bc1 = 1.0 - opts.beta1.powi(self.step as i32);
        let bc2 = 1.0 - opts.beta2.powi(self.step as i32);
        let lr = opts.learning_rate;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
        {
            if !trainable.allows(&p.name) {
                continue;
            }
            for (((w, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = opts.beta1 * *m + (1.0 - opts.beta1) * g;
                *v = opts.beta2 * *v + (1.0 - opts.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + opts.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DocumentGradients {
    pub nll_sum: f64,
    pub tokens: usize,
    pub grads: ModelParams,
    /// Window-expanded indices used by each segment, when the cache was on.
    pub expanded: Vec<Option<Array2<Slot>>>,
}

fn target_count(targets: &[Option<u32>]) -> usize {
    targets.iter().filter(|t| t.is_some()).count()
}

/// Forward and backward over consecutive segments of one document.
///
/// Gradients are of `loss_scale · Σ NLL`. `pinned` replays earlier
/// retrieval decisions segment by segment instead of searching.
pub fn document_gradients(
    model: &Model,
    inputs: &[u32],
    targets: &[Option<u32>],
    mut cache: Option<&mut CacheBuffer>,
    pinned: Option<&[Option<Array2<Slot>>]>,
    loss_scale: f64,
    through_cache: bool,
) -> Result<DocumentGradients> {
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} inputs",
            targets.len(),
            inputs.len()
        )));
    }
    model.check_targets(targets)?;
    let n = model.config.segment_len;
    let counter = QueryCounter::default();
    let mut forwards: Vec<(SegmentTape, Array2<f64>)> = Vec::new();
    let mut expanded = Vec::new();
    let mut nll_sum = 0.0;
    for (s, (seg_in, seg_tg)) in inputs.chunks(n).zip(targets.chunks(n)).enumerate() {
        let pin = pinned.and_then(|p| p.get(s)).and_then(|p| p.as_ref());
        let fwd = model.forward_segment_traced(seg_in, cache.as_deref_mut(), &counter, pin)?;
        let (nll, mut dlogits) = ops::cross_entropy(fwd.logits.view(), seg_tg);
        nll_sum += nll.iter().sum::<f64>();
        dlogits *= loss_scale;
        expanded.push(fwd.expanded);
        forwards.push((fwd.tape, dlogits));
    }

    let d = model.config.compressed;
    let mut dcompressed: Vec<Option<Array2<f64>>> = vec![None; forwards.len()];
    let mut grads = model.params.zeros_like();
    for s in (0..forwards.len()).rev() {
        let (tape, dlogits) = &forwards[s];
        let dneighbors = model.backward_segment(tape, dlogits.view(), dcompressed[s].as_ref(), &mut grads);
        let (Some(dnb), Some(nb), true) = (dneighbors, &tape.neighbors, through_cache) else {
            continue;
        };
        for ((i, slot), id) in nb.entry_ids.indexed_iter() {
            let Some(id) = *id else { continue };
            // states from before this chunk are constants
            let Some(src) = (0..s).rev().find(|&t| {
                let start = forwards[t].0.first_entry_id;
                id >= start && id < start + forwards[t].0.len() as u64
            }) else {
                continue;
            };
            let row = (id - forwards[src].0.first_entry_id) as usize;
            let len = forwards[src].0.len();
            let acc = dcompressed[src].get_or_insert_with(|| Array2::zeros((len, d)));
            let mut dst = acc.row_mut(row);
            dst += &dnb.index_axis(Axis(0), i).row(slot);
        }
    }
    Ok(DocumentGradients {
        nll_sum,
        tokens: target_count(targets),
        grads,
        expanded,
    })
}

/// Summed NLL of consecutive segments with retrieval decisions replayed
/// from `pinned`; the cache is cloned, not modified.
pub fn document_loss_pinned(
    model: &Model,
    inputs: &[u32],
    targets: &[Option<u32>],
    cache: Option<&CacheBuffer>,
    pinned: &[Option<Array2<Slot>>],
) -> Result<f64> {
    let mut cache = cache.cloned();
    let n = model.config.segment_len;
    let counter = QueryCounter::default();
    let mut total = 0.0;
    for (s, (seg_in, seg_tg)) in inputs.chunks(n).zip(targets.chunks(n)).enumerate() {
        let pin = pinned.get(s).and_then(|p| p.as_ref());
        let fwd = model.forward_segment_traced(seg_in, cache.as_mut(), &counter, pin)?;
        total += ops::cross_entropy(fwd.logits.view(), seg_tg).0.iter().sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean NLL over the batch's target tokens.
    pub loss: f64,
    pub tokens: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One lane of a training batch: consecutive segments of one document.
pub struct Chunk<'a> {
    pub cache: Option<&'a mut CacheBuffer>,
    pub inputs: &'a [u32],
    pub targets: &'a [Option<u32>],
}

impl Model {
    /// Mean next-token cross-entropy over all lanes, gradients by backprop,
    /// one optimizer update. Lanes run in parallel; their gradients are
    /// summed in lane order so the result is deterministic.
    pub fn train_step(
        &mut self,
        optimizer: &mut Adam,
        chunks: &mut [Chunk<'_>],
        opts: &TrainOptions,
        step: usize,
    ) -> Result<StepStats> {
        let total: usize = chunks.iter().map(|c| target_count(c.targets)).sum();
        if total == 0 {
            return Err(Error::ShapeMismatch("training batch has no target tokens".into()));
        }
        let scale = 1.0 / total as f64;
        let model = &*self;
        let results: Vec<Result<DocumentGradients>> = chunks
            .par_iter_mut()
            .map(|chunk| {
                let cache = if opts.use_cache { chunk.cache.as_deref_mut() } else { None };
                document_gradients(
                    model,
                    chunk.inputs,
                    chunk.targets,
                    cache,
                    None,
                    scale,
                    opts.backprop_through_cache,
                )
            })
            .collect();
        let mut grads = self.params.zeros_like();
        let mut nll = 0.0;
        for r in results {
            let r = r?;
            nll += r.nll_sum;
            grads.add_scaled(&r.grads, 1.0);
        }
        let loss = nll / total as f64;
        let grad_norm = grads.squared_norm().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss={loss} grad_norm={grad_norm} tokens={total}"),
            });
        }
        if let Some(clip) = opts.clip_norm {
            if grad_norm > clip {
                let mut clipped = grads.zeros_like();
                clipped.add_scaled(&grads, clip / grad_norm);
                grads = clipped;
            }
        }
        optimizer.apply(&mut self.params, &grads, self.trainable, opts);
        Ok(StepStats {
            loss,
            tokens: total,
            grad_norm,
        })
    }
}

struct Lane {
    doc: usize,
    offset: usize,
    cache: CacheBuffer,
}

/// Feeds documents to a fixed number of lanes, a few segments at a time.
/// Each lane keeps its cache while it walks through a document and resets
/// it when it moves on to the next one.
pub struct DocumentSampler {
    docs: Vec<(Vec<u32>, Vec<Option<u32>>)>,
    order: Vec<usize>,
    next: usize,
    lanes: Vec<Lane>,
    segments_per_step: usize,
    rng: ChaCha8Rng,
}

impl DocumentSampler {
    pub fn new(model: &Model, docs: &[Vec<u32>], lanes: usize, segments_per_step: usize, seed: u64) -> Result<Self> {
        if docs.is_empty() || docs.iter().any(|d| d.is_empty()) {
            return Err(Error::EmptyDocument);
        }
        if lanes == 0 || segments_per_step == 0 {
            return Err(Error::InvalidConfig("lanes and segments_per_step must be >= 1".into()));
        }
        let docs: Vec<_> = docs.iter().map(|d| document_io(d, model.bos())).collect();
        let mut sampler = Self {
            order: (0..docs.len()).collect(),
            docs,
            next: 0,
            lanes: Vec::with_capacity(lanes),
            segments_per_step,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.order.shuffle(&mut sampler.rng);
        for _ in 0..lanes {
            let doc = sampler.next_doc();
            sampler.lanes.push(Lane {
                doc,
                offset: 0,
                cache: model.new_cache()?,
            });
        }
        Ok(sampler)
    }

    fn next_doc(&mut self) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }

    /// Trains on the next chunk of every lane.
    pub fn step(&mut self, model: &mut Model, optimizer: &mut Adam, opts: &TrainOptions, step: usize) -> Result<StepStats> {
        let span = self.segments_per_step * model.config.segment_len;
        let docs = &self.docs;
        let mut chunks: Vec<Chunk<'_>> = self
            .lanes
            .iter_mut()
            .map(|lane| {
                if lane.offset == 0 {
                    lane.cache.reset();
                }
                let (inputs, targets) = &docs[lane.doc];
                let end = (lane.offset + span).min(inputs.len());
                Chunk {
                    inputs: &inputs[lane.offset..end],
                    targets: &targets[lane.offset..end],
                    cache: Some(&mut lane.cache),
                }
            })
            .collect();
        let stats = model.train_step(optimizer, &mut chunks, opts, step)?;
        drop(chunks);
        for i in 0..self.lanes.len() {
            let len = self.docs[self.lanes[i].doc].0.len();
            let lane = &mut self.lanes[i];
            lane.offset = (lane.offset + span).min(len);
            if lane.offset == len {
                let doc = self.next_doc();
                let lane = &mut self.lanes[i];
                lane.doc = doc;
                lane.offset = 0;
            }
        }
        Ok(stats)
    }
}
