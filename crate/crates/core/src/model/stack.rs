//! One segment through the decoder stack, forward and backward.

use ndarray::{s, Array2, Array3, ArrayView2};

use super::params::{DecoderLayer, ModelParams};
use super::Model;
use crate::attention::{self, CacheAttentionTape, FeedForwardTape, SelfAttentionTape};
use crate::cache::CacheBuffer;
use crate::error::{Error, Result};
use crate::ops::{self, LayerNormTape};
use crate::retrieval::{self, Neighbors, QueryCounter, RetrievalSet, Slot};

/// Steps of a segment forward pass, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentEvent {
    StandardLayer(usize),
    Compress,
    Retrieve,
    AugmentedLayer(usize),
    LmHead,
    CacheUpdate,
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub logits: Array2<f64>,
    /// Per-token negative log-likelihood; 0 where there is no target.
    pub nll: Vec<f64>,
    /// Cache epoch after the update, when a cache was used.
    pub cache_epoch: Option<u64>,
    pub query_delta: u64,
    pub retrieval: Option<RetrievalSet>,
    pub events: Vec<SegmentEvent>,
}

pub(crate) struct LayerTape {
    norm1: LayerNormTape,
    attn: SelfAttentionTape,
    cache: Option<CacheAttentionTape>,
    norm2: LayerNormTape,
    ffn: FeedForwardTape,
}

pub(crate) struct SegmentTape {
    inputs: Vec<u32>,
    layers: Vec<LayerTape>,
    lower_output: Option<Array2<f64>>,
    /// Extended neighbour set the augmented layers attended over.
    pub(crate) neighbors: Option<Neighbors>,
    /// Insertion id of this segment's first compressed state.
    pub(crate) first_entry_id: u64,
    final_norm: LayerNormTape,
    final_hidden: Array2<f64>,
}

impl SegmentTape {
    pub(crate) fn len(&self) -> usize {
        self.inputs.len()
    }
}

pub(crate) struct SegmentForward {
    pub logits: Array2<f64>,
    pub tape: SegmentTape,
    pub retrieval: Option<RetrievalSet>,
    /// Window-expanded indices used, for replaying the same retrieval.
    pub expanded: Option<Array2<Slot>>,
    pub events: Vec<SegmentEvent>,
    pub cache_epoch: Option<u64>,
}

fn layer_forward(
    layer: &DecoderLayer,
    x: ArrayView2<'_, f64>,
    neighbors: Option<&Neighbors>,
) -> Result<(Array2<f64>, LayerTape)> {
    let (xn1, norm1) = ops::layer_norm(x, &layer.norm1);
    let (sa, attn) = layer.self_attn.forward(xn1.view());
    let mut x1 = &x + &sa;
    let mut cache = None;
    if let (Some(weights), Some(nb)) = (&layer.cache_attn, neighbors) {
        let (ca, tape) = weights.forward(xn1.view(), nb)?;
        if tape.is_some() {
            x1 += &ca;
        }
        cache = tape;
    }
    let (xn2, norm2) = ops::layer_norm(x1.view(), &layer.norm2);
    let (y, ffn) = layer.ffn.forward(xn2.view())?;
    let out = &x1 + &y;
    Ok((
        out,
        LayerTape {
            norm1,
            attn,
            cache,
            norm2,
            ffn,
        },
    ))
}

/// Returns the input gradient and, when cache-attention ran, the gradient
/// with respect to its neighbour states.
fn layer_backward(
    layer: &DecoderLayer,
    dout: ArrayView2<'_, f64>,
    tape: &LayerTape,
    grads: &mut DecoderLayer,
) -> (Array2<f64>, Option<Array3<f64>>) {
    let dxn2 = layer.ffn.backward(dout, &tape.ffn, &mut grads.ffn);
    let dx1 = &dout + &ops::layer_norm_backward(dxn2.view(), &tape.norm2, &layer.norm2, &mut grads.norm2);
    let mut dxn1 = layer.self_attn.backward(dx1.view(), &tape.attn, &mut grads.self_attn);
    let mut dctx = None;
    if let (Some(weights), Some(ctape), Some(g)) = (&layer.cache_attn, &tape.cache, grads.cache_attn.as_mut()) {
        let (dinput, dneighbors) = weights.backward(dx1.view(), ctape, g);
        dxn1 += &dinput;
        dctx = Some(dneighbors);
    }
    let dx = &dx1 + &ops::layer_norm_backward(dxn1.view(), &tape.norm1, &layer.norm1, &mut grads.norm1);
    (dx, dctx)
}

impl Model {
    pub(crate) fn check_inputs(&self, inputs: &[u32]) -> Result<()> {
        let cfg = &self.config;
        if inputs.is_empty() || inputs.len() > cfg.segment_len {
            return Err(Error::ShapeMismatch(format!(
                "segment of {} tokens, expected 1..={}",
                inputs.len(),
                cfg.segment_len
            )));
        }
        // the beginning-of-document id, vocab_size, is a legal input
        if let Some(&id) = inputs.iter().find(|&&id| id as usize > cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Forward pass over one segment. When `cache` is given, the compressed
    /// states of layer `r` are used to retrieve neighbours (or `pinned`
    /// window-expanded indices are gathered instead) and then appended to
    /// the cache after the augmented layers have run.
    pub(crate) fn forward_segment_traced(
        &self,
        inputs: &[u32],
        cache: Option<&mut CacheBuffer>,
        counter: &QueryCounter,
        pinned: Option<&Array2<Slot>>,
    ) -> Result<SegmentForward> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let p = &self.params;
        let n = inputs.len();
        let mut events = Vec::with_capacity(cfg.layers + 4);

        let mut x = Array2::zeros((n, cfg.hidden));
        for (i, &id) in inputs.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&p.token_embedding.row(id as usize));
            row += &p.position_embedding.row(i);
        }

        let mut layer_tapes = Vec::with_capacity(cfg.layers);
        for (j, layer) in p.layers.iter().take(cfg.lower_layers).enumerate() {
            let (out, tape) = layer_forward(layer, x.view(), None)?;
            x = out;
            layer_tapes.push(tape);
            events.push(SegmentEvent::StandardLayer(j + 1));
        }

        let mut compressed = None;
        let mut neighbors = None;
        let mut retrieval_set = None;
        let mut expanded = None;
        let mut first_entry_id = 0;
        let mut lower_output = None;
        let cache = match (cache, &p.projection) {
            (Some(cache), Some(projection)) => {
                if cache.dim() != cfg.compressed {
                    return Err(Error::DimensionMismatch {
                        expected: cfg.compressed,
                        actual: cache.dim(),
                        context: "cache dim vs compressed size",
                    });
                }
                let c = attention::compress(x.view(), projection)?;
                events.push(SegmentEvent::Compress);
                let snapshot = cache.snapshot();
                first_entry_id = cache.epoch();
                let per_token = match pinned {
                    None => {
                        let set = retrieval::retrieve(c.view(), &snapshot, cfg.top_k, cfg.window, counter)?;
                        expanded = Some(set.neighbors.indices.clone());
                        let nb = set.neighbors.clone();
                        retrieval_set = Some(set);
                        nb
                    }
                    Some(indices) => {
                        counter.record(n as u64, n as u64);
                        expanded = Some(indices.clone());
                        retrieval::gather_states(indices, &snapshot)?
                    }
                };
                events.push(SegmentEvent::Retrieve);
                neighbors = Some(retrieval::extend_context(&per_token, cfg.context)?);
                compressed = Some(c);
                lower_output = Some(x.clone());
                Some(cache)
            }
            (Some(_), None) => {
                return Err(Error::InvalidConfig(
                    "model has no compression projection; run it without a cache".into(),
                ))
            }
            (None, _) => None,
        };

        for (j, layer) in p.layers.iter().enumerate().skip(cfg.lower_layers) {
            let (out, tape) = layer_forward(layer, x.view(), neighbors.as_ref())?;
            x = out;
            layer_tapes.push(tape);
            events.push(SegmentEvent::AugmentedLayer(j + 1));
        }

        let (final_hidden, final_norm) = ops::layer_norm(x.view(), &p.final_norm);
        let logits = ops::linear(final_hidden.view(), &p.lm_head);
        events.push(SegmentEvent::LmHead);

        let mut cache_epoch = None;
        if let (Some(cache), Some(c)) = (cache, &compressed) {
            cache.update(c.view())?;
            events.push(SegmentEvent::CacheUpdate);
            cache_epoch = Some(cache.epoch());
        }

        Ok(SegmentForward {
            logits,
            tape: SegmentTape {
                inputs: inputs.to_vec(),
                layers: layer_tapes,
                lower_output,
                neighbors,
                first_entry_id,
                final_norm,
                final_hidden,
            },
            retrieval: retrieval_set,
            expanded,
            events,
            cache_epoch,
        })
    }

    /// Runs one segment: embed, lower layers, compress, retrieve, extend,
    /// augmented layers, LM head, then cache update. `inputs` are model
    /// inputs (the beginning-of-document id is `vocab_size`); `targets`
    /// holds the next-token label for each position, if any.
    pub fn forward_segment(
        &self,
        inputs: &[u32],
        targets: &[Option<u32>],
        cache: Option<&mut CacheBuffer>,
        counter: &QueryCounter,
    ) -> Result<SegmentOutput> {
        if targets.len() != inputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} inputs",
                targets.len(),
                inputs.len()
            )));
        }
        self.check_targets(targets)?;
        let before = counter.queries();
        let fwd = self.forward_segment_traced(inputs, cache, counter, None)?;
        let (nll, _) = ops::cross_entropy(fwd.logits.view(), targets);
        Ok(SegmentOutput {
            logits: fwd.logits,
            nll,
            cache_epoch: fwd.cache_epoch,
            query_delta: counter.queries() - before,
            retrieval: fwd.retrieval,
            events: fwd.events,
        })
    }

    pub(crate) fn check_targets(&self, targets: &[Option<u32>]) -> Result<()> {
        if let Some(&id) = targets
            .iter()
            .flatten()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Accumulates parameter gradients for one segment. `dcompressed` is the
    /// gradient reaching this segment's compressed states from later
    /// segments that attended over them. Returns the gradient with respect
    /// to the neighbour states this segment attended over.
    pub(crate) fn backward_segment(
        &self,
        tape: &SegmentTape,
        dlogits: ArrayView2<'_, f64>,
        dcompressed: Option<&Array2<f64>>,
        grads: &mut ModelParams,
    ) -> Option<Array3<f64>> {
        let cfg = &self.config;
        let p = &self.params;
        let dfinal = ops::linear_backward(dlogits, tape.final_hidden.view(), &p.lm_head, &mut grads.lm_head);
        let mut dx = ops::layer_norm_backward(dfinal.view(), &tape.final_norm, &p.final_norm, &mut grads.final_norm);

        let mut dneighbors: Option<Array3<f64>> = None;
        for j in (cfg.lower_layers..cfg.layers).rev() {
            let (dprev, dctx) = layer_backward(&p.layers[j], dx.view(), &tape.layers[j], &mut grads.layers[j]);
            dx = dprev;
            if let Some(dctx) = dctx {
                match dneighbors.as_mut() {
                    Some(acc) => *acc += &dctx,
                    None => dneighbors = Some(dctx),
                }
            }
        }

        if let (Some(dc), Some(h), Some(proj), Some(gproj)) = (
            dcompressed,
            &tape.lower_output,
            &p.projection,
            grads.projection.as_mut(),
        ) {
            dx += &ops::linear_backward(dc.view(), h.view(), &proj.w, &mut gproj.w);
        }

        for j in (0..cfg.lower_layers).rev() {
            let (dprev, _) = layer_backward(&p.layers[j], dx.view(), &tape.layers[j], &mut grads.layers[j]);
            dx = dprev;
        }

        let n = tape.len();
        for (i, &id) in tape.inputs.iter().enumerate() {
            let g = dx.row(i);
            let mut te = grads.token_embedding.row_mut(id as usize);
            te += &g;
        }
        let mut pe = grads.position_embedding.slice_mut(s![0..n, ..]);
        pe += &dx;
        dneighbors
    }
}
