//! The decoder stack and its segment loop.

mod adapt;
pub mod checkpoint;
mod config;
pub mod gradcheck;
mod params;
mod stack;
mod train;

pub use adapt::{adapt, AdaptedModel, Provenance};
pub use config::{default_lower_layers, ModelConfig};
pub use params::{checksum, is_adaptation_param, DecoderLayer, ModelParams, ParamMut, ParamRef};
pub use stack::{SegmentEvent, SegmentOutput};
pub use train::{
    document_gradients, document_loss_pinned, Adam, Chunk, DocumentGradients, DocumentSampler, StepStats,
    TrainOptions,
};

use crate::cache::CacheBuffer;
use crate::error::{Error, Result};
use crate::retrieval::QueryCounter;

/// Which parameters an optimizer may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only projection, cache-attention and LoRA weights; the base is frozen.
    AdaptationOnly,
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::AdaptationOnly => is_adaptation_param(name),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Trainable::All => "all",
            Trainable::AdaptationOnly => "adaptation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub trainable: Trainable,
}

/// Per-token NLL of a document and its perplexity.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentScore {
    pub nll: Vec<f64>,
    pub perplexity: f64,
}

/// Model inputs and next-token targets for a document: the inputs are the
/// tokens shifted right behind a beginning-of-document id, so every real
/// token is scored.
pub fn document_io(tokens: &[u32], bos: u32) -> (Vec<u32>, Vec<Option<u32>>) {
    let mut inputs = Vec::with_capacity(tokens.len());
    if !tokens.is_empty() {
        inputs.push(bos);
        inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
    }
    (inputs, tokens.iter().map(|&t| Some(t)).collect())
}

impl Model {
    /// A cache-enabled model, randomly initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, true);
        Ok(Self {
            config,
            params,
            trainable: Trainable::All,
        })
    }

    /// A plain decoder with no projection or cache-attention weights.
    pub fn new_base(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, false);
        Ok(Self {
            config,
            params,
            trainable: Trainable::All,
        })
    }

    pub fn bos(&self) -> u32 {
        self.config.vocab_size as u32
    }

    pub fn has_cache_attention(&self) -> bool {
        self.params.projection.is_some()
    }

    pub fn new_cache(&self) -> Result<CacheBuffer> {
        CacheBuffer::new(self.config.cache_size, self.config.compressed)
    }

    /// Scores a whole document segment by segment. The cache, when given, is
    /// reset first so nothing leaks across documents.
    pub fn process_document_with(&self, tokens: &[u32], mut cache: Option<&mut CacheBuffer>) -> Result<DocumentScore> {
        if tokens.is_empty() {
            return Err(Error::EmptyDocument);
        }
        if let Some(c) = cache.as_deref_mut() {
            c.reset();
        }
        let (inputs, targets) = document_io(tokens, self.bos());
        self.check_targets(&targets)?;
        let counter = QueryCounter::default();
        let n = self.config.segment_len;
        let mut nll = Vec::with_capacity(tokens.len());
        for (seg_in, seg_tg) in inputs.chunks(n).zip(targets.chunks(n)) {
            let out = self.forward_segment(seg_in, seg_tg, cache.as_deref_mut(), &counter)?;
            nll.extend(out.nll);
        }
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        Ok(DocumentScore {
            nll,
            perplexity: mean.exp(),
        })
    }

    /// Scores a document with a fresh cache of the configured size, or with
    /// the cache disabled.
    pub fn process_document(&self, tokens: &[u32], use_cache: bool) -> Result<DocumentScore> {
        if use_cache && self.has_cache_attention() {
            let mut cache = self.new_cache()?;
            self.process_document_with(tokens, Some(&mut cache))
        } else {
            self.process_document_with(tokens, None)
        }
    }

    /// Greedy next-token prediction at every position of a document:
    /// `out[p]` is the model's argmax guess for `tokens[p]`.
    pub fn greedy_predictions(&self, tokens: &[u32], use_cache: bool) -> Result<Vec<u32>> {
        if tokens.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let mut cache = if use_cache && self.has_cache_attention() {
            Some(self.new_cache()?)
        } else {
            None
        };
        let (inputs, _) = document_io(tokens, self.bos());
        let counter = QueryCounter::default();
        let n = self.config.segment_len;
        let mut out = Vec::with_capacity(tokens.len());
        for seg in inputs.chunks(n) {
            let fwd = self.forward_segment_traced(seg, cache.as_mut(), &counter, None)?;
            for row in fwd.logits.rows() {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
                out.push(best.0 as u32);
            }
        }
        Ok(out)
    }

    /// Same weights, different cache capacity.
    pub fn with_cache_size(&self, cache_size: usize) -> Result<Self> {
        Ok(Self {
            config: self.config.with_cache_size(cache_size)?,
            ..self.clone()
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .tensors()
            .iter()
            .filter(|t| self.trainable.allows(&t.name))
            .map(|t| t.data.len())
            .sum()
    }
}
