//! Turning a plain pre-trained decoder into a cache-augmented one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::{Model, Trainable};
use crate::attention::{CacheAttentionWeights, ProjectionWeights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub model: Model,
    pub provenance: Provenance,
}

/// Adds a random projection, cache-attention weights duplicated from each
/// augmented layer's self-attention, and zero-initialized LoRA adapters on
/// the augmented layers' FFNs. Everything that existed before is frozen.
///
/// Keys and values read compressed states, so their duplicated maps are
/// composed with `W_pᵀ`: `W_k^c = W_k · W_pᵀ` is the self-attention key
/// map applied to `W_pᵀ c`. Queries and the output map are copied as is.
pub fn adapt(base: &Model, config: &ModelConfig) -> Result<AdaptedModel> {
    config.validate()?;
    let b = &base.config;
    let pairs = [
        ("layers", b.layers, config.layers),
        ("hidden", b.hidden, config.hidden),
        ("heads", b.heads, config.heads),
        ("head_dim", b.head_dim, config.head_dim),
        ("ffn_dim", b.ffn_dim, config.ffn_dim),
        ("vocab_size", b.vocab_size, config.vocab_size),
        ("segment_len", b.segment_len, config.segment_len),
    ];
    for (name, have, want) in pairs {
        if have != want {
            return Err(Error::ShapeMismatch(format!(
                "base model {name}={have}, adaptation config {name}={want}"
            )));
        }
    }
    if base.params.layers.len() != config.layers {
        return Err(Error::ShapeMismatch(format!(
            "base model has {} layers, config wants {}",
            base.params.layers.len(),
            config.layers
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let projection = ProjectionWeights::random(&mut rng, config.hidden, config.compressed);
    let mut params = base.params.clone();
    for (j, layer) in params.layers.iter_mut().enumerate() {
        if !config.is_augmented(j) {
            continue;
        }
        let sa = &layer.self_attn;
        let lift = projection.w.t();
        layer.cache_attn = Some(CacheAttentionWeights {
            heads: sa.heads,
            wq: sa.wq.clone(),
            wk: sa.wk.dot(&lift),
            wv: sa.wv.dot(&lift),
            wo: sa.wo.clone(),
        });
        layer.ffn.attach_lora(&mut rng, config.lora_rank, config.lora_alpha);
    }
    params.projection = Some(projection);
    Ok(AdaptedModel {
        model: Model {
            config: config.clone(),
            params,
            trainable: Trainable::AdaptationOnly,
        },
        provenance: Provenance {
            lora_rank: config.lora_rank,
            lora_alpha: config.lora_alpha,
            note: format!(
                "cache-attention duplicated from self-attention of layers {}..={}; projection uniform(±1/√h), seed {}",
                config.lower_layers + 1,
                config.layers,
                config.seed
            ),
        },
    })
}
