use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{init_matrix, CacheAttentionWeights, FeedForward, ProjectionWeights, SelfAttentionWeights};
use crate::ops::LayerNorm;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: SelfAttentionWeights,
    pub cache_attn: Option<CacheAttentionWeights>,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn zeros_like(&self) -> Self {
        Self {
            norm1: zero_ln(&self.norm1),
            self_attn: self.self_attn.zeros_like(),
            cache_attn: self.cache_attn.as_ref().map(CacheAttentionWeights::zeros_like),
            norm2: zero_ln(&self.norm2),
            ffn: self.ffn.zeros_like(),
        }
    }
}

fn zero_ln(ln: &LayerNorm) -> LayerNorm {
    LayerNorm {
        gain: ndarray::Array1::zeros(ln.gain.raw_dim()),
        bias: ndarray::Array1::zeros(ln.bias.raw_dim()),
    }
}

/// All weights of the decoder stack. The token embedding has one extra row,
/// the beginning-of-document token at index `vocab_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    /// `vocab × h`
    pub lm_head: Array2<f64>,
    pub projection: Option<ProjectionWeights>,
}

/// A borrowed, flattened view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

macro_rules! walk_params {
    ($p:expr, $slice:ident, $iter:ident, $opt:ident, $item:ident) => {{
        let p = $p;
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr) => {{
                let shape = $t.shape().to_vec();
                out.push($item {
                    name: $name,
                    shape,
                    data: $t.$slice().expect("parameters are contiguous"),
                });
            }};
        }
        push!("token_embedding".to_string(), p.token_embedding);
        push!("position_embedding".to_string(), p.position_embedding);
        if let Some(proj) = p.projection.$opt() {
            push!("projection".to_string(), proj.w);
        }
        for (j, layer) in p.layers.$iter().enumerate() {
            push!(format!("layers.{j}.norm1.gain"), layer.norm1.gain);
            push!(format!("layers.{j}.norm1.bias"), layer.norm1.bias);
            push!(format!("layers.{j}.self_attn.wq"), layer.self_attn.wq);
            push!(format!("layers.{j}.self_attn.wk"), layer.self_attn.wk);
            push!(format!("layers.{j}.self_attn.wv"), layer.self_attn.wv);
            push!(format!("layers.{j}.self_attn.wo"), layer.self_attn.wo);
            if let Some(ca) = layer.cache_attn.$opt() {
                push!(format!("layers.{j}.cache_attn.wq"), ca.wq);
                push!(format!("layers.{j}.cache_attn.wk"), ca.wk);
                push!(format!("layers.{j}.cache_attn.wv"), ca.wv);
                push!(format!("layers.{j}.cache_attn.wo"), ca.wo);
            }
            push!(format!("layers.{j}.norm2.gain"), layer.norm2.gain);
            push!(format!("layers.{j}.norm2.bias"), layer.norm2.bias);
            push!(format!("layers.{j}.ffn.w1"), layer.ffn.w1);
            push!(format!("layers.{j}.ffn.b1"), layer.ffn.b1);
            push!(format!("layers.{j}.ffn.w2"), layer.ffn.w2);
            push!(format!("layers.{j}.ffn.b2"), layer.ffn.b2);
            if let Some(l) = layer.ffn.lora_in.$opt() {
                push!(format!("layers.{j}.ffn.lora_in.down"), l.down);
                push!(format!("layers.{j}.ffn.lora_in.up"), l.up);
            }
            if let Some(l) = layer.ffn.lora_out.$opt() {
                push!(format!("layers.{j}.ffn.lora_out.down"), l.down);
                push!(format!("layers.{j}.ffn.lora_out.up"), l.up);
            }
        }
        push!("final_norm.gain".to_string(), p.final_norm.gain);
        push!("final_norm.bias".to_string(), p.final_norm.bias);
        push!("lm_head".to_string(), p.lm_head);
        out
    }};
}

impl ModelParams {
    /// Random initialization. With `with_cache` false the stack is a plain
    /// decoder: no projection and no cache-attention weights.
    pub fn init(config: &ModelConfig, with_cache: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let token_embedding = init_matrix(&mut rng, config.vocab_size + 1, h, 1.0);
        let position_embedding = init_matrix(&mut rng, config.segment_len, h, 0.5);
        // residual-branch outputs shrink with depth so the token identity
        // still dominates the hidden state at initialization
        let residual = 1.0 / ((2 * config.layers) as f64).sqrt();
        let layers = (0..config.layers)
            .map(|j| DecoderLayer {
                norm1: LayerNorm::new(h),
                self_attn: SelfAttentionWeights::random(&mut rng, h, config.heads, config.head_dim),
                cache_attn: (with_cache && config.is_augmented(j)).then(|| {
                    CacheAttentionWeights::random(&mut rng, h, config.compressed, config.heads, config.head_dim)
                }),
                norm2: LayerNorm::new(h),
                ffn: FeedForward::random(&mut rng, h, config.ffn_dim),
            })
            .map(|mut layer: DecoderLayer| {
                layer.self_attn.wo *= residual;
                layer.ffn.w2 *= residual;
                if let Some(ca) = layer.cache_attn.as_mut() {
                    ca.wo *= residual;
                }
                layer
            })
            .collect();
        let lm_head = init_matrix(&mut rng, config.vocab_size, h, 1.0 / (h as f64).sqrt());
        let projection = with_cache.then(|| ProjectionWeights::random(&mut rng, h, config.compressed));
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::new(h),
            lm_head,
            projection,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embedding: Array2::zeros(self.token_embedding.raw_dim()),
            position_embedding: Array2::zeros(self.position_embedding.raw_dim()),
            layers: self.layers.iter().map(DecoderLayer::zeros_like).collect(),
            final_norm: zero_ln(&self.final_norm),
            lm_head: Array2::zeros(self.lm_head.raw_dim()),
            projection: self.projection.as_ref().map(|p| ProjectionWeights {
                w: Array2::zeros(p.w.raw_dim()),
            }),
        }
    }

    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        walk_params!(self, as_slice, iter, as_ref, ParamRef)
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        walk_params!(self, as_slice_mut, iter_mut, as_mut, ParamMut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor (structures must match).
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum()
    }
}

/// Parameters updated by the adaptation procedure: the projection, the
/// cache-attention matrices, and the LoRA factors.
pub fn is_adaptation_param(name: &str) -> bool {
    name == "projection" || name.contains(".cache_attn.") || name.contains(".lora_")
}

/// Order-sensitive FNV-1a over the bit patterns of the selected tensors.
pub fn checksum(params: &ModelParams, select: impl Fn(&str) -> bool) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params.tensors() {
        if !select(&t.name) {
            continue;
        }
        for byte in t.name.bytes().chain(t.data.iter().flat_map(|x| x.to_bits().to_le_bytes())) {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}
