use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture and cache hyperparameters.
///
/// Layers `1..=lower_layers` are plain decoder layers; the output of layer
/// `lower_layers` is compressed and used for retrieval, and layers
/// `lower_layers+1..=layers` are cache-augmented.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// L
    pub layers: usize,
    /// r
    pub lower_layers: usize,
    /// n, tokens per segment
    pub segment_len: usize,
    /// h
    pub hidden: usize,
    /// d
    pub compressed: usize,
    /// a
    pub heads: usize,
    /// f
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// k
    pub top_k: usize,
    /// w
    pub window: usize,
    /// c
    pub context: usize,
    /// m
    pub cache_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

/// `⌊3L/4⌋`
pub fn default_lower_layers(layers: usize) -> usize {
    3 * layers / 4
}

impl ModelConfig {
    /// Desk-scale configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            lower_layers: 3,
            segment_len: 32,
            hidden: 64,
            compressed: 16,
            heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            vocab_size: 128,
            top_k: 4,
            window: 2,
            context: 2,
            cache_size: 256,
            lora_rank: 16,
            lora_alpha: 32.0,
            seed: 0,
        }
    }

    /// Neighbour slots each token attends over: `k · w · c`.
    pub fn neighbor_slots(&self) -> usize {
        self.top_k * self.window * self.context
    }

    pub fn is_augmented(&self, layer: usize) -> bool {
        layer >= self.lower_layers
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("layers", self.layers),
            ("segment_len", self.segment_len),
            ("hidden", self.hidden),
            ("compressed", self.compressed),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("top_k", self.top_k),
            ("window", self.window),
            ("context", self.context),
            ("cache_size", self.cache_size),
            ("lora_rank", self.lora_rank),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.lower_layers == 0 || self.lower_layers >= self.layers {
            return bad(format!(
                "lower_layers must satisfy 1 <= r < L, got r={} L={}",
                self.lower_layers, self.layers
            ));
        }
        if self.compressed > self.hidden {
            return bad(format!(
                "compressed dim {} exceeds hidden {}",
                self.compressed, self.hidden
            ));
        }
        if self.segment_len > self.cache_size {
            return bad(format!(
                "segment_len {} exceeds cache_size {}",
                self.segment_len, self.cache_size
            ));
        }
        if self.vocab_size >= u32::MAX as usize {
            return bad("vocab_size too large".into());
        }
        if !self.lora_alpha.is_finite() {
            return bad("lora_alpha must be finite".into());
        }
        Ok(())
    }

    pub fn with_cache_size(&self, cache_size: usize) -> Result<Self> {
        let cfg = Self {
            cache_size,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("lower_layers", self.lower_layers.to_string()),
            ("segment_len", self.segment_len.to_string()),
            ("hidden", self.hidden.to_string()),
            ("compressed", self.compressed.to_string()),
            ("heads", self.heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("top_k", self.top_k.to_string()),
            ("window", self.window.to_string()),
            ("context", self.context.to_string()),
            ("cache_size", self.cache_size.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            ("lora_alpha", format!("{:?}", self.lora_alpha)),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Parses flat `key = value` text. `#` starts a comment. Unset keys keep
    /// their [`ModelConfig::toy`] value, except `lower_layers`, which
    /// defaults to `⌊3L/4⌋`. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if seen.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        let mut cfg = Self::toy();
        let mut lower_set = false;
        for (key, value) in &seen {
            fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
                value
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
            }
            match key.as_str() {
                "layers" => cfg.layers = num(key, value)?,
                "lower_layers" => {
                    cfg.lower_layers = num(key, value)?;
                    lower_set = true;
                }
                "segment_len" => cfg.segment_len = num(key, value)?,
                "hidden" => cfg.hidden = num(key, value)?,
                "compressed" => cfg.compressed = num(key, value)?,
                "heads" => cfg.heads = num(key, value)?,
                "head_dim" => cfg.head_dim = num(key, value)?,
                "ffn_dim" => cfg.ffn_dim = num(key, value)?,
                "vocab_size" => cfg.vocab_size = num(key, value)?,
                "top_k" => cfg.top_k = num(key, value)?,
                "window" => cfg.window = num(key, value)?,
                "context" => cfg.context = num(key, value)?,
                "cache_size" => cfg.cache_size = num(key, value)?,
                "lora_rank" => cfg.lora_rank = num(key, value)?,
                "lora_alpha" => cfg.lora_alpha = num(key, value)?,
                "seed" => cfg.seed = num(key, value)?,
                other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
            }
        }
        if !lower_set {
            cfg.lower_layers = default_lower_layers(cfg.layers);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Single-line `key=value` form used inside checkpoints.
    pub fn to_inline(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_inline(line: &str) -> Result<Self> {
        Self::parse(&line.split_whitespace().collect::<Vec<_>>().join("\n"))
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
