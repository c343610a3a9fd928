//! State compression, cache-attention, and the per-layer blocks that use them.
//!
//! Cache-attention is multi-head with the same head count `a` and head size
//! `f` as self-attention. Queries come from the normalized hidden states of
//! the current layer; keys and values from the retrieved compressed states.
//! Each token has its own neighbour set, so there is no causal mask, only
//! the validity mask of the retrieval.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::retrieval::Neighbors;

fn shape_err(what: impl Into<String>) -> Error {
    Error::ShapeMismatch(what.into())
}

pub(crate) fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// `W_p`, stored `d × h`; `C = H · W_pᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w: Array2<f64>,
}

impl ProjectionWeights {
    /// Uniform in `±1/√h`.
    pub fn random(rng: &mut impl Rng, hidden: usize, compressed: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w: init_matrix(rng, compressed, hidden, bound),
        }
    }

    pub fn compressed_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Linear compression of hidden states, no bias or activation.
pub fn compress(hidden: ArrayView2<'_, f64>, projection: &ProjectionWeights) -> Result<Array2<f64>> {
    if hidden.ncols() != projection.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: projection.hidden_dim(),
            actual: hidden.ncols(),
            context: "compression input",
        });
    }
    Ok(ops::linear(hidden, &projection.w))
}

/// Scaled dot-product attention of each token's query over its own neighbour
/// slots.
///
/// Shapes: `q` is `n × a × f`, `keys`/`values` are `n × a × N × f` and `mask`
/// is `n × N`. Returns the `n × a × f` output and the `n × a × N`
/// probabilities. Tokens with no valid slot produce zeros.
pub fn cache_attention(
    q: ArrayView3<'_, f64>,
    keys: ArrayView4<'_, f64>,
    values: ArrayView4<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (n, a, f) = q.dim();
    let (kn, ka, slots, kf) = keys.dim();
    if (kn, ka, kf) != (n, a, f) || values.dim() != keys.dim() || mask.dim() != (n, slots) {
        return Err(shape_err(format!(
            "cache attention q {:?}, keys {:?}, values {:?}, mask {:?}",
            q.dim(),
            keys.dim(),
            values.dim(),
            mask.dim()
        )));
    }
    let scale = 1.0 / (f as f64).sqrt();
    let mut out = Array3::zeros((n, a, f));
    let mut probs = Array3::zeros((n, a, slots));
    let mut scores = vec![0.0; slots];
    for i in 0..n {
        let valid = mask.row(i);
        if !valid.iter().any(|&m| m) {
            continue;
        }
        for h in 0..a {
            let qv = q.slice(ndarray::s![i, h, ..]);
            let kh = keys.slice(ndarray::s![i, h, .., ..]);
            for (s, score) in scores.iter_mut().enumerate() {
                *score = if valid[s] { qv.dot(&kh.row(s)) * scale } else { 0.0 };
            }
            ops::masked_softmax_inplace(&mut scores, |s| valid[s]);
            let mut o = out.slice_mut(ndarray::s![i, h, ..]);
            let vh = values.slice(ndarray::s![i, h, .., ..]);
            for (s, &p) in scores.iter().enumerate() {
                if p != 0.0 {
                    o.scaled_add(p, &vh.row(s));
                }
                probs[[i, h, s]] = p;
            }
        }
    }
    Ok((out, probs))
}

/// Gradients of [`cache_attention`] with respect to `q`, `keys` and `values`.
pub fn cache_attention_backward(
    dout: ArrayView3<'_, f64>,
    q: ArrayView3<'_, f64>,
    keys: ArrayView4<'_, f64>,
    values: ArrayView4<'_, f64>,
    probs: ArrayView3<'_, f64>,
) -> (Array3<f64>, Array4<f64>, Array4<f64>) {
    let (n, a, f) = q.dim();
    let slots = probs.len_of(Axis(2));
    let scale = 1.0 / (f as f64).sqrt();
    let mut dq = Array3::zeros((n, a, f));
    let mut dk = Array4::zeros((n, a, slots, f));
    let mut dv = Array4::zeros((n, a, slots, f));
    let mut dscore = vec![0.0; slots];
    for i in 0..n {
        for h in 0..a {
            let p = probs.slice(ndarray::s![i, h, ..]);
            if p.iter().all(|&x| x == 0.0) {
                continue;
            }
            let g = dout.slice(ndarray::s![i, h, ..]);
            let vh = values.slice(ndarray::s![i, h, .., ..]);
            let mut dot = 0.0;
            for s in 0..slots {
                let dp = g.dot(&vh.row(s));
                dscore[s] = p[s] * dp;
                dot += dscore[s];
                dv.slice_mut(ndarray::s![i, h, s, ..]).scaled_add(p[s], &g);
            }
            let qv = q.slice(ndarray::s![i, h, ..]);
            let kh = keys.slice(ndarray::s![i, h, .., ..]);
            let mut dqv = dq.slice_mut(ndarray::s![i, h, ..]);
            for s in 0..slots {
                let ds = (dscore[s] - p[s] * dot) * scale;
                if ds != 0.0 {
                    dqv.scaled_add(ds, &kh.row(s));
                    dk.slice_mut(ndarray::s![i, h, s, ..]).scaled_add(ds, &qv);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// `W_q`, `W_k`, `W_v` and `W_o` of one cache-augmented layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheAttentionWeights {
    pub heads: usize,
    /// `a·f × h`
    pub wq: Array2<f64>,
    /// `a·f × d`
    pub wk: Array2<f64>,
    /// `a·f × d`
    pub wv: Array2<f64>,
    /// `h × a·f`
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct CacheAttentionTape {
    input: Array2<f64>,
    /// `(n·N) × d`
    context: Array2<f64>,
    q: Array3<f64>,
    /// `n × a × N × f`
    keys: Array4<f64>,
    values: Array4<f64>,
    probs: Array3<f64>,
    attended: Array2<f64>,
    slots: usize,
}

impl CacheAttentionWeights {
    pub fn random(rng: &mut impl Rng, hidden: usize, compressed: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        Self {
            heads,
            wq: init_matrix(rng, inner, hidden, 1.0 / (hidden as f64).sqrt()),
            wk: init_matrix(rng, inner, compressed, 1.0 / (compressed as f64).sqrt()),
            wv: init_matrix(rng, inner, compressed, 1.0 / (compressed as f64).sqrt()),
            wo: init_matrix(rng, hidden, inner, 1.0 / (inner as f64).sqrt()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.nrows() / self.heads
    }

    /// Cache-attention output projected back to the hidden width. `None` as
    /// tape means every slot was masked and the output is exactly zero.
    pub fn forward(
        &self,
        input: ArrayView2<'_, f64>,
        neighbors: &Neighbors,
    ) -> Result<(Array2<f64>, Option<CacheAttentionTape>)> {
        let n = input.nrows();
        let hidden = self.wo.nrows();
        if neighbors.num_tokens() != n || neighbors.states.len_of(Axis(2)) != self.wk.ncols() {
            return Err(shape_err(format!(
                "cache attention over {:?} neighbours for {n} tokens, d={}",
                neighbors.states.dim(),
                self.wk.ncols()
            )));
        }
        if !neighbors.any_valid() {
            return Ok((Array2::zeros((n, hidden)), None));
        }
        let (a, f) = (self.heads, self.head_dim());
        let slots = neighbors.num_slots();
        let context = neighbors
            .states
            .to_shape((n * slots, self.wk.ncols()))
            .expect("contiguous neighbour tensor")
            .to_owned();
        let q = ops::linear(input, &self.wq)
            .into_shape_with_order((n, a, f))
            .expect("query reshape");
        let split = |flat: Array2<f64>| -> Array4<f64> {
            flat.into_shape_with_order((n, slots, a, f))
                .expect("slot reshape")
                .permuted_axes([0, 2, 1, 3])
                .as_standard_layout()
                .into_owned()
        };
        let keys = split(ops::linear(context.view(), &self.wk));
        let values = split(ops::linear(context.view(), &self.wv));
        let (attended, probs) = cache_attention(q.view(), keys.view(), values.view(), neighbors.mask.view())?;
        let attended = attended.into_shape_with_order((n, a * f)).expect("output reshape");
        let out = ops::linear(attended.view(), &self.wo);
        Ok((
            out,
            Some(CacheAttentionTape {
                input: input.to_owned(),
                context,
                q,
                keys,
                values,
                probs,
                attended,
                slots,
            }),
        ))
    }

    /// Accumulates weight gradients into `grads`; returns the gradient with
    /// respect to the layer input and to the neighbour states (`n × N × d`).
    pub fn backward(
        &self,
        dout: ArrayView2<'_, f64>,
        tape: &CacheAttentionTape,
        grads: &mut CacheAttentionWeights,
    ) -> (Array2<f64>, Array3<f64>) {
        let n = dout.nrows();
        let (a, f) = (self.heads, self.head_dim());
        let slots = tape.slots;
        let dattended = ops::linear_backward(dout, tape.attended.view(), &self.wo, &mut grads.wo);
        let dattended = dattended.into_shape_with_order((n, a, f)).expect("reshape");
        let (dq, dk, dv) = cache_attention_backward(
            dattended.view(),
            tape.q.view(),
            tape.keys.view(),
            tape.values.view(),
            tape.probs.view(),
        );
        let merge = |g: Array4<f64>| -> Array2<f64> {
            g.permuted_axes([0, 2, 1, 3])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n * slots, a * f))
                .expect("merge reshape")
        };
        let dq = dq.into_shape_with_order((n, a * f)).expect("reshape");
        let dinput = ops::linear_backward(dq.view(), tape.input.view(), &self.wq, &mut grads.wq);
        let mut dcontext = ops::linear_backward(merge(dk).view(), tape.context.view(), &self.wk, &mut grads.wk);
        dcontext += &ops::linear_backward(merge(dv).view(), tape.context.view(), &self.wv, &mut grads.wv);
        let dcontext = dcontext
            .into_shape_with_order((n, slots, self.wk.ncols()))
            .expect("context reshape");
        (dinput, dcontext)
    }
}

/// Causal multi-head self-attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionWeights {
    pub heads: usize,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct SelfAttentionTape {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attended: Array2<f64>,
}

impl SelfAttentionWeights {
    pub fn random(rng: &mut impl Rng, hidden: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        let b_in = 1.0 / (hidden as f64).sqrt();
        Self {
            heads,
            wq: init_matrix(rng, inner, hidden, b_in),
            wk: init_matrix(rng, inner, hidden, b_in),
            wv: init_matrix(rng, inner, hidden, b_in),
            wo: init_matrix(rng, hidden, inner, 1.0 / (inner as f64).sqrt()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
        }
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>) -> (Array2<f64>, SelfAttentionTape) {
        let q = ops::linear(input, &self.wq);
        let k = ops::linear(input, &self.wk);
        let v = ops::linear(input, &self.wv);
        let (attended, probs) = ops::causal_attention(q.view(), k.view(), v.view(), self.heads);
        let out = ops::linear(attended.view(), &self.wo);
        (
            out,
            SelfAttentionTape {
                input: input.to_owned(),
                q,
                k,
                v,
                probs,
                attended,
            },
        )
    }

    pub fn backward(
        &self,
        dout: ArrayView2<'_, f64>,
        tape: &SelfAttentionTape,
        grads: &mut SelfAttentionWeights,
    ) -> Array2<f64> {
        let dattended = ops::linear_backward(dout, tape.attended.view(), &self.wo, &mut grads.wo);
        let (dq, dk, dv) = ops::causal_attention_backward(
            dattended.view(),
            tape.q.view(),
            tape.k.view(),
            tape.v.view(),
            &tape.probs,
        );
        let mut dx = ops::linear_backward(dq.view(), tape.input.view(), &self.wq, &mut grads.wq);
        dx += &ops::linear_backward(dk.view(), tape.input.view(), &self.wk, &mut grads.wk);
        dx += &ops::linear_backward(dv.view(), tape.input.view(), &self.wv, &mut grads.wv);
        dx
    }
}

/// Low-rank additive update `(alpha / rank) · up · down` on one linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub alpha: f64,
    /// `rank × in`
    pub down: Array2<f64>,
    /// `out × rank`, zero at initialization.
    pub up: Array2<f64>,
}

impl LoraAdapter {
    pub fn new(rng: &mut impl Rng, rank: usize, alpha: f64, input: usize, output: usize) -> Self {
        Self {
            alpha,
            down: init_matrix(rng, rank, input, 1.0 / (input as f64).sqrt()),
            up: Array2::zeros((output, rank)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            alpha: self.alpha,
            down: Array2::zeros(self.down.raw_dim()),
            up: Array2::zeros(self.up.raw_dim()),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// The dense matrix this adapter adds to the base weight.
    pub fn delta_weight(&self) -> Array2<f64> {
        self.up.dot(&self.down) * self.scale()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let mid = ops::linear(x, &self.down);
        let out = ops::linear(mid.view(), &self.up) * self.scale();
        (out, mid)
    }

    fn backward(
        &self,
        dy: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
        mid: &Array2<f64>,
        grads: &mut LoraAdapter,
    ) -> Array2<f64> {
        let dy = &dy * self.scale();
        let dmid = ops::linear_backward(dy.view(), mid.view(), &self.up, &mut grads.up);
        ops::linear_backward(dmid.view(), x, &self.down, &mut grads.down)
    }
}

/// Two-layer GELU feed-forward block with optional LoRA on both maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    /// `ffn × h`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `h × ffn`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub lora_in: Option<LoraAdapter>,
    pub lora_out: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
pub struct FeedForwardTape {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    lora_in_mid: Option<Array2<f64>>,
    lora_out_mid: Option<Array2<f64>>,
}

impl FeedForward {
    pub fn random(rng: &mut impl Rng, hidden: usize, inner: usize) -> Self {
        Self {
            w1: init_matrix(rng, inner, hidden, 1.0 / (hidden as f64).sqrt()),
            b1: Array1::zeros(inner),
            w2: init_matrix(rng, hidden, inner, 1.0 / (inner as f64).sqrt()),
            b2: Array1::zeros(hidden),
            lora_in: None,
            lora_out: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            lora_in: self.lora_in.as_ref().map(LoraAdapter::zeros_like),
            lora_out: self.lora_out.as_ref().map(LoraAdapter::zeros_like),
        }
    }

    /// Attaches zero-initialized adapters of `rank` to both linear maps.
    pub fn attach_lora(&mut self, rng: &mut impl Rng, rank: usize, alpha: f64) {
        let (inner, hidden) = self.w1.dim();
        self.lora_in = Some(LoraAdapter::new(rng, rank, alpha, hidden, inner));
        self.lora_out = Some(LoraAdapter::new(rng, rank, alpha, inner, hidden));
    }

    /// Base FFN output plus any adapter contributions. Base weights are only read.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, FeedForwardTape)> {
        if x.ncols() != self.w1.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.w1.ncols(),
                actual: x.ncols(),
                context: "feed-forward input",
            });
        }
        let mut pre = ops::linear_bias(x, &self.w1, &self.b1);
        let lora_in_mid = self.lora_in.as_ref().map(|l| {
            let (delta, mid) = l.forward(x);
            pre += &delta;
            mid
        });
        let act = ops::gelu(&pre);
        let mut out = ops::linear_bias(act.view(), &self.w2, &self.b2);
        let lora_out_mid = self.lora_out.as_ref().map(|l| {
            let (delta, mid) = l.forward(act.view());
            out += &delta;
            mid
        });
        Ok((
            out,
            FeedForwardTape {
                input: x.to_owned(),
                pre,
                act,
                lora_in_mid,
                lora_out_mid,
            },
        ))
    }

    pub fn backward(&self, dout: ArrayView2<'_, f64>, tape: &FeedForwardTape, grads: &mut FeedForward) -> Array2<f64> {
        ops::accumulate_bias(dout, &mut grads.b2);
        let mut dact = ops::linear_backward(dout, tape.act.view(), &self.w2, &mut grads.w2);
        if let (Some(l), Some(mid), Some(g)) = (&self.lora_out, &tape.lora_out_mid, grads.lora_out.as_mut()) {
            dact += &l.backward(dout, tape.act.view(), mid, g);
        }
        let dpre = ops::gelu_backward(dact.view(), &tape.pre);
        ops::accumulate_bias(dpre.view(), &mut grads.b1);
        let mut dx = ops::linear_backward(dpre.view(), tape.input.view(), &self.w1, &mut grads.w1);
        if let (Some(l), Some(mid), Some(g)) = (&self.lora_in, &tape.lora_in_mid, grads.lora_in.as_mut()) {
            dx += &l.backward(dpre.view(), tape.input.view(), mid, g);
        }
        dx
    }
}

/// Applies the FFN with its adapters; equivalent to [`FeedForward::forward`]
/// without the tape.
pub fn apply_lora(ffn: &FeedForward, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    ffn.forward(x).map(|(y, _)| y)
}
