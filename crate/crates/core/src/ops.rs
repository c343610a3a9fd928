//! Dense building blocks with hand-written backward passes.
//!
//! Linear maps follow the `(out, in)` weight layout, so `y = x · Wᵀ`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-5;

/// Row-major result whatever the operand layouts, so callers can reshape.
fn standard(y: Array2<f64>) -> Array2<f64> {
    if y.is_standard_layout() {
        y
    } else {
        y.as_standard_layout().into_owned()
    }
}

pub fn linear(x: ArrayView2<'_, f64>, w: &Array2<f64>) -> Array2<f64> {
    standard(x.dot(&w.t()))
}

pub fn linear_bias(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = standard(x.dot(&w.t()));
    y += b;
    y
}

/// Accumulates `dW += dyᵀ · x` and returns `dx = dy · W`.
pub fn linear_backward(
    dy: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, dw);
    standard(dy.dot(w))
}

pub fn accumulate_bias(dy: ArrayView2<'_, f64>, db: &mut Array1<f64>) {
    *db += &dy.sum_axis(Axis(0));
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Array1::ones(width),
            bias: Array1::zeros(width),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormTape {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub fn layer_norm(x: ArrayView2<'_, f64>, ln: &LayerNorm) -> (Array2<f64>, LayerNormTape) {
    let width = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / width;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * &ln.gain + &ln.bias;
    (y, LayerNormTape { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: ArrayView2<'_, f64>,
    tape: &LayerNormTape,
    ln: &LayerNorm,
    grads: &mut LayerNorm,
) -> Array2<f64> {
    grads.gain += &(&dy * &tape.xhat).sum_axis(Axis(0));
    grads.bias += &dy.sum_axis(Axis(0));
    let width = dy.ncols() as f64;
    let mut dx = &dy * &ln.gain;
    for ((mut row, xhat), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(tape.xhat.rows())
        .zip(tape.rstd.iter())
    {
        let mean_g = row.sum() / width;
        let mean_gx = row.dot(&xhat) / width;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|g, &xh| *g = r * (*g - mean_g - xh * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(u: &Array2<f64>) -> Array2<f64> {
    u.mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
}

pub fn gelu_backward(dy: ArrayView2<'_, f64>, u: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.to_owned();
    Zip::from(&mut out).and(u).for_each(|g, &x| {
        let inner = GELU_C * (x + 0.044715 * x * x * x);
        let t = inner.tanh();
        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        *g *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    });
    out
}

/// In-place softmax of `row` restricted to `valid`; invalid entries get 0.
/// Returns false and zeroes the row when nothing is valid.
pub fn masked_softmax_inplace(row: &mut [f64], valid: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if valid(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
    true
}

/// Causal multi-head attention core on already-projected `q`, `k`, `v`
/// (`n × a·f`). Returns the concatenated head outputs and the per-head
/// probability matrices.
pub fn causal_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (n, width) = q.dim();
    let f = width / heads;
    let scale = 1.0 / (f as f64).sqrt();
    let mut out = Array2::zeros((n, width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * f..(h + 1) * f];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            masked_softmax_inplace(row.as_slice_mut().unwrap(), |j| j <= i);
        }
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)` for [`causal_attention`].
pub fn causal_attention_backward(
    dout: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    probs: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, width) = q.dim();
    let heads = probs.len();
    let f = width / heads;
    let scale = 1.0 / (f as f64).sqrt();
    let mut dq = Array2::zeros((n, width));
    let mut dk = Array2::zeros((n, width));
    let mut dv = Array2::zeros((n, width));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * f..(h + 1) * f];
        let dout_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&v.slice(cols).t());
        let mut ds = softmax_backward_rows(p, &dp);
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// `dS = P ⊙ (dP − rowsum(P ⊙ dP))`
pub fn softmax_backward_rows(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        Zip::from(&mut row).and(&prow).for_each(|g, &pj| *g -= pj * dot);
    }
    ds
}

/// Cross-entropy for rows whose target is `Some`. Returns the per-row NLL
/// (`None` rows are 0) and `d(sum NLL)/dlogits`.
pub fn cross_entropy(
    logits: ArrayView2<'_, f64>,
    targets: &[Option<u32>],
) -> (Vec<f64>, Array2<f64>) {
    let mut nll = vec![0.0; logits.nrows()];
    let mut grad = Array2::zeros(logits.dim());
    for (i, (row, target)) in logits.rows().into_iter().zip(targets).enumerate() {
        let Some(t) = *target else { continue };
        let (lse, probs) = log_softmax_parts(row);
        nll[i] = lse - row[t as usize];
        let mut g = grad.row_mut(i);
        g.assign(&probs);
        g[t as usize] -= 1.0;
    }
    (nll, grad)
}

fn log_softmax_parts(row: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = row.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    (max + sum.ln(), exp / sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central difference of a scalar function over every element of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            xm.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-5))
            .fold(0.0, f64::max)
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, (3, 6));
        let w = random(&mut rng, (3, 6));
        let ln = LayerNorm {
            gain: Array1::from_shape_fn(6, |_| rng.random_range(0.5..1.5)),
            bias: Array1::from_shape_fn(6, |_| rng.random_range(-0.5..0.5)),
        };
        let (_, tape) = layer_norm(x.view(), &ln);
        let mut grads = LayerNorm {
            gain: Array1::zeros(6),
            bias: Array1::zeros(6),
        };
        let dx = layer_norm_backward(w.view(), &tape, &ln, &mut grads);
        let num = numeric_grad(&x, |x| (&layer_norm(x.view(), &ln).0 * &w).sum());
        assert!(max_rel(&dx, &num) < 1e-6);
    }

    #[test]
    fn gelu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random(&mut rng, (4, 5)) * 3.0;
        let w = random(&mut rng, (4, 5));
        let an = gelu_backward(w.view(), &u);
        let num = numeric_grad(&u, |u| (&gelu(u) * &w).sum());
        assert!(max_rel(&an, &num) < 1e-6);
    }

    #[test]
    fn causal_attention_gradient_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, heads, f) = (5, 2, 3);
        let q = random(&mut rng, (n, heads * f));
        let k = random(&mut rng, (n, heads * f));
        let v = random(&mut rng, (n, heads * f));
        let w = random(&mut rng, (n, heads * f));
        let (out, probs) = causal_attention(q.view(), k.view(), v.view(), heads);
        let (dq, dk, dv) = causal_attention_backward(w.view(), q.view(), k.view(), v.view(), &probs);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (&causal_attention(q.view(), k.view(), v.view(), heads).0 * &w).sum()
        };
        assert!(max_rel(&dq, &numeric_grad(&q, |x| loss(x, &k, &v))) < 1e-6);
        assert!(max_rel(&dk, &numeric_grad(&k, |x| loss(&q, x, &v))) < 1e-6);
        assert!(max_rel(&dv, &numeric_grad(&v, |x| loss(&q, &k, x))) < 1e-6);
        // first token only sees itself
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn masked_softmax_all_masked_is_zero() {
        let mut row = [1.0, 2.0, 3.0];
        assert!(!masked_softmax_inplace(&mut row, |_| false));
        assert_eq!(row, [0.0; 3]);
        let mut row = [1.0, 2.0, 3.0];
        assert!(masked_softmax_inplace(&mut row, |j| j != 1));
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let logits = Array2::zeros((2, 4));
        let (nll, _) = cross_entropy(logits.view(), &[Some(1), None]);
        assert!((nll[0] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(nll[1], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random(&mut rng, (3, 5));
        let targets = [Some(0), Some(4), Some(2)];
        let (_, g) = cross_entropy(logits.view(), &targets);
        let num = numeric_grad(&logits, |l| cross_entropy(l.view(), &targets).0.iter().sum());
        assert!(max_rel(&g, &num) < 1e-6);
    }
}
