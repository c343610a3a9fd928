//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{document_gradients, document_loss_pinned};
use super::{document_io, Model};
use crate::cache::CacheBuffer;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude among the checked entries.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Random entries checked per tensor, on top of its largest-gradient entry.
    pub samples: usize,
    /// Magnitude below which differences count as absolute, not relative.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 6,
            floor: 1e-5,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the summed NLL of `tokens` against central
/// differences for every trainable tensor. Retrieval decisions recorded in
/// the analytic pass are replayed in every perturbed pass, so the loss is a
/// smooth function of the weights. `cache` is the state before the first
/// segment (`None` runs without the cache); it is not modified.
pub fn check_document(
    model: &Model,
    tokens: &[u32],
    cache: Option<&CacheBuffer>,
    opts: &GradCheckOptions,
) -> Result<Vec<TensorCheck>> {
    let (inputs, targets) = document_io(tokens, model.bos());
    let mut work = cache.cloned();
    let analytic = document_gradients(model, &inputs, &targets, work.as_mut(), None, 1.0, true)?;
    let pinned = analytic.expanded.clone();
    let grads = analytic.grads.tensors();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut report = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        if !model.trainable.allows(&g.name) {
            continue;
        }
        let len = g.data.len();
        let mut entries: Vec<usize> = sample(&mut rng, len, opts.samples.min(len)).into_vec();
        let largest = (0..len)
            .max_by(|&a, &b| g.data[a].abs().total_cmp(&g.data[b].abs()))
            .expect("tensors are non-empty");
        if !entries.contains(&largest) {
            entries.push(largest);
        }
        let mut worst = 0.0f64;
        let mut max_abs = 0.0f64;
        for &e in &entries {
            let original = probe.params.tensors()[ti].data[e];
            let mut eval = |value: f64| -> Result<f64> {
                probe.params.tensors_mut()[ti].data[e] = value;
                document_loss_pinned(&probe, &inputs, &targets, cache, &pinned)
            };
            let plus = eval(original + opts.step)?;
            let minus = eval(original - opts.step)?;
            probe.params.tensors_mut()[ti].data[e] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(g.data[e], numeric, opts.floor));
            max_abs = max_abs.max(g.data[e].abs());
        }
        report.push(TensorCheck {
            name: g.name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
            max_abs_grad: max_abs,
        });
    }
    Ok(report)
}
