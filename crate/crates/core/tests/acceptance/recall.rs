use std::sync::OnceLock;

use neurocache::model::{adapt, TrainOptions};
use neurocache::recall::{recall_accuracy, train_recall, RecallTask, RecallTraining};
use neurocache::{Model, ModelConfig};

use super::{outcome, Outcome};

const SEEDS: [u64; 3] = [0, 1, 2];
const STEPS: usize = 800;
const LANES: usize = 8;
const EVAL_DOCS: usize = 128;
const EVAL_SEED: u64 = 10_000;

/// Adapts a frozen toy base and trains it on recall documents.
fn trained(seed: u64, use_cache: bool) -> Model {
    let config = ModelConfig {
        seed,
        ..ModelConfig::toy()
    };
    let base = Model::new_base(config.clone()).expect("base");
    let mut model = adapt(&base, &config).expect("adapt").model;
    let schedule = RecallTraining {
        steps: STEPS,
        lanes: LANES,
        seed: seed + 100,
        query_loss_only: true,
        options: TrainOptions {
            learning_rate: 3e-3,
            use_cache,
            ..Default::default()
        },
    };
    train_recall(&mut model, &RecallTask::toy(), &schedule, |_, _, _| true).expect("training");
    model
}

fn cached_models() -> &'static [Model] {
    static MODELS: OnceLock<Vec<Model>> = OnceLock::new();
    MODELS.get_or_init(|| SEEDS.iter().map(|&s| trained(s, true)).collect())
}

// 7. Cache model recalls at least 90%, the no-cache ablation at most 20%.
pub fn recall_efficacy() -> Outcome {
    let eval = RecallTask::toy().dataset(EVAL_DOCS, EVAL_SEED);
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, model) in SEEDS.iter().zip(cached_models()) {
        let acc = recall_accuracy(model, &eval, true).expect("eval");
        pass &= acc >= 0.9;
        details.push(format!("seed {seed} cache acc {acc:.3}"));
    }
    let ablation = trained(SEEDS[0], false);
    let acc = recall_accuracy(&ablation, &eval, false).expect("eval");
    pass &= acc <= 0.2;
    details.push(format!("no-cache acc {acc:.3}"));
    outcome(pass, details.join(", "))
}

// 8. Trained at m=256, evaluated at m=2048 on documents whose filler gap
// alone overflows the smaller cache.
pub fn cache_size_generalization() -> Outcome {
    let task = RecallTask::toy();
    let short = task.dataset(EVAL_DOCS, EVAL_SEED);
    let long = task.with_gap(40, 60).dataset(32, EVAL_SEED + 1);
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, model) in SEEDS.iter().zip(cached_models()) {
        let large = match model.with_cache_size(2048) {
            Ok(m) => m,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let trained_acc = recall_accuracy(model, &short, true).expect("eval");
        let short_acc = match recall_accuracy(&large, &short, true) {
            Ok(a) => a,
            Err(e) => return outcome(false, format!("seed {seed} m=2048: {e}")),
        };
        let long_acc = recall_accuracy(&large, &long, true).expect("eval");
        let evicted = recall_accuracy(model, &long, true).expect("eval");
        pass &= short_acc >= trained_acc - 0.05 && long_acc >= trained_acc - 0.05;
        details.push(format!(
            "seed {seed} m=256 {trained_acc:.3}, m=2048 {short_acc:.3} short / {long_acc:.3} long (m=256 long {evicted:.3})"
        ));
    }
    outcome(pass, details.join("; "))
}
