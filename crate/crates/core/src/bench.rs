//! Retrieval micro-benchmarks over a sweep of cache sizes.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::CacheBuffer;
use crate::error::{Error, Result};
use crate::retrieval::{self, Method, QueryCounter};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchParams {
    pub method: Method,
    pub cache_size: usize,
    /// Width of one cache entry for the single-query path; the per-head
    /// path splits it into `heads` slices of `dim / heads`.
    pub dim: usize,
    pub top_k: usize,
    /// Query tokens per repetition.
    pub tokens: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchParams {
    pub fn new(method: Method, cache_size: usize, dim: usize, top_k: usize) -> Self {
        Self {
            method,
            cache_size,
            dim,
            top_k,
            tokens: 32,
            warmup: 5,
            repetitions: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cache_size == 0 || self.dim == 0 || self.top_k == 0 || self.tokens == 0 {
            return Err(Error::InvalidConfig("m, d, k and tokens must be >= 1".into()));
        }
        if self.repetitions < 100 {
            return Err(Error::InvalidConfig(format!(
                "latency needs at least 100 repetitions, got {}",
                self.repetitions
            )));
        }
        match self.method {
            Method::PerHead { heads } if heads == 0 || self.dim % heads != 0 => Err(Error::InvalidConfig(format!(
                "per-head split needs d divisible by a, got d={} a={heads}",
                self.dim
            ))),
            Method::UnlimiformerCount { layers, heads } if layers == 0 || heads == 0 => {
                Err(Error::InvalidConfig("l and a must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub method: &'static str,
    pub cache_size: usize,
    pub queries_per_token: f64,
    /// Mean wall time per query token; zero for counter-only accounting.
    pub mean_latency_ns: f64,
    /// Distance-computation estimate, `2·d·m` per token.
    pub flops_per_token: f64,
    pub seed: u64,
    pub repetitions: usize,
}

impl BenchReport {
    pub const HEADER: &'static str = "method\tm\tqueries_per_token\tlatency_ns_per_token\tflops_per_token\tseed\treps";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.1}\t{:.0}\t{}\t{}",
            self.method,
            self.cache_size,
            self.queries_per_token,
            self.mean_latency_ns,
            self.flops_per_token,
            self.seed,
            self.repetitions
        )
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Fills a cache and times repeated retrievals against it. Warmup runs are
/// discarded; the counter is reset after them, so the reported
/// queries-per-token is what the timed runs issued.
pub fn run(params: &BenchParams) -> Result<BenchReport> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let counter = QueryCounter::new(params.method);
    let (m, d, k, n) = (params.cache_size, params.dim, params.top_k, params.tokens);
    let mut elapsed_ns = 0.0;

    match params.method {
        Method::Neurocache => {
            let mut cache = CacheBuffer::new(m, d)?;
            cache.update(random_matrix(&mut rng, m, d).view())?;
            let snapshot = cache.snapshot();
            let queries = random_matrix(&mut rng, n, d);
            for _ in 0..params.warmup {
                std::hint::black_box(retrieval::retrieve(queries.view(), &snapshot, k, 1, &counter)?);
            }
            counter.reset();
            let start = Instant::now();
            for _ in 0..params.repetitions {
                std::hint::black_box(retrieval::retrieve(queries.view(), &snapshot, k, 1, &counter)?);
            }
            elapsed_ns = start.elapsed().as_nanos() as f64;
        }
        Method::PerHead { heads } => {
            let f = d / heads;
            let mut cache = CacheBuffer::new(m, 2 * d)?;
            cache.update(random_matrix(&mut rng, m, 2 * d).view())?;
            let snapshot = cache.snapshot();
            let queries = Array3::from_shape_fn((n, heads, f), |_| rng.random_range(-1.0..1.0));
            for _ in 0..params.warmup {
                std::hint::black_box(retrieval::retrieve_per_head_baseline(queries.view(), &snapshot, k, &counter)?);
            }
            counter.reset();
            let start = Instant::now();
            for _ in 0..params.repetitions {
                std::hint::black_box(retrieval::retrieve_per_head_baseline(queries.view(), &snapshot, k, &counter)?);
            }
            elapsed_ns = start.elapsed().as_nanos() as f64;
        }
        Method::UnlimiformerCount { layers, heads } => {
            for _ in 0..params.repetitions {
                retrieval::account_unlimiformer(&counter, n, layers, heads);
            }
        }
    }

    Ok(BenchReport {
        method: params.method.name(),
        cache_size: m,
        queries_per_token: counter.queries_per_token(),
        mean_latency_ns: elapsed_ns / (params.repetitions * n) as f64,
        flops_per_token: 2.0 * d as f64 * m as f64,
        seed: params.seed,
        repetitions: params.repetitions,
    })
}

/// One report per cache size.
pub fn sweep(base: &BenchParams, sizes: &[usize]) -> Result<Vec<BenchReport>> {
    sizes
        .iter()
        .map(|&m| run(&BenchParams { cache_size: m, ..*base }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_accounting_per_method() {
        let base = BenchParams::new(Method::Neurocache, 64, 12, 4);
        assert_eq!(run(&base).unwrap().queries_per_token, 1.0);
        let per_head = BenchParams {
            method: Method::PerHead { heads: 12 },
            ..base
        };
        assert_eq!(run(&per_head).unwrap().queries_per_token, 12.0);
        let counted = BenchParams {
            method: Method::UnlimiformerCount { layers: 12, heads: 12 },
            ..base
        };
        let report = run(&counted).unwrap();
        assert_eq!(report.queries_per_token, 144.0);
        assert_eq!(report.mean_latency_ns, 0.0);
    }

    #[test]
    fn rejects_bad_grids() {
        let base = BenchParams::new(Method::PerHead { heads: 5 }, 64, 12, 4);
        assert!(run(&base).is_err());
        let few = BenchParams {
            repetitions: 10,
            method: Method::Neurocache,
            ..base
        };
        assert!(run(&few).is_err());
    }

    #[test]
    fn flop_estimate() {
        let r = run(&BenchParams::new(Method::Neurocache, 100, 8, 2)).unwrap();
        assert_eq!(r.flops_per_token, 1600.0);
        assert_eq!(r.repetitions, 100);
    }
}
