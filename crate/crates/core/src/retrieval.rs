//! Exact L2 top-k retrieval over a [`CacheSnapshot`].
//!
//! One query per token: each compressed state is compared against every
//! valid cache entry, the `k` closest are selected, each hit is widened to the
//! run `[hit, hit + w)` of its right neighbours, and the result is gathered
//! into a fixed-shape tensor. Slots that fall outside the cache are `None`
//! (MASK) and carry zero rows.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::cache::CacheSnapshot;
use crate::error::{Error, Result};

/// Logical cache index, or `None` for a masked slot.
pub type Slot = Option<usize>;

/// Squared L2 distances, `n` queries × `valid_count` cache entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(pub Array2<f64>);

impl DistanceMatrix {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn num_queries(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_candidates(&self) -> usize {
        self.0.ncols()
    }
}

/// Which retrieval scheme a [`QueryCounter`] is accounting for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// One query per token against compressed states.
    Neurocache,
    /// One query per attention head (Memorizing-Transformer style).
    PerHead { heads: usize },
    /// One query per head per augmented layer (Unlimiformer style), counted only.
    UnlimiformerCount { layers: usize, heads: usize },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Neurocache => "neurocache",
            Method::PerHead { .. } => "per-head",
            Method::UnlimiformerCount { .. } => "unlimiformer-count",
        }
    }

    pub fn queries_per_token(&self) -> u64 {
        match *self {
            Method::Neurocache => 1,
            Method::PerHead { heads } => heads as u64,
            Method::UnlimiformerCount { layers, heads } => (layers * heads) as u64,
        }
    }
}

/// Race-free tally of cache queries issued and tokens served.
#[derive(Debug)]
pub struct QueryCounter {
    method: Method,
    queries: AtomicU64,
    tokens: AtomicU64,
}

impl QueryCounter {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            queries: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn record(&self, queries: u64, tokens: u64) {
        self.queries.fetch_add(queries, AtomicOrdering::Relaxed);
        self.tokens.fetch_add(tokens, AtomicOrdering::Relaxed);
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(AtomicOrdering::Relaxed)
    }

    pub fn tokens(&self) -> u64 {
        self.tokens.load(AtomicOrdering::Relaxed)
    }

    pub fn queries_per_token(&self) -> f64 {
        match self.tokens() {
            0 => 0.0,
            t => self.queries() as f64 / t as f64,
        }
    }

    pub fn reset(&self) {
        self.queries.store(0, AtomicOrdering::Relaxed);
        self.tokens.store(0, AtomicOrdering::Relaxed);
    }
}

impl Default for QueryCounter {
    fn default() -> Self {
        Self::new(Method::Neurocache)
    }
}

/// Retrieved neighbour slots for each token, with the gathered rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    /// `n × slots` logical indices into the snapshot.
    pub indices: Array2<Slot>,
    /// `n × slots` global insertion ids of the referenced entries.
    pub entry_ids: Array2<Option<u64>>,
    /// `n × slots × d`; masked slots are zero.
    pub states: Array3<f64>,
    /// `n × slots`; true where the slot holds a real state.
    pub mask: Array2<bool>,
}

impl Neighbors {
    /// An all-masked set, as produced against an empty cache.
    pub fn masked(n: usize, slots: usize, dim: usize) -> Self {
        Self {
            indices: Array2::from_elem((n, slots), None),
            entry_ids: Array2::from_elem((n, slots), None),
            states: Array3::zeros((n, slots, dim)),
            mask: Array2::from_elem((n, slots), false),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.indices.nrows()
    }

    pub fn num_slots(&self) -> usize {
        self.indices.ncols()
    }

    pub fn any_valid(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalSet {
    pub distances: DistanceMatrix,
    /// `n × k`, sorted by (distance, index).
    pub top_indices: Array2<Slot>,
    /// Window-expanded, `n × (k·w)`.
    pub neighbors: Neighbors,
}

fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}

#[inline]
fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact squared L2 distance between every query row and every valid cache row.
pub fn l2_distances(queries: ArrayView2<'_, f64>, snapshot: &CacheSnapshot) -> Result<DistanceMatrix> {
    let (n, d) = queries.dim();
    check_dim(snapshot.dim(), d, "retrieval queries")?;
    let queries = queries.as_standard_layout();
    let (head, tail) = snapshot.runs();
    let mut out = Array2::zeros((n, snapshot.valid_count()));
    for (q, mut row) in queries.rows().into_iter().zip(out.rows_mut()) {
        let q = q.as_slice().expect("standard layout");
        let mut col = 0;
        for run in [&head, &tail] {
            let flat = run.as_slice().expect("cache runs are contiguous");
            for entry in flat.chunks_exact(d) {
                row[col] = squared_l2(q, entry);
                col += 1;
            }
        }
    }
    Ok(DistanceMatrix(out))
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Selects the `k` nearest logical indices per row using partition-based
/// selection, then orders the winners. Rows with fewer than `k` candidates
/// are padded with MASK.
pub fn top_k(distances: &DistanceMatrix, k: usize) -> Result<Array2<Slot>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let dist = distances.as_array();
    let (n, m) = dist.dim();
    let mut out = Array2::from_elem((n, k), None);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(m);
    for (row, mut dst) in dist.rows().into_iter().zip(out.rows_mut()) {
        keyed.clear();
        keyed.extend(row.iter().copied().zip(0..m));
        let take = k.min(m);
        if take == 0 {
            continue;
        }
        if take < m {
            keyed.select_nth_unstable_by(take - 1, by_distance_then_index);
        }
        let winners = &mut keyed[..take];
        winners.sort_unstable_by(by_distance_then_index);
        for (slot, &(_, idx)) in dst.iter_mut().zip(winners.iter()) {
            *slot = Some(idx);
        }
    }
    Ok(out)
}

/// Replaces every hit `i` with the run `[i, i + w)`; indices at or beyond
/// `valid_count` become MASK, and MASK hits expand to all-MASK runs.
pub fn expand_window(top: &Array2<Slot>, w: usize, valid_count: usize) -> Result<Array2<Slot>> {
    if w == 0 {
        return Err(Error::InvalidConfig("retrieval window w must be >= 1".into()));
    }
    let (n, k) = top.dim();
    let mut out = Array2::from_elem((n, k * w), None);
    for (src, mut dst) in top.rows().into_iter().zip(out.rows_mut()) {
        for (j, hit) in src.iter().enumerate() {
            if let Some(hit) = *hit {
                for off in 0..w {
                    let idx = hit + off;
                    if idx < valid_count {
                        dst[j * w + off] = Some(idx);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Copies the referenced rows out of the snapshot.
pub fn gather_states(expanded: &Array2<Slot>, snapshot: &CacheSnapshot) -> Result<Neighbors> {
    let (n, slots) = expanded.dim();
    let mut out = Neighbors::masked(n, slots, snapshot.dim());
    for ((i, s), slot) in expanded.indexed_iter() {
        if let Some(idx) = *slot {
            if idx >= snapshot.valid_count() {
                return Err(Error::Internal(format!(
                    "gather index {idx} out of range for {} valid entries",
                    snapshot.valid_count()
                )));
            }
            out.indices[[i, s]] = Some(idx);
            out.entry_ids[[i, s]] = Some(snapshot.entry_id(idx));
            out.mask[[i, s]] = true;
            out.states
                .index_axis_mut(Axis(0), i)
                .row_mut(s)
                .assign(&snapshot.row(idx));
        }
    }
    Ok(out)
}

/// Pools the neighbour rows of tokens `i-c+1 ..= i` (oldest first) for each
/// token `i`. Tokens before the segment start contribute all-MASK rows and
/// duplicates are kept.
pub fn extend_context(per_token: &Neighbors, c: usize) -> Result<Neighbors> {
    if c == 0 {
        return Err(Error::InvalidConfig("extended context c must be >= 1".into()));
    }
    let n = per_token.num_tokens();
    let slots = per_token.num_slots();
    let dim = per_token.states.len_of(Axis(2));
    let mut out = Neighbors::masked(n, c * slots, dim);
    for i in 0..n {
        for back in 0..c {
            let Some(src) = (i + back + 1).checked_sub(c) else {
                continue;
            };
            let base = back * slots;
            for s in 0..slots {
                out.indices[[i, base + s]] = per_token.indices[[src, s]];
                out.entry_ids[[i, base + s]] = per_token.entry_ids[[src, s]];
                out.mask[[i, base + s]] = per_token.mask[[src, s]];
            }
            out.states
                .index_axis_mut(Axis(0), i)
                .slice_mut(ndarray::s![base..base + slots, ..])
                .assign(&per_token.states.index_axis(Axis(0), src));
        }
    }
    Ok(out)
}

/// Full single-query retrieval: distances, top-k, window, gather. Records
/// exactly one query per token on `counter`.
pub fn retrieve(
    queries: ArrayView2<'_, f64>,
    snapshot: &CacheSnapshot,
    k: usize,
    w: usize,
    counter: &QueryCounter,
) -> Result<RetrievalSet> {
    let distances = l2_distances(queries, snapshot)?;
    let top_indices = top_k(&distances, k)?;
    let expanded = expand_window(&top_indices, w, snapshot.valid_count())?;
    let neighbors = gather_states(&expanded, snapshot)?;
    let n = queries.nrows() as u64;
    counter.record(n, n);
    Ok(RetrievalSet {
        distances,
        top_indices,
        neighbors,
    })
}

/// Per-head retrieval results of the multi-query baseline.
#[derive(Debug, Clone)]
pub struct PerHeadRetrieval {
    /// One `n × k` index matrix per head.
    pub top_indices: Vec<Array2<Slot>>,
    /// `n × a × k × f` retrieved keys.
    pub keys: Array4<f64>,
    /// `n × a × k × f` retrieved values.
    pub values: Array4<f64>,
}

/// Multi-query reference path: each cache entry stores `2·a·f` values (all
/// head keys, then all head values) and every head issues its own top-k
/// search over its key slice. Records `a` queries per token.
pub fn retrieve_per_head_baseline(
    queries: ArrayView3<'_, f64>,
    snapshot: &CacheSnapshot,
    k: usize,
    counter: &QueryCounter,
) -> Result<PerHeadRetrieval> {
    let (n, heads, f) = queries.dim();
    if heads == 0 || f == 0 {
        return Err(Error::InvalidConfig("per-head baseline needs a >= 1 and f >= 1".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    check_dim(2 * heads * f, snapshot.dim(), "per-head cache entry")?;
    let (head_run, tail_run) = snapshot.runs();
    let entries = snapshot.valid_count();
    let mut top_indices = Vec::with_capacity(heads);
    let mut keys = Array4::zeros((n, heads, k, f));
    let mut values = Array4::zeros((n, heads, k, f));
    let mut dist = Array2::zeros((n, entries));
    for h in 0..heads {
        let key_cols = h * f..(h + 1) * f;
        for i in 0..n {
            let q = queries.slice(ndarray::s![i, h, ..]);
            let q = q.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| q.to_vec());
            let mut col = 0;
            for run in [&head_run, &tail_run] {
                let flat = run.as_slice().expect("cache runs are contiguous");
                for entry in flat.chunks_exact(2 * heads * f) {
                    dist[[i, col]] = squared_l2(&q, &entry[key_cols.clone()]);
                    col += 1;
                }
            }
        }
        let idx = top_k(&DistanceMatrix(dist.clone()), k)?;
        for ((i, j), slot) in idx.indexed_iter() {
            if let Some(e) = *slot {
                let row = snapshot.row(e);
                keys.slice_mut(ndarray::s![i, h, j, ..])
                    .assign(&row.slice(ndarray::s![h * f..(h + 1) * f]));
                let voff = heads * f + h * f;
                values
                    .slice_mut(ndarray::s![i, h, j, ..])
                    .assign(&row.slice(ndarray::s![voff..voff + f]));
            }
        }
        top_indices.push(idx);
    }
    counter.record((heads * n) as u64, n as u64);
    Ok(PerHeadRetrieval {
        top_indices,
        keys,
        values,
    })
}

/// Counter-only accounting for a scheme with one query per head per
/// augmented layer; nothing is executed.
pub fn account_unlimiformer(counter: &QueryCounter, tokens: usize, layers: usize, heads: usize) {
    counter.record((tokens * layers * heads) as u64, tokens as u64);
}
