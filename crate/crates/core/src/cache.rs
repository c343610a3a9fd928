//! Fixed-capacity FIFO store of compressed states.
//!
//! The buffer is a ring over an `m × d` matrix. Callers only ever see
//! *logical* indices: index 0 is the oldest surviving state and
//! `valid_count - 1` the newest. Physical placement is private.
//!
//! Storage is shared copy-on-write with [`CacheSnapshot`]s, so taking a
//! snapshot is O(1) and an update only copies the matrix while a snapshot
//! of the previous generation is still alive.

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"NCCH";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CacheBuffer {
    capacity: usize,
    dim: usize,
    data: Arc<Array2<f64>>,
    write_cursor: usize,
    valid_count: usize,
    epoch: u64,
    generation: u64,
}

impl CacheBuffer {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "cache needs m >= 1 and d >= 1, got m={capacity}, d={dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            data: Arc::new(Array2::zeros((capacity, dim))),
            write_cursor: 0,
            valid_count: 0,
            epoch: 0,
            generation: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn is_empty(&self) -> bool {
        self.valid_count == 0
    }

    /// Total number of states ever inserted since creation or the last reset.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Appends `states` (row order = insertion order), evicting exactly as
    /// many of the oldest entries as needed to stay within capacity.
    pub fn update(&mut self, states: ArrayView2<'_, f64>) -> Result<()> {
        let (rows, dim) = states.dim();
        if dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: dim,
                context: "cache update",
            });
        }
        if rows > self.capacity {
            return Err(Error::SegmentLargerThanCache {
                rows,
                capacity: self.capacity,
            });
        }
        if rows == 0 {
            return Ok(());
        }
        let data = Arc::make_mut(&mut self.data);
        for row in states.rows() {
            data.row_mut(self.write_cursor).assign(&row);
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
        }
        self.valid_count = (self.valid_count + rows).min(self.capacity);
        self.epoch += rows as u64;
        self.generation += 1;
        Ok(())
    }

    /// Empties the cache; capacity and dimension are kept.
    pub fn reset(&mut self) {
        self.write_cursor = 0;
        self.valid_count = 0;
        self.epoch = 0;
        self.generation += 1;
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            data: Arc::clone(&self.data),
            start: self.oldest_physical(),
            valid_count: self.valid_count,
            first_entry_id: self.epoch - self.valid_count as u64,
            generation: self.generation,
        }
    }

    fn oldest_physical(&self) -> usize {
        (self.write_cursor + self.capacity - self.valid_count) % self.capacity
    }

    /// Writes the binary dump: `NCCH`, version, then m, d, valid_count,
    /// epoch as u64, then the valid rows in logical order as f32.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&DUMP_VERSION.to_le_bytes())?;
        for field in [
            self.capacity as u64,
            self.dim as u64,
            self.valid_count as u64,
            self.epoch,
        ] {
            out.write_all(&field.to_le_bytes())?;
        }
        let snap = self.snapshot();
        for i in 0..snap.valid_count() {
            for &x in snap.row(i) {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Self> {
        let corrupt = |detail: String| Error::Corrupt {
            kind: "cache dump",
            detail,
        };
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| corrupt(format!("reading magic: {e}")))?;
        if &magic != DUMP_MAGIC {
            return Err(corrupt(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        input
            .read_exact(&mut word)
            .map_err(|e| corrupt(format!("reading version: {e}")))?;
        let version = u32::from_le_bytes(word);
        if version != DUMP_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let mut fields = [0u64; 4];
        for field in fields.iter_mut() {
            let mut buf = [0u8; 8];
            input
                .read_exact(&mut buf)
                .map_err(|e| corrupt(format!("reading header: {e}")))?;
            *field = u64::from_le_bytes(buf);
        }
        let [m, d, valid, epoch] = fields;
        if valid != epoch.min(m) {
            return Err(corrupt(format!(
                "inconsistent header m={m} valid_count={valid} epoch={epoch}"
            )));
        }
        let mut cache = CacheBuffer::new(m as usize, d as usize).map_err(|e| corrupt(e.to_string()))?;
        let mut rows = Array2::zeros((valid as usize, d as usize));
        let mut buf = [0u8; 4];
        for x in rows.iter_mut() {
            input
                .read_exact(&mut buf)
                .map_err(|e| corrupt(format!("payload truncated: {e}")))?;
            *x = f32::from_le_bytes(buf) as f64;
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing).map_err(|e| corrupt(e.to_string()))? != 0 {
            return Err(corrupt("trailing bytes after payload".into()));
        }
        cache.update(rows.view())?;
        cache.epoch = epoch;
        Ok(cache)
    }
}

/// Immutable logical-order view of a cache at one generation.
#[derive(Debug, Clone)]
pub struct CacheSnapshot {
    data: Arc<Array2<f64>>,
    start: usize,
    valid_count: usize,
    first_entry_id: u64,
    generation: u64,
}

impl CacheSnapshot {
    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn is_empty(&self) -> bool {
        self.valid_count == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Row at logical index `i` (0 = oldest).
    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        assert!(i < self.valid_count, "logical index {i} out of range");
        self.data.row((self.start + i) % self.data.nrows())
    }

    /// Global insertion number of the state at logical index `i`.
    pub fn entry_id(&self, i: usize) -> u64 {
        self.first_entry_id + i as u64
    }

    /// The valid rows as at most two contiguous physical runs, in logical order.
    pub fn runs(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let m = self.data.nrows();
        let head_len = self.valid_count.min(m - self.start);
        let head = self.data.slice(s![self.start..self.start + head_len, ..]);
        let tail = self.data.slice(s![0..self.valid_count - head_len, ..]);
        (head, tail)
    }

    pub fn to_array(&self) -> Array2<f64> {
        let (head, tail) = self.runs();
        ndarray::concatenate![ndarray::Axis(0), head, tail]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn rows(vals: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((vals.len(), 1), vals.to_vec()).unwrap()
    }

    fn logical(cache: &CacheBuffer) -> Vec<f64> {
        cache.snapshot().to_array().column(0).to_vec()
    }

    #[test]
    fn create_rejects_degenerate_shapes() {
        assert!(matches!(CacheBuffer::new(0, 4), Err(Error::InvalidConfig(_))));
        assert!(matches!(CacheBuffer::new(4, 0), Err(Error::InvalidConfig(_))));
        let c = CacheBuffer::new(1, 1).unwrap();
        assert_eq!(c.valid_count(), 0);
        assert_eq!(c.epoch(), 0);
    }

    #[test]
    fn paper_sized_cache() {
        let c = CacheBuffer::new(16384, 256).unwrap();
        assert_eq!((c.capacity(), c.dim(), c.valid_count()), (16384, 256, 0));
    }

    #[test]
    fn eviction_keeps_newest_in_order() {
        let mut c = CacheBuffer::new(4, 1).unwrap();
        c.update(rows(&[1., 2., 3.]).view()).unwrap();
        c.update(rows(&[4., 5.]).view()).unwrap();
        assert_eq!(logical(&c), vec![2., 3., 4., 5.]);
        assert_eq!(c.epoch(), 5);
        assert_eq!(c.valid_count(), 4);
    }

    #[test]
    fn below_capacity_no_eviction() {
        let mut c = CacheBuffer::new(4, 1).unwrap();
        c.update(rows(&[1., 2.]).view()).unwrap();
        assert_eq!(logical(&c), vec![1., 2.]);
        assert_eq!(c.valid_count(), 2);
    }

    #[test]
    fn update_errors() {
        let mut c = CacheBuffer::new(2, 1).unwrap();
        assert!(matches!(
            c.update(rows(&[1., 2., 3.]).view()),
            Err(Error::SegmentLargerThanCache { rows: 3, capacity: 2 })
        ));
        assert!(matches!(
            c.update(array![[1.0, 2.0]].view()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(c.epoch(), 0);
    }

    #[test]
    fn reset_is_idempotent() {
        let mut c = CacheBuffer::new(2, 1).unwrap();
        c.update(rows(&[1., 2.]).view()).unwrap();
        c.reset();
        assert_eq!((c.valid_count(), c.epoch()), (0, 0));
        c.reset();
        assert_eq!((c.valid_count(), c.epoch(), c.capacity(), c.dim()), (0, 0, 2, 1));
        assert!(c.snapshot().is_empty());
    }

    #[test]
    fn snapshot_is_immutable() {
        let mut c = CacheBuffer::new(3, 2).unwrap();
        c.update(array![[1.0, 1.0], [2.0, 2.0]].view()).unwrap();
        let snap = c.snapshot();
        c.update(array![[3.0, 3.0], [4.0, 4.0]].view()).unwrap();
        assert_eq!(snap.to_array(), array![[1.0, 1.0], [2.0, 2.0]]);
        assert_eq!(c.snapshot().to_array(), array![[2.0, 2.0], [3.0, 3.0], [4.0, 4.0]]);
        assert_ne!(snap.generation(), c.generation());
        assert_eq!(CacheBuffer::new(3, 2).unwrap().snapshot().valid_count(), 0);
    }

    #[test]
    fn entry_ids_follow_insertion() {
        let mut c = CacheBuffer::new(3, 1).unwrap();
        c.update(rows(&[0., 1., 2.]).view()).unwrap();
        c.update(rows(&[3., 4.]).view()).unwrap();
        let snap = c.snapshot();
        let ids: Vec<u64> = (0..snap.valid_count()).map(|i| snap.entry_id(i)).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }

    #[test]
    fn dump_round_trip() {
        let mut c = CacheBuffer::new(4, 2).unwrap();
        c.update(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].view()).unwrap();
        c.update(array![[7.0, 8.0], [9.0, 10.0]].view()).unwrap();
        let mut bytes = Vec::new();
        c.write_dump(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 32 + 4 * 2 * 4);
        let back = CacheBuffer::read_dump(bytes.as_slice()).unwrap();
        assert_eq!(back.epoch(), 5);
        assert_eq!(back.valid_count(), 4);
        assert_eq!(back.snapshot().to_array(), c.snapshot().to_array());
    }

    #[test]
    fn dump_rejects_corruption() {
        let mut c = CacheBuffer::new(4, 2).unwrap();
        c.update(array![[1.0, 2.0]].view()).unwrap();
        let mut bytes = Vec::new();
        c.write_dump(&mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            CacheBuffer::read_dump(truncated),
            Err(Error::Corrupt { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CacheBuffer::read_dump(bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn fifo_matches_unbounded_list(
            m in 1usize..64,
            sizes in prop::collection::vec(0usize..64, 1..40),
        ) {
            let mut cache = CacheBuffer::new(m, 1).unwrap();
            let mut list: Vec<f64> = Vec::new();
            let mut next = 0.0;
            for n in sizes {
                let n = n.min(m);
                let batch: Vec<f64> = (0..n).map(|i| next + i as f64).collect();
                next += n as f64;
                cache.update(rows(&batch).view()).unwrap();
                list.extend(batch);
                let keep = list.len().saturating_sub(m);
                prop_assert_eq!(logical(&cache), list[keep..].to_vec());
                prop_assert_eq!(cache.valid_count() as u64, (cache.epoch()).min(m as u64));
            }
        }

        #[test]
        fn reset_then_updates_matches_fresh(
            m in 1usize..16,
            before in prop::collection::vec(1usize..16, 0..5),
            after in prop::collection::vec(1usize..16, 0..5),
        ) {
            let mut reused = CacheBuffer::new(m, 1).unwrap();
            for n in before {
                reused.update(rows(&vec![7.0; n.min(m)]).view()).unwrap();
            }
            reused.reset();
            let mut fresh = CacheBuffer::new(m, 1).unwrap();
            for (i, n) in after.into_iter().enumerate() {
                let batch = vec![i as f64; n.min(m)];
                reused.update(rows(&batch).view()).unwrap();
                fresh.update(rows(&batch).view()).unwrap();
            }
            prop_assert_eq!(logical(&reused), logical(&fresh));
            prop_assert_eq!(reused.epoch(), fresh.epoch());
        }
    }
}
