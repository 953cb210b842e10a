//! Per-head KV storage with position-preserving eviction and entry-count
//! memory accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadGrid, HeadId};
use crate::numkit::Matrix;

/// Retained key/value rows of one head together with their original
/// token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    keys: Matrix,
    values: Matrix,
    positions: Vec<usize>,
}

impl HeadCache {
    pub fn new(keys: Matrix, values: Matrix, positions: Vec<usize>) -> Result<Self> {
        if keys.rows() != positions.len() || values.rows() != positions.len() {
            return Err(Error::shape(format!(
                "{} keys, {} values, {} positions",
                keys.rows(),
                values.rows(),
                positions.len()
            )));
        }
        if keys.cols() != values.cols() {
            return Err(Error::shape("key and value widths differ"));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "cache positions must be strictly increasing",
            ));
        }
        Ok(Self {
            keys,
            values,
            positions,
        })
    }

    pub fn empty(d_head: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, d_head),
            values: Matrix::zeros(0, d_head),
            positions: Vec::new(),
        }
    }

    /// A cache that only tracks positions (zero-width rows). Used where
    /// the key/value content is irrelevant, e.g. with the planted oracle.
    pub fn positions_only(positions: Vec<usize>) -> Result<Self> {
        let n = positions.len();
        Self::new(Matrix::zeros(n, 0), Matrix::zeros(n, 0), positions)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn d_head(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Keeps only the rows at `retained` (indices into the current rows).
    /// Rows stay in their original order; duplicates are ignored.
    pub fn evict_to(&self, retained: &[usize]) -> Result<HeadCache> {
        let mut idx = retained.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::range(format!(
                "retained index {bad} in cache of {} entries",
                self.len()
            )));
        }
        Ok(HeadCache {
            keys: self.keys.select_rows(&idx)?,
            values: self.values.select_rows(&idx)?,
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
        })
    }

    pub fn append(&mut self, key: &[f64], value: &[f64], position: usize) -> Result<()> {
        if let Some(&last) = self.positions.last() {
            if position <= last {
                return Err(Error::invalid(format!(
                    "appended position {position} not after {last}"
                )));
            }
        }
        if key.len() != self.d_head() || value.len() != self.d_head() {
            return Err(Error::shape(format!(
                "row widths {}/{} for d_head {}",
                key.len(),
                value.len(),
                self.d_head()
            )));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.positions.push(position);
        Ok(())
    }
}

/// Snapshot of retained entry counts across all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub per_head_entries: HeadGrid<usize>,
    pub total_entries: usize,
    /// Entries an uncompressed cache would hold: `full_n × heads`.
    pub full_entries: usize,
    pub compression_ratio: f64,
    /// Protected-window entries included in `total_entries` (α per head);
    /// zero when the report was not produced by compression.
    #[serde(default)]
    pub window_entries: usize,
}

impl CacheReport {
    /// Entries charged to per-head budgets, i.e. excluding the protected window.
    pub fn budget_entries(&self) -> usize {
        self.total_entries - self.window_entries
    }

    /// Retained fraction for one head relative to the full sequence.
    pub fn head_ratio(&self, id: HeadId) -> f64 {
        let full_n = self.full_entries / self.per_head_entries.shape().n_heads();
        if full_n == 0 {
            0.0
        } else {
            self.per_head_entries[id] as f64 / full_n as f64
        }
    }

    /// Cache size in bytes for `f64` keys and values of width `d_head`.
    pub fn bytes(&self, d_head: usize) -> usize {
        self.total_entries * 2 * d_head * 8
    }

    /// One `headId,entries` row per head.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        w.write_record(["headId", "entries"])?;
        for (id, n) in self.per_head_entries.iter() {
            w.write_record([id.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact entry counts of `caches` against a full sequence of `full_n` tokens.
pub fn memory_report(caches: &HeadGrid<HeadCache>, full_n: usize) -> Result<CacheReport> {
    if let Some((id, c)) = caches.iter().find(|(_, c)| c.len() > full_n) {
        return Err(Error::invalid(format!(
            "{id} holds {} entries, more than the full length {full_n}",
            c.len()
        )));
    }
    let per_head_entries = caches.map(HeadCache::len);
    let total_entries: usize = per_head_entries.values().iter().sum();
    let full_entries = full_n * caches.shape().n_heads();
    let compression_ratio = if full_entries == 0 {
        0.0
    } else {
        total_entries as f64 / full_entries as f64
    };
    Ok(CacheReport {
        per_head_entries,
        total_entries,
        full_entries,
        compression_ratio,
        window_entries: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::Shape;
    use proptest::prelude::*;

    fn cache(s: usize) -> HeadCache {
        let keys = Matrix::new(s, 2, (0..2 * s).map(|i| i as f64).collect()).unwrap();
        let values = Matrix::new(s, 2, (0..2 * s).map(|i| -(i as f64)).collect()).unwrap();
        HeadCache::new(keys, values, (0..s).map(|i| 10 * i + 3).collect()).unwrap()
    }

    #[test]
    fn evict_examples() {
        let c = cache(4);
        assert_eq!(c.evict_to(&[0, 1, 2, 3]).unwrap(), c);
        let none = cache(3).evict_to(&[]).unwrap();
        assert_eq!(none.len(), 0);
        let kept = c.evict_to(&[2, 0]).unwrap();
        assert_eq!(kept.positions(), &[3, 23]);
        assert_eq!(kept.keys().row(0), c.keys().row(0));
        assert_eq!(kept.keys().row(1), c.keys().row(2));
        assert_eq!(kept.values().row(1), c.values().row(2));
        assert!(matches!(c.evict_to(&[4]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn append_examples() {
        let mut c = HeadCache::empty(2);
        c.append(&[1.0, 2.0], &[3.0, 4.0], 0).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.append(&[1.0, 2.0], &[3.0, 4.0], 0).is_err());
        for p in 1..5 {
            c.append(&[0.0, 0.0], &[0.0, 0.0], p * 2).unwrap();
        }
        assert_eq!(c.positions(), &[0, 2, 4, 6, 8]);
        assert!(c.append(&[0.0], &[0.0], 9).is_err());
    }

    #[test]
    fn report_examples() {
        let shape = Shape::new(2, 2);
        let full = HeadGrid::from_fn(shape, |_| cache(5));
        let r = memory_report(&full, 5).unwrap();
        assert_eq!(r.compression_ratio, 1.0);

        let sixteen = HeadGrid::from_fn(shape, |_| {
            HeadCache::positions_only((0..16).collect()).unwrap()
        });
        let r = memory_report(&sixteen, 1024).unwrap();
        assert_eq!(r.total_entries, 64);
        assert_eq!(r.compression_ratio, 64.0 / 4096.0);
        assert_eq!(r.head_ratio(HeadId::new(1, 1)), 16.0 / 1024.0);

        let empty = HeadGrid::from_fn(shape, |_| HeadCache::empty(2));
        assert_eq!(memory_report(&empty, 8).unwrap().compression_ratio, 0.0);
        assert!(memory_report(&full, 4).is_err());
    }

    #[test]
    fn report_csv_rows() {
        let grid = HeadGrid::from_fn(Shape::new(1, 2), |id| cache(id.head + 1));
        let r = memory_report(&grid, 4).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "headId,entries\nL0H0,1\nL0H1,2\n"
        );
        assert_eq!(r.bytes(2), 3 * 2 * 2 * 8);
    }

    proptest! {
        #[test]
        fn nested_eviction_composes(s in 1usize..40, outer_mask in any::<u64>(), inner_mask in any::<u64>()) {
            let c = cache(s);
            let outer: Vec<usize> = (0..s).filter(|i| outer_mask >> (i % 64) & 1 == 1).collect();
            let once = c.evict_to(&outer).unwrap();
            // inner is a subset of the outer set, addressed in the evicted cache's rows
            let inner_rows: Vec<usize> = (0..outer.len()).filter(|i| inner_mask >> (i % 64) & 1 == 1).collect();
            let twice = once.evict_to(&inner_rows).unwrap();
            let inner: Vec<usize> = inner_rows.iter().map(|&r| outer[r]).collect();
            prop_assert_eq!(twice, c.evict_to(&inner).unwrap());
        }
    }
}
