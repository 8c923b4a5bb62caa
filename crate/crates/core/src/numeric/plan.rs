use crate::error::{Error, Result};

/// Per-query ordered key index lists, all of one uniform length.
///
/// Row `i` lists the key rows that query `i` may look at. Used both as the
/// search region of a sparse correspondence map and as the key set of a
/// sparse attention layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexPlan {
    width: usize,
    idx: Vec<u32>,
}

impl IndexPlan {
    pub fn new(width: usize, idx: Vec<u32>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Argument("index plan rows must be non-empty".into()));
        }
        if idx.len() % width != 0 {
            return Err(Error::Dimension(format!(
                "index plan of {} entries is not a multiple of width {}",
                idx.len(),
                width
            )));
        }
        Ok(IndexPlan { width, idx })
    }

    /// Every query sees all `keys` keys, in order.
    pub fn full(queries: usize, keys: usize) -> Self {
        let mut idx = Vec::with_capacity(queries * keys);
        for _ in 0..queries {
            idx.extend(0..keys as u32);
        }
        IndexPlan { width: keys, idx }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("index plan rows differ in length".into()));
        }
        IndexPlan::new(width, rows.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.idx.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.idx[i * self.width..(i + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.idx
    }

    /// Fails unless every index is below `keys`.
    pub fn check_bounds(&self, keys: usize) -> Result<()> {
        match self.idx.iter().find(|&&k| k as usize >= keys) {
            Some(bad) => Err(Error::Index(format!(
                "plan index {} out of range for {} keys",
                bad, keys
            ))),
            None => Ok(()),
        }
    }
}
