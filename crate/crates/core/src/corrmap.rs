//! Correspondence maps: softmax over scaled feature inner products, either
//! over a whole target grid or over a sparse list of target locations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dots_into, softmax_in_place, IndexPlan, Scalar, Tensor};

/// Extent of one scale's location grid. Locations are row-major `u32`
/// indices `y * width + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(height: usize, width: usize) -> Self {
        GridDims { height, width }
    }

    /// Grid of an `[H, W, C]` feature tensor.
    pub fn of<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [h, w, _] => Ok(GridDims::new(*h, *w)),
            s => Err(Error::Dimension(format!("expected [H, W, C] features, got {:?}", s))),
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: u32, y: u32) -> u32 {
        y * self.width as u32 + x
    }

    /// `[x, y]` of a row-major index.
    pub fn coords(&self, i: u32) -> [u32; 2] {
        [i % self.width as u32, i / self.width as u32]
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn coarser(&self) -> GridDims {
        GridDims::new(self.height / 2, self.width / 2)
    }

    pub fn finer(&self) -> GridDims {
        GridDims::new(self.height * 2, self.width * 2)
    }
}

/// Logit multiplier `gain / sqrt(C)`.
pub fn logit_scale(channels: usize, gain: f64) -> f64 {
    gain / (channels.max(1) as f64).sqrt()
}

/// Read access shared by dense and sparse maps.
pub trait CorrMap<T> {
    fn grid(&self) -> GridDims;
    /// Row-major location of the `j`-th support entry.
    fn location(&self, j: usize) -> u32;
    fn probs(&self) -> &[T];
}

/// Distribution over every location of the target grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCorrMap<T> {
    pub grid: GridDims,
    pub probs: Vec<T>,
}

/// Distribution over an explicit region of target locations.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCorrMap<T> {
    pub grid: GridDims,
    pub region: Vec<u32>,
    pub probs: Vec<T>,
}

impl<T> CorrMap<T> for DenseCorrMap<T> {
    fn grid(&self) -> GridDims {
        self.grid
    }
    fn location(&self, j: usize) -> u32 {
        j as u32
    }
    fn probs(&self) -> &[T] {
        &self.probs
    }
}

impl<T> CorrMap<T> for SparseCorrMap<T> {
    fn grid(&self) -> GridDims {
        self.grid
    }
    fn location(&self, j: usize) -> u32 {
        self.region[j]
    }
    fn probs(&self) -> &[T] {
        &self.probs
    }
}

/// Maps of every source location of one scale, stored row-major with a
/// shared width. `plan` lists each row's support; `None` means the whole
/// target grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct MapBatch {
    pub scale: usize,
    pub src: GridDims,
    pub tgt: GridDims,
    pub plan: Option<Arc<IndexPlan>>,
    pub probs: Vec<f32>,
}

impl MapBatch {
    pub fn width(&self) -> usize {
        self.plan.as_ref().map_or(self.tgt.len(), |p| p.width())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.probs[i * w..(i + 1) * w]
    }

    pub fn location(&self, i: usize, j: usize) -> u32 {
        self.plan.as_ref().map_or(j as u32, |p| p.row(i)[j])
    }

    /// Position of target location `loc` in row `i`, if supported.
    pub fn position(&self, i: usize, loc: u32) -> Option<usize> {
        match &self.plan {
            None => ((loc as usize) < self.tgt.len()).then_some(loc as usize),
            Some(p) => p.row(i).iter().position(|&l| l == loc),
        }
    }

    /// Row `i` as a standalone map.
    pub fn map(&self, i: usize) -> SparseCorrMap<f32> {
        SparseCorrMap {
            grid: self.tgt,
            region: (0..self.width()).map(|j| self.location(i, j)).collect(),
            probs: self.row(i).to_vec(),
        }
    }
}

/// Unscaled inner products of `query` with the target rows in `region`
/// (every row when `None`), written into `out`.
pub(crate) fn scores_into<T: Scalar>(query: &[T], keys: &[T], region: Option<&[u32]>, out: &mut Vec<T>) {
    let c = query.len();
    out.clear();
    match region {
        Some(r) => dots_into(query, keys, r.iter().map(|&j| j as usize), out),
        None => dots_into(query, keys, 0..keys.len() / c, out),
    }
}

/// Scales `scores` in place and turns them into probabilities.
pub(crate) fn normalize_scores<T: Scalar>(scores: &mut [T], scale: T) {
    scores.iter_mut().for_each(|s| *s *= scale);
    softmax_in_place(scores);
}

fn check_features<T: Scalar>(f_src: &[T], f_tgt: &Tensor<T>) -> Result<GridDims> {
    let grid = GridDims::of(f_tgt)?;
    if f_tgt.last_dim() != f_src.len() {
        return Err(Error::Dimension(format!(
            "source feature has {} channels, target grid {}",
            f_src.len(),
            f_tgt.last_dim()
        )));
    }
    if !f_src.iter().all(|v| v.is_finite()) || !f_tgt.all_finite() {
        return Err(Error::Numeric("non-finite features".into()));
    }
    Ok(grid)
}

/// Softmax of `scale · f_src ⊙ F_tgt` over the whole target grid.
pub fn dense_map<T: Scalar>(f_src: &[T], f_tgt: &Tensor<T>, scale: f64) -> Result<DenseCorrMap<T>> {
    let grid = check_features(f_src, f_tgt)?;
    let mut probs = Vec::with_capacity(grid.len());
    scores_into(f_src, f_tgt.data(), None, &mut probs);
    normalize_scores(&mut probs, T::from_f64(scale));
    Ok(DenseCorrMap { grid, probs })
}

/// Softmax restricted to the target features at `region`.
pub fn sparse_map<T: Scalar>(f_src: &[T], f_tgt: &Tensor<T>, region: &[u32], scale: f64) -> Result<SparseCorrMap<T>> {
    let grid = check_features(f_src, f_tgt)?;
    if region.is_empty() {
        return Err(Error::Argument("empty search region".into()));
    }
    if let Some(bad) = region.iter().find(|&&j| j as usize >= grid.len()) {
        return Err(Error::Index(format!("region location {} outside {} cells", bad, grid.len())));
    }
    let mut probs = Vec::with_capacity(region.len());
    scores_into(f_src, f_tgt.data(), Some(region), &mut probs);
    normalize_scores(&mut probs, T::from_f64(scale));
    Ok(SparseCorrMap {
        grid,
        region: region.to_vec(),
        probs,
    })
}

/// Probability-weighted mean `[x, y]` of the map's support.
pub fn expectation<T: Scalar, M: CorrMap<T>>(map: &M) -> [f64; 2] {
    let grid = map.grid();
    let mut acc = [0.0; 2];
    for (j, p) in map.probs().iter().enumerate() {
        let [x, y] = grid.coords(map.location(j));
        let p = p.as_f64();
        acc[0] += p * x as f64;
        acc[1] += p * y as f64;
    }
    acc
}

/// Largest probability of the map.
pub fn confidence<T: Scalar, M: CorrMap<T>>(map: &M) -> T {
    map.probs().iter().copied().fold(T::zero(), T::max)
}
