//! Beam search across scales: top-K hypothesis selection, four-child
//! expansion into the next finer grid, search-region construction, and the
//! one-to-m ground-truth analysis.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corrmap::{CorrMap, GridDims};
use crate::error::{Error, Result};
use crate::numeric::{IndexPlan, Scalar};
use crate::scene::Correspondence;
use crate::svg::{Frame, Svg};

/// Beam widths, coarsest first: `[K_L, ..., K_2]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub widths: Vec<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl BeamConfig {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let cfg = BeamConfig { widths };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `[32, 24, 16, 8]`.
    pub fn paper() -> Self {
        BeamConfig {
            widths: vec![32, 24, 16, 8],
        }
    }

    /// Smallest widths that cover 99% of ground truth: `[12, 10, 9, 4]`.
    pub fn minimal() -> Self {
        BeamConfig {
            widths: vec![12, 10, 9, 4],
        }
    }

    /// Top-1 propagation at every scale.
    pub fn greedy(levels: usize) -> Self {
        BeamConfig {
            widths: vec![1; levels - 1],
        }
    }

    /// `K_l` equal to the whole scale-`l` grid, so no hypothesis is ever
    /// discarded. `fine` is the scale-1 grid.
    pub fn exhaustive(fine: GridDims, levels: usize) -> Self {
        BeamConfig {
            widths: (2..=levels).rev().map(|l| fine.len() >> (2 * (l - 1))).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "beam widths {:?} must be non-empty and positive",
                self.widths
            )));
        }
        Ok(())
    }

    /// Number of scales the widths describe.
    pub fn levels(&self) -> usize {
        self.widths.len() + 1
    }

    /// `K_l` for `2 <= l <= L`.
    pub fn k(&self, l: usize) -> usize {
        self.widths[self.levels() - l]
    }
}

/// Top-K of one map.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection<T> {
    pub locations: Vec<u32>,
    pub probs: Vec<T>,
    /// `K` exceeded the support and was reduced to it.
    pub clamped: bool,
}

/// Maps a float onto an unsigned integer with the same ordering.
fn ordered_bits(v: f64) -> u64 {
    let b = (v + 0.0).to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | 1 << 63
    }
}

/// Indices of the `k` largest `probs`, by probability descending, ties by
/// ascending location.
pub(crate) fn top_entries<T: Scalar>(probs: &[T], location: impl Fn(usize) -> u32, k: usize) -> Vec<usize> {
    let k = k.min(probs.len());
    if k == 0 {
        return Vec::new();
    }
    let mut keys: Vec<(u64, u32, u32)> = probs
        .iter()
        .enumerate()
        .map(|(j, p)| (!ordered_bits(p.as_f64()), location(j), j as u32))
        .collect();
    if k < keys.len() {
        keys.select_nth_unstable(k - 1);
        keys.truncate(k);
    }
    keys.sort_unstable();
    keys.into_iter().map(|e| e.2 as usize).collect()
}

/// The `k` most probable locations of `map`. `k` larger than the support is
/// clamped to it and flagged.
pub fn select_topk<T: Scalar, M: CorrMap<T>>(map: &M, k: usize) -> Result<Selection<T>> {
    if k == 0 {
        return Err(Error::Argument("beam width must be at least 1".into()));
    }
    let probs = map.probs();
    let idx = top_entries(probs, |j| map.location(j), k);
    Ok(Selection {
        locations: idx.iter().map(|&j| map.location(j)).collect(),
        probs: idx.iter().map(|&j| probs[j]).collect(),
        clamped: k > probs.len(),
    })
}

/// Children `2p + [0,0], [1,0], [0,1], [1,1]` of each coarse location, in
/// the next finer grid.
pub fn expand_children(locs: &[u32], coarse: GridDims) -> Vec<u32> {
    let fine = coarse.finer();
    let mut out = Vec::with_capacity(4 * locs.len());
    for &p in locs {
        let [x, y] = coarse.coords(p);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            out.push(fine.index(2 * x + dx, 2 * y + dy));
        }
    }
    out
}

/// Top-K target locations for every source location of one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    /// Scale of the maps the hypotheses were taken from.
    pub scale: usize,
    pub src: GridDims,
    pub tgt: GridDims,
    /// Row width after clamping.
    pub k: usize,
    pub clamped: bool,
    /// `src.len() x k`, best first.
    pub locations: Vec<u32>,
    pub probs: Vec<f32>,
}

impl HypothesisSet {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.locations[i * self.k..(i + 1) * self.k]
    }

    pub fn row_probs(&self, i: usize) -> &[f32] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }
}

/// Sparse search regions `Ω_t,i^l` of one scale, one plan row per source
/// location.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchRegions {
    pub scale: usize,
    pub src: GridDims,
    pub tgt: GridDims,
    pub plan: Arc<IndexPlan>,
}

impl SearchRegions {
    /// The whole target grid for every source location.
    pub fn full(scale: usize, src: GridDims, tgt: GridDims) -> Self {
        SearchRegions {
            scale,
            src,
            tgt,
            plan: Arc::new(IndexPlan::full(src.len(), tgt.len())),
        }
    }

    pub fn region(&self, i: usize) -> &[u32] {
        self.plan.row(i)
    }
}

/// Regions at the next finer scale: every fine source location takes the
/// children of its coarse parent's hypotheses.
pub fn regions_from(h: &HypothesisSet) -> SearchRegions {
    let (fsrc, ftgt) = (h.src.finer(), h.tgt.finer());
    let per_parent: Vec<Vec<u32>> = (0..h.src.len()).map(|i| expand_children(h.row(i), h.tgt)).collect();
    let width = 4 * h.k;
    let mut idx = Vec::with_capacity(fsrc.len() * width);
    for y in 0..fsrc.height as u32 {
        for x in 0..fsrc.width as u32 {
            idx.extend_from_slice(&per_parent[h.src.index(x / 2, y / 2) as usize]);
        }
    }
    SearchRegions {
        scale: h.scale - 1,
        src: fsrc,
        tgt: ftgt,
        plan: Arc::new(IndexPlan::new(width, idx).expect("uniform rows")),
    }
}

/// Top-`k` hypotheses from row-major probability rows of width
/// `plan.width()` (or `tgt.len()` for dense rows).
pub(crate) fn hypotheses_from_probs<T: Scalar>(
    probs: &[T],
    plan: Option<&IndexPlan>,
    src: GridDims,
    tgt: GridDims,
    scale: usize,
    k: usize,
) -> HypothesisSet {
    let width = plan.map_or(tgt.len(), IndexPlan::width);
    let kk = k.min(width);
    let mut h = HypothesisSet {
        scale,
        src,
        tgt,
        k: kk,
        clamped: k > width,
        locations: Vec::with_capacity(src.len() * kk),
        probs: Vec::with_capacity(src.len() * kk),
    };
    for i in 0..src.len() {
        let row = &probs[i * width..(i + 1) * width];
        let loc = |j: usize| plan.map_or(j as u32, |p| p.row(i)[j]);
        for j in top_entries(row, loc, kk) {
            h.locations.push(loc(j));
            h.probs.push(row[j].as_f64() as f32);
        }
    }
    h
}

/// Selects the top `k` of every map (row-major over `src`, all taken at
/// `scale`) and builds the regions at `scale - 1`.
pub fn propagate<T: Scalar, M: CorrMap<T>>(
    maps: &[M],
    src: GridDims,
    scale: usize,
    k: usize,
) -> Result<(HypothesisSet, SearchRegions)> {
    if maps.len() != src.len() || maps.is_empty() {
        return Err(Error::Dimension(format!("{} maps for {} source locations", maps.len(), src.len())));
    }
    if scale < 2 {
        return Err(Error::Argument("no finer scale below 1".into()));
    }
    let tgt = maps[0].grid();
    let support = maps[0].probs().len();
    if maps.iter().any(|m| m.probs().len() != support || m.grid() != tgt) {
        return Err(Error::Dimension("maps of one scale must share support size and grid".into()));
    }
    let mut h = HypothesisSet {
        scale,
        src,
        tgt,
        k: k.min(support),
        clamped: false,
        locations: Vec::with_capacity(src.len() * k.min(support)),
        probs: Vec::with_capacity(src.len() * k.min(support)),
    };
    for m in maps {
        let sel = select_topk(m, k)?;
        h.clamped |= sel.clamped;
        h.locations.extend(sel.locations);
        h.probs.extend(sel.probs.iter().map(|p| p.as_f64() as f32));
    }
    let regions = regions_from(&h);
    Ok((h, regions))
}

/// `(covered, total)`: ground-truth pairs whose target lies in the region of
/// their source location.
pub fn coverage_counts(regions: &SearchRegions, gt: &[Correspondence]) -> (usize, usize) {
    let mut covered = 0;
    for c in gt {
        let i = regions.src.index(c.src[0], c.src[1]) as usize;
        let t = regions.tgt.index(c.tgt[0], c.tgt[1]);
        if regions.region(i).contains(&t) {
            covered += 1;
        }
    }
    (covered, gt.len())
}

/// Fraction of ground-truth pairs covered by the regions.
pub fn gt_coverage(regions: &SearchRegions, gt: &[Correspondence]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Argument("coverage of an empty ground-truth set".into()));
    }
    let (c, n) = coverage_counts(regions, gt);
    Ok(c as f64 / n as f64)
}

/// Distribution of one-to-m problems at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypoHistogram {
    pub scale: usize,
    /// `counts[m - 1]` source locations had `m` distinct targets.
    pub counts: Vec<u64>,
    /// Running fraction, ending at exactly 1.
    pub cumulative: Vec<f64>,
    /// Smallest `m` with cumulative fraction at least 0.99.
    pub m99: usize,
}

impl HypoHistogram {
    pub fn from_counts(scale: usize, counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Argument("hypothesis analysis of empty ground truth".into()));
        }
        let mut run = 0;
        let cumulative: Vec<f64> = counts
            .iter()
            .map(|c| {
                run += c;
                run as f64 / total as f64
            })
            .collect();
        let m99 = cumulative.iter().position(|&c| c >= 0.99).expect("ends at 1") + 1;
        Ok(HypoHistogram {
            scale,
            counts,
            cumulative,
            m99,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `m,count,cumulative` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,count,cumulative\n");
        for (i, (c, f)) in self.counts.iter().zip(&self.cumulative).enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, c, f);
        }
        s
    }

    /// Bars of the m distribution with the cumulative curve and a dashed
    /// line at `m99`.
    pub fn to_svg(&self) -> String {
        let mut svg = Svg::new(560.0, 340.0);
        let n = self.counts.len().max(1) as f64;
        let total = self.total().max(1) as f64;
        let frame = Frame {
            x0: 60.0,
            y0: 40.0,
            w: 460.0,
            h: 240.0,
            xr: (0.5, n + 0.5),
            yr: (0.0, 1.0),
        };
        frame.axes(&mut svg, "m", "fraction");
        svg.text(60.0, 20.0, 14.0, &format!("one-to-m problems, scale {}", self.scale));
        let bw = frame.w / n * 0.8;
        svg.group("bars");
        for (i, c) in self.counts.iter().enumerate() {
            let x = frame.px(i as f64 + 1.0) - bw / 2.0;
            let y = frame.py(*c as f64 / total);
            svg.rect(x, y, bw, frame.py(0.0) - y, r#"fill="steelblue""#);
        }
        svg.end_group();
        let pts: Vec<(f64, f64)> = self
            .cumulative
            .iter()
            .enumerate()
            .map(|(i, c)| (frame.px(i as f64 + 1.0), frame.py(*c)))
            .collect();
        svg.polyline(&pts, r#"stroke="darkorange" stroke-width="2""#);
        let xm = frame.px(self.m99 as f64);
        svg.line(xm, frame.y0, xm, frame.y0 + frame.h, r#"stroke="gray" stroke-dasharray="4,3""#);
        svg.text(xm + 4.0, frame.y0 + 12.0, 11.0, &format!("m99 = {}", self.m99));
        svg.finish()
    }
}

/// Counts, over every image pair and every distinct source location, how
/// many distinct target locations its ground truth occupies. Each element
/// of `sets` is one pair's ground truth at `scale`.
pub fn one_to_m_analysis(sets: &[Vec<Correspondence>], scale: usize) -> Result<HypoHistogram> {
    let mut counts: Vec<u64> = Vec::new();
    for gt in sets {
        let mut targets: BTreeMap<[u32; 2], Vec<[u32; 2]>> = BTreeMap::new();
        for c in gt {
            targets.entry(c.src).or_default().push(c.tgt);
        }
        for t in targets.values_mut() {
            t.sort_unstable();
            t.dedup();
            let m = t.len();
            if counts.len() < m {
                counts.resize(m, 0);
            }
            counts[m - 1] += 1;
        }
    }
    HypoHistogram::from_counts(scale, counts)
}
