//! Multi-scale negative log-likelihood of the ground truth.

use serde::{Deserialize, Serialize};

use crate::corrmap::MapBatch;
use crate::error::{Error, Result};
use crate::numeric::NLL_FLOOR;
use crate::scene::Correspondence;

/// Summed `−ln p` of every ground-truth target, per scale and in total.
/// A target outside its map's search region has no probability; it is
/// counted in `masked` and contributes nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `Σ_k Σ_l`, accumulated correspondence by correspondence.
    pub total: f64,
    /// Index `l - 1`.
    pub per_scale: Vec<f64>,
    pub terms: usize,
    pub masked: usize,
    /// Probabilities below the floor.
    pub clamped: usize,
    /// Full-resolution correspondences the report covers.
    pub correspondences: usize,
}

impl LossReport {
    pub fn merge(&mut self, other: &LossReport) {
        if self.per_scale.len() < other.per_scale.len() {
            self.per_scale.resize(other.per_scale.len(), 0.0);
        }
        for (a, b) in self.per_scale.iter_mut().zip(&other.per_scale) {
            *a += b;
        }
        self.total += other.total;
        self.terms += other.terms;
        self.masked += other.masked;
        self.clamped += other.clamped;
        self.correspondences += other.correspondences;
    }

    /// Mean loss per correspondence.
    pub fn mean(&self) -> f64 {
        self.total / self.correspondences.max(1) as f64
    }
}

/// Loss of one direction. `gt[l - 1]` lists the correspondences at scale
/// `l`, aligned so that entry `k` is the same pixel at every scale.
pub fn loss_from_maps(maps: &[MapBatch], gt: &[Vec<Correspondence>]) -> Result<LossReport> {
    let levels = gt.len();
    if levels == 0 {
        return Err(Error::Argument("no ground truth scales".into()));
    }
    let n = gt[0].len();
    if gt.iter().any(|g| g.len() != n) {
        return Err(Error::Dimension("ground truth lists differ in length across scales".into()));
    }
    let mut by_scale: Vec<Option<&MapBatch>> = vec![None; levels];
    for m in maps {
        if m.scale == 0 || m.scale > levels {
            return Err(Error::Index(format!("map of scale {} for {} scales", m.scale, levels)));
        }
        by_scale[m.scale - 1] = Some(m);
    }
    let maps: Vec<&MapBatch> = by_scale
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.ok_or_else(|| Error::Argument(format!("no map at scale {}", i + 1))))
        .collect::<Result<_>>()?;

    let mut report = LossReport {
        per_scale: vec![0.0; levels],
        correspondences: n,
        ..LossReport::default()
    };
    // -ln p of correspondence k at scale l, or None when masked.
    let term = |l: usize, c: &Correspondence| -> Result<Option<(f64, bool)>> {
        let m = maps[l];
        if !m.src.contains(c.src[0], c.src[1]) || !m.tgt.contains(c.tgt[0], c.tgt[1]) {
            return Err(Error::Index(format!("correspondence {:?} outside the scale-{} grids", c, l + 1)));
        }
        let i = m.src.index(c.src[0], c.src[1]) as usize;
        Ok(m.position(i, m.tgt.index(c.tgt[0], c.tgt[1])).map(|j| {
            let p = m.row(i)[j] as f64;
            if p < NLL_FLOOR {
                (-NLL_FLOOR.ln(), true)
            } else {
                (-p.ln(), false)
            }
        }))
    };
    for (l, list) in gt.iter().enumerate() {
        for c in list {
            match term(l, c)? {
                Some((v, clamped)) => {
                    report.per_scale[l] += v;
                    report.terms += 1;
                    report.clamped += clamped as usize;
                }
                None => report.masked += 1,
            }
        }
    }
    for k in 0..n {
        let mut sum = 0.0;
        for (l, list) in gt.iter().enumerate() {
            if let Some((v, _)) = term(l, &list[k])? {
                sum += v;
            }
        }
        report.total += sum;
    }
    Ok(report)
}
