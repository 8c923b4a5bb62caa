//! The coarse-to-fine pass shared by inference and training.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::attention::{positional_encoding, run_scale, self_plan, ModulePlans};
use crate::beam::{hypotheses_from_probs, regions_from, top_entries, BeamConfig, HypothesisSet, SearchRegions};
use crate::corrmap::{logit_scale, normalize_scores, scores_into, GridDims, MapBatch};
use crate::error::{Error, Result};
use crate::features::extract_graph;
use crate::model::ModelConfig;
use crate::numeric::{softmax_in_place, Graph, IndexPlan, Scalar, Var};
use crate::params::Bound;
use crate::scene::Correspondence;

/// Ground truth per scale (`[l - 1]`) for both directions.
pub(crate) struct TrainTargets<'a> {
    pub st: &'a [Vec<Correspondence>],
    pub ts: &'a [Vec<Correspondence>],
    pub teacher_forcing: bool,
}

pub(crate) enum Mode<'a> {
    Infer,
    Train(TrainTargets<'a>),
}

/// Summed NLL of one scale and direction.
#[allow(dead_code)]
pub(crate) struct ScaleTerm {
    pub scale: usize,
    pub loss: Var,
    pub terms: usize,
    pub masked: usize,
    pub clamped: usize,
}

/// Scale-1 output of inference, on the padded grid.
#[derive(Clone)]
pub(crate) struct FineField {
    pub grid: GridDims,
    pub tgt: GridDims,
    pub coords: Vec<[f64; 2]>,
    pub confidence: Vec<f32>,
    /// Location of the largest unscaled inner product; ties to the lower
    /// row-major index.
    pub argmax: Vec<u32>,
}

#[derive(Default)]
pub(crate) struct DirOut {
    /// Scales `L..=2`.
    pub hypotheses: Vec<HypothesisSet>,
    /// Scales `L-1..=1`.
    pub regions: Vec<SearchRegions>,
    /// Self-attention key lists of this direction's source image, scales
    /// `L-1..=1` (empty when no module needs them).
    pub self_regions: Vec<SearchRegions>,
    /// Scales `L..=1`; in inference mode only when kept.
    pub maps: Vec<MapBatch>,
    pub terms: Vec<ScaleTerm>,
    pub fine: Option<FineField>,
}

#[derive(Default)]
pub(crate) struct ForwardOut {
    pub st: DirOut,
    pub ts: DirOut,
}

/// Runs the matcher on `[H, W, 3]` image nodes. In training mode every
/// map is a graph node and an NLL term is recorded per scale and direction.
pub(crate) fn forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    beam: &BeamConfig,
    img_s: Var,
    img_t: Var,
    mode: &Mode,
    keep: bool,
) -> Result<ForwardOut> {
    let levels = cfg.levels();
    if beam.levels() != levels {
        return Err(Error::Config(format!(
            "{} beam widths for a {}-scale model",
            beam.widths.len(),
            levels
        )));
    }
    beam.validate()?;
    let pyr_s = extract_graph(g, bound, &cfg.pyramid, img_s)?;
    let pyr_t = extract_graph(g, bound, &cfg.pyramid, img_t)?;
    let mut out = ForwardOut::default();
    let mut cross: Option<(SearchRegions, SearchRegions)> = None;
    let mut selfp: Option<(SearchRegions, SearchRegions)> = None;
    for l in (1..=levels).rev() {
        let (mut fs, mut ft) = (pyr_s[l - 1], pyr_t[l - 1]);
        let (gs, gt) = (GridDims::of(g.value(fs))?, GridDims::of(g.value(ft))?);
        let c = cfg.pyramid.channels_at(l);
        if cfg.attention.modules_at(l) > 0 {
            let pe = g.constant(positional_encoding(gs, c));
            fs = g.add(fs, pe)?;
            let pe = g.constant(positional_encoding(gt, c));
            ft = g.add(ft, pe)?;
            let plans = ModulePlans {
                cross_s: cross.as_ref().map(|r| r.0.plan.clone()),
                cross_t: cross.as_ref().map(|r| r.1.plan.clone()),
                self_s: selfp.as_ref().map(|r| r.0.plan.clone()),
                self_t: selfp.as_ref().map(|r| r.1.plan.clone()),
            };
            (fs, ft) = run_scale(g, bound, &cfg.attention, l, fs, ft, &plans)?;
        }
        let scale = T::from_f64(logit_scale(c, cfg.logit_gain));
        let k = beam_width(beam, l);
        let (plan_s, plan_t) = match &cross {
            Some((a, b)) => (Some(a.plan.clone()), Some(b.plan.clone())),
            None => (None, None),
        };
        let (hs, ht) = match mode {
            Mode::Infer => (
                infer_step(g, fs, ft, plan_s.as_ref(), l, scale, k, keep, &mut out.st)?,
                infer_step(g, ft, fs, plan_t.as_ref(), l, scale, k, keep, &mut out.ts)?,
            ),
            Mode::Train(t) => (
                train_step(g, fs, ft, plan_s, l, scale, k, &t.st[l - 1], t.teacher_forcing, &mut out.st)?,
                train_step(g, ft, fs, plan_t, l, scale, k, &t.ts[l - 1], t.teacher_forcing, &mut out.ts)?,
            ),
        };
        let (Some(hs), Some(ht)) = (hs, ht) else { break };
        let (rs, rt) = (regions_from(&hs), regions_from(&ht));
        if keep {
            out.st.hypotheses.push(hs);
            out.ts.hypotheses.push(ht);
            out.st.regions.push(rs.clone());
            out.ts.regions.push(rt.clone());
        }
        cross = Some((rs, rt));
        if (1..l).any(|m| cfg.attention.modules_at(m) > 0) {
            let kk = beam.k(l);
            let ps = self_plan(g.value(fs), selfp.as_ref().map(|r| &*r.0.plan), l, kk)?;
            let pt = self_plan(g.value(ft), selfp.as_ref().map(|r| &*r.1.plan), l, kk)?;
            if keep {
                out.st.self_regions.push(ps.clone());
                out.ts.self_regions.push(pt.clone());
            }
            selfp = Some((ps, pt));
        }
    }
    Ok(out)
}

fn beam_width(beam: &BeamConfig, l: usize) -> Option<usize> {
    (l > 1).then(|| beam.k(l))
}

fn grids<T: Scalar>(g: &Graph<T>, q: Var, k: Var) -> Result<(GridDims, GridDims, usize)> {
    let (vq, vk) = (g.value(q), g.value(k));
    if !vq.all_finite() || !vk.all_finite() {
        return Err(Error::Numeric("non-finite features".into()));
    }
    Ok((GridDims::of(vq)?, GridDims::of(vk)?, vq.last_dim()))
}

fn keep_row<T: Scalar>(keep: bool, buf: &[T]) -> Vec<f32> {
    if keep {
        buf.iter().map(|p| p.as_f64() as f32).collect()
    } else {
        Vec::new()
    }
}

/// Streams the maps of one scale row by row: top-K for `l > 1`, the final
/// expectation, confidence and argmax at `l = 1`. The maps themselves are
/// stored only with `keep`.
#[allow(clippy::too_many_arguments)]
fn infer_step<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    plan: Option<&Arc<IndexPlan>>,
    l: usize,
    scale: T,
    topk: Option<usize>,
    keep: bool,
    out: &mut DirOut,
) -> Result<Option<HypothesisSet>> {
    let (src, tgt, _) = grids(g, q, k)?;
    let (qd, kd) = (g.value(q), g.value(k).data());
    let width = plan.map_or(tgt.len(), |p| p.width());
    let loc = |i: usize, j: usize| plan.map_or(j as u32, |p| p.row(i)[j]);
    let mut kept = keep.then(|| MapBatch {
        scale: l,
        src,
        tgt,
        plan: plan.cloned(),
        probs: Vec::with_capacity(src.len() * width),
    });
    match topk {
        Some(kk) => {
            let kk = kk.min(width);
            let rows: Vec<(Vec<(u32, f32)>, Vec<f32>)> = (0..src.len())
                .into_par_iter()
                .map_init(Vec::new, |buf, i| {
                    scores_into(qd.row(i), kd, plan.map(|p| p.row(i)), buf);
                    normalize_scores(buf, scale);
                    let top = top_entries(buf, |j| loc(i, j), kk)
                        .into_iter()
                        .map(|j| (loc(i, j), buf[j].as_f64() as f32))
                        .collect();
                    (top, keep_row(keep, buf))
                })
                .collect();
            let mut h = HypothesisSet {
                scale: l,
                src,
                tgt,
                k: kk,
                clamped: topk.unwrap_or(0) > width,
                locations: Vec::with_capacity(src.len() * kk),
                probs: Vec::with_capacity(src.len() * kk),
            };
            for (row, map) in rows {
                for (a, p) in row {
                    h.locations.push(a);
                    h.probs.push(p);
                }
                if let Some(b) = kept.as_mut() {
                    b.probs.extend(map);
                }
            }
            out.maps.extend(kept);
            Ok(Some(h))
        }
        None => {
            let rows: Vec<([f64; 2], f32, u32, Vec<f32>)> = (0..src.len())
                .into_par_iter()
                .map_init(Vec::new, |buf, i| {
                    scores_into(qd.row(i), kd, plan.map(|p| p.row(i)), buf);
                    let mut best = 0;
                    for j in 1..buf.len() {
                        let (a, b) = (buf[j], buf[best]);
                        if a > b || (a == b && loc(i, j) < loc(i, best)) {
                            best = j;
                        }
                    }
                    let argmax = loc(i, best);
                    normalize_scores(buf, scale);
                    let (mut ex, mut ey, mut conf) = (0.0f64, 0.0f64, T::zero());
                    for (j, p) in buf.iter().enumerate() {
                        let [x, y] = tgt.coords(loc(i, j));
                        ex += p.as_f64() * x as f64;
                        ey += p.as_f64() * y as f64;
                        conf = conf.max(*p);
                    }
                    ([ex, ey], conf.as_f64() as f32, argmax, keep_row(keep, buf))
                })
                .collect();
            if let Some(b) = kept.as_mut() {
                rows.iter().for_each(|r| b.probs.extend_from_slice(&r.3));
            }
            out.maps.extend(kept);
            out.fine = Some(FineField {
                grid: src,
                tgt,
                coords: rows.iter().map(|r| r.0).collect(),
                confidence: rows.iter().map(|r| r.1).collect(),
                argmax: rows.iter().map(|r| r.2).collect(),
            });
            Ok(None)
        }
    }
}

/// Builds the scale's logits on the graph, records its NLL term and returns
/// the hypotheses for the next scale.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    plan: Option<Arc<IndexPlan>>,
    l: usize,
    scale: T,
    topk: Option<usize>,
    gt: &[Correspondence],
    teacher_forcing: bool,
    out: &mut DirOut,
) -> Result<Option<HypothesisSet>> {
    let (src, tgt, c) = grids(g, q, k)?;
    let qr = g.reshape(q, &[src.len(), c])?;
    let kr = g.reshape(k, &[tgt.len(), c])?;
    let logits = match &plan {
        None => g.matmul_nt(qr, kr, scale)?,
        Some(p) => g.indexed_dot(qr, kr, p.clone(), scale)?,
    };
    let width = g.value(logits).last_dim();
    let mut probs = g.value(logits).data().to_vec();
    for row in probs.chunks_mut(width) {
        softmax_in_place(row);
    }
    let batch = MapBatch {
        scale: l,
        src,
        tgt,
        plan: plan.clone(),
        probs: probs.iter().map(|p| p.as_f64() as f32).collect(),
    };
    let mut targets = Vec::with_capacity(gt.len());
    let mut masked = 0;
    for c in gt {
        let i = src.index(c.src[0], c.src[1]) as usize;
        match batch.position(i, tgt.index(c.tgt[0], c.tgt[1])) {
            Some(j) => targets.push((i, j)),
            None => masked += 1,
        }
    }
    let (loss, clamped) = g.nll(logits, &targets)?;
    out.terms.push(ScaleTerm {
        scale: l,
        loss,
        terms: targets.len(),
        masked,
        clamped,
    });
    out.maps.push(batch);
    let Some(kk) = topk else { return Ok(None) };
    let mut h = hypotheses_from_probs(&probs, plan.as_deref(), src, tgt, l, kk);
    if teacher_forcing {
        force_ground_truth(&mut h, gt);
    }
    Ok(Some(h))
}

/// Puts every ground-truth target of a source location into its hypothesis
/// row, displacing the lowest-ranked non-GT entries.
fn force_ground_truth(h: &mut HypothesisSet, gt: &[Correspondence]) {
    let mut wanted: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for c in gt {
        wanted
            .entry(h.src.index(c.src[0], c.src[1]))
            .or_default()
            .push(h.tgt.index(c.tgt[0], c.tgt[1]));
    }
    for (i, mut want) in wanted {
        want.sort_unstable();
        want.dedup();
        let (lo, hi) = (i as usize * h.k, (i as usize + 1) * h.k);
        let row = &mut h.locations[lo..hi];
        let missing: Vec<u32> = want.iter().copied().filter(|t| !row.contains(t)).collect();
        let mut slot = h.k;
        for m in missing {
            while slot > 0 && want.binary_search(&row[slot - 1]).is_ok() {
                slot -= 1;
            }
            if slot == 0 {
                break;
            }
            slot -= 1;
            row[slot] = m;
            h.probs[lo + slot] = 0.0;
        }
    }
}
