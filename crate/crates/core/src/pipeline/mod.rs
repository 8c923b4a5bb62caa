//! End-to-end matching of an image pair in both directions.

mod flow;
pub(crate) mod forward;
mod trace;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use flow::{read_flow, write_flow, DenseFlow, FlowSummary};
pub use trace::{trace_svgs, Trace, TraceScale};

use crate::beam::BeamConfig;
use crate::error::{Error, Result};
use crate::features::image_tensor;
use crate::image::Image;
use crate::model::Model;
use crate::numeric::Graph;
use forward::{forward, DirOut, FineField, Mode};

/// Pixel count above which [`match_with_trace`] refuses to keep every
/// scale's hypotheses.
pub const DEFAULT_TRACE_PIXEL_BUDGET: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    pub beam: BeamConfig,
    pub trace_pixel_budget: usize,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            beam: BeamConfig::default(),
            trace_pixel_budget: DEFAULT_TRACE_PIXEL_BUDGET,
        }
    }
}

/// Matches of one direction on the unpadded source grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionMatch {
    /// Expected target coordinate and map peak per source pixel.
    pub flow: DenseFlow,
    /// Target pixel with the largest raw feature inner product at the
    /// finest scale, ties to the lower row-major index.
    pub argmax: Vec<[u32; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Source to target.
    pub forward: DirectionMatch,
    /// Target to source.
    pub backward: DirectionMatch,
}

fn pad_to(image: &Image, stride: usize) -> Image {
    let up = |v: usize| v.div_ceil(stride) * stride;
    if image.height() % stride == 0 && image.width() % stride == 0 {
        image.clone()
    } else {
        image.padded(up(image.height()), up(image.width()))
    }
}

fn crop(fine: &FineField, src: (usize, usize), tgt: (usize, usize)) -> DirectionMatch {
    let (h, w) = src;
    let (max_x, max_y) = ((tgt.1 - 1) as f64, (tgt.0 - 1) as f64);
    let mut flow = DenseFlow {
        height: h,
        width: w,
        coords: Vec::with_capacity(h * w),
        confidence: Vec::with_capacity(h * w),
    };
    let mut argmax = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = fine.grid.index(x as u32, y as u32) as usize;
            let [ex, ey] = fine.coords[i];
            flow.coords.push([ex.clamp(0.0, max_x) as f32, ey.clamp(0.0, max_y) as f32]);
            flow.confidence.push(fine.confidence[i]);
            let [ax, ay] = fine.tgt.coords(fine.argmax[i]);
            argmax.push([ax.min(tgt.1 as u32 - 1), ay.min(tgt.0 as u32 - 1)]);
        }
    }
    DirectionMatch { flow, argmax }
}

fn run(model: &Model, src: &Image, tgt: &Image, beam: &BeamConfig, keep: bool) -> Result<(MatchResult, DirOut, DirOut)> {
    model.config.validate()?;
    for img in [src, tgt] {
        if img.height() == 0 || img.width() == 0 {
            return Err(Error::Argument("empty image".into()));
        }
    }
    let stride = model.config.pyramid.stride();
    let (ps, pt) = (pad_to(src, stride), pad_to(tgt, stride));
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g, false);
    let xs = g.constant(image_tensor(&ps));
    let xt = g.constant(image_tensor(&pt));
    let out = forward(&mut g, &bound, &model.config, beam, xs, xt, &Mode::Infer, keep)?;
    let dims = |i: &Image| (i.height(), i.width());
    let fine = |d: &DirOut| d.fine.as_ref().ok_or_else(|| Error::Numeric("no finest-scale output".into())).cloned();
    let result = MatchResult {
        forward: crop(&fine(&out.st)?, dims(src), dims(tgt)),
        backward: crop(&fine(&out.ts)?, dims(tgt), dims(src)),
    };
    Ok((result, out.st, out.ts))
}

/// Dense matches in both directions. Images of any size are zero-padded on
/// the bottom and right to the pyramid stride; outputs cover the original
/// pixels and point inside the original target.
pub fn match_images(model: &Model, src: &Image, tgt: &Image, beam: &BeamConfig) -> Result<MatchResult> {
    Ok(run(model, src, tgt, beam, false)?.0)
}

/// [`match_images`] that also keeps every scale's maps, hypotheses, search
/// regions and self-attention key lists of the source-to-target pass.
pub fn match_with_trace(model: &Model, src: &Image, tgt: &Image, opts: &MatchOptions) -> Result<(MatchResult, Trace)> {
    let stride = model.config.pyramid.stride();
    let padded = src.height().div_ceil(stride) * stride * src.width().div_ceil(stride) * stride;
    if padded > opts.trace_pixel_budget {
        return Err(Error::Argument(format!(
            "tracing {} pixels exceeds the budget of {}",
            padded, opts.trace_pixel_budget
        )));
    }
    let (result, st, _) = run(model, src, tgt, &opts.beam, true)?;
    let trace = Trace {
        levels: model.config.levels(),
        source_dims: (src.height(), src.width()),
        hypotheses: st.hypotheses,
        regions: st.regions,
        self_regions: st.self_regions,
        maps: st.maps,
    };
    Ok((result, trace))
}
