//! Per-scale record of one matching pass and its SVG rendering.

use std::fmt::Write;

use crate::beam::{HypothesisSet, SearchRegions};
use crate::corrmap::{GridDims, MapBatch};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::svg::Svg;

/// Source-to-target hypotheses and regions of every scale, on padded grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub levels: usize,
    /// Unpadded source `(height, width)`.
    pub source_dims: (usize, usize),
    /// Scales `L..=2`.
    pub hypotheses: Vec<HypothesisSet>,
    /// Scales `L-1..=1`.
    pub regions: Vec<SearchRegions>,
    /// Source self-attention key lists, scales `L-1..=1`; empty when no
    /// finer scale has attention.
    pub self_regions: Vec<SearchRegions>,
    /// Source-to-target maps, scales `L..=1`.
    pub maps: Vec<MapBatch>,
}

impl Trace {
    pub fn hypotheses_at(&self, l: usize) -> Option<&HypothesisSet> {
        self.hypotheses.iter().find(|h| h.scale == l)
    }

    pub fn regions_at(&self, l: usize) -> Option<&SearchRegions> {
        self.regions.iter().find(|r| r.scale == l)
    }

    pub fn self_regions_at(&self, l: usize) -> Option<&SearchRegions> {
        self.self_regions.iter().find(|r| r.scale == l)
    }

    pub fn maps_at(&self, l: usize) -> Option<&MapBatch> {
        self.maps.iter().find(|m| m.scale == l)
    }
}

/// One rendered scale. Every hypothesis marker carries `class="hyp"`,
/// every search-region cell `class="region-cell"`, every self-attention key
/// `class="self-cell"`, the query `class="query"`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceScale {
    pub scale: usize,
    pub svg: String,
    pub hypotheses: usize,
    pub region_cells: usize,
    pub self_cells: usize,
}

const PANEL: f64 = 320.0;
const MARGIN: f64 = 24.0;

fn pooled(image: &Image, factor: usize, x: usize, y: usize) -> [f32; 3] {
    let mut acc = [0.0f32; 3];
    let mut n = 0.0f32;
    for yy in y * factor..((y + 1) * factor).min(image.height()) {
        for xx in x * factor..((x + 1) * factor).min(image.width()) {
            let p = image.pixel(xx, yy);
            for c in 0..3 {
                acc[c] += p[c];
            }
            n += 1.0;
        }
    }
    if n == 0.0 {
        [0.0; 3]
    } else {
        acc.map(|v| v / n)
    }
}

fn draw_image(svg: &mut Svg, image: &Image, grid: GridDims, factor: usize, x0: f64, cs: f64) {
    svg.group("image");
    for y in 0..grid.height {
        for x in 0..grid.width {
            let p = pooled(image, factor, x, y);
            let [r, g, b] = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            svg.rect(
                x0 + x as f64 * cs,
                MARGIN + y as f64 * cs,
                cs,
                cs,
                &format!(r#"fill="rgb({},{},{})""#, r, g, b),
            );
        }
    }
    svg.end_group();
}

fn cells(svg: &mut Svg, locs: &[u32], grid: GridDims, x0: f64, cs: f64, class: &str, colour: &str) {
    svg.group(&format!("{}s", class));
    for &loc in locs {
        let [x, y] = grid.coords(loc);
        svg.raw(&format!(
            "<rect class=\"{}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" fill-opacity=\"0.45\"/>\n",
            class,
            x0 + x as f64 * cs,
            MARGIN + y as f64 * cs,
            cs,
            cs,
            colour
        ));
    }
    svg.end_group();
}

/// Renders every scale of `trace` for source pixel `query = (x, y)`: the
/// source panel shows the query and its self-attention keys, the target
/// panel the search region and selected hypotheses.
pub fn trace_svgs(trace: &Trace, source: &Image, target: &Image, query: [u32; 2]) -> Result<Vec<TraceScale>> {
    let (h, w) = trace.source_dims;
    if query[0] as usize >= w || query[1] as usize >= h {
        return Err(Error::Index(format!("query ({}, {}) outside the {}x{} source", query[0], query[1], w, h)));
    }
    let mut out = Vec::with_capacity(trace.levels);
    for l in (1..=trace.levels).rev() {
        let factor = 1usize << (l - 1);
        let grids = trace
            .hypotheses_at(l)
            .map(|hy| (hy.src, hy.tgt))
            .or_else(|| trace.regions_at(l).map(|r| (r.src, r.tgt)))
            .ok_or_else(|| Error::Argument(format!("trace has no scale {}", l)))?;
        let (sg, tg) = grids;
        let q = sg.index(query[0] >> (l - 1), query[1] >> (l - 1)) as usize;
        let cs = PANEL / sg.width.max(tg.width).max(sg.height).max(tg.height) as f64;
        let tx0 = 2.0 * MARGIN + sg.width as f64 * cs;
        let mut svg = Svg::new(tx0 + tg.width as f64 * cs + MARGIN, 2.0 * MARGIN + sg.height.max(tg.height) as f64 * cs);
        svg.text(MARGIN, MARGIN - 8.0, 12.0, &format!("scale {} source", l));
        svg.text(tx0, MARGIN - 8.0, 12.0, &format!("scale {} target", l));
        draw_image(&mut svg, source, sg, factor, MARGIN, cs);
        draw_image(&mut svg, target, tg, factor, tx0, cs);

        let self_cells = match trace.self_regions_at(l) {
            Some(r) => {
                cells(&mut svg, r.region(q), sg, MARGIN, cs, "self-cell", "blue");
                r.region(q).len()
            }
            None => 0,
        };
        let region_cells = match trace.regions_at(l) {
            Some(r) => {
                cells(&mut svg, r.region(q), tg, tx0, cs, "region-cell", "red");
                r.region(q).len()
            }
            None => 0,
        };
        let hypotheses = match trace.hypotheses_at(l) {
            Some(hy) => {
                svg.group("hypotheses");
                let arm = (cs * 0.4).max(1.5);
                for &loc in hy.row(q) {
                    let [x, y] = tg.coords(loc);
                    let (cx, cy) = (tx0 + (x as f64 + 0.5) * cs, MARGIN + (y as f64 + 0.5) * cs);
                    let mut d = String::new();
                    let _ = write!(d, "M{:.2} {:.2}H{:.2}M{:.2} {:.2}V{:.2}", cx - arm, cy, cx + arm, cx, cy - arm, cy + arm);
                    svg.raw(&format!("<path class=\"hyp\" d=\"{}\" stroke=\"red\" stroke-width=\"1.5\"/>\n", d));
                }
                svg.end_group();
                hy.k
            }
            None => 0,
        };
        let [qx, qy] = sg.coords(q as u32);
        let (cx, cy) = (MARGIN + (qx as f64 + 0.5) * cs, MARGIN + (qy as f64 + 0.5) * cs);
        let arm = (cs * 0.45).max(2.0);
        svg.raw(&format!(
            "<path class=\"query\" d=\"M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}\" stroke=\"lime\" stroke-width=\"2\"/>\n",
            cx - arm, cy - arm, cx + arm, cy + arm, cx - arm, cy + arm, cx + arm, cy - arm
        ));
        out.push(TraceScale {
            scale: l,
            svg: svg.finish(),
            hypotheses,
            region_cells,
            self_cells,
        });
    }
    Ok(out)
}
