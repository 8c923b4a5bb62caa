//! Spread-binned matching accuracy and the beam-width ablation.


use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::BeamConfig;
use crate::error::{Error, Result};
use crate::image::write_file;
use crate::model::Model;
use crate::pipeline::{match_images, DenseFlow};
use crate::scene::{FlowField, ScenePair};
use crate::svg::{Frame, Svg};
use crate::training::{train, TrainConfig};

/// Side of the square source patches spread is measured on.
pub const PATCH: usize = 16;

/// Spread `η` of every 16x16 source patch: the larger side (max - min) of
/// the bounding box of its valid correspondents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major over patches; `None` with fewer than two valid pixels.
    pub eta: Vec<Option<f64>>,
}

impl SpreadMap {
    pub fn patch(&self, px: usize, py: usize) -> Option<f64> {
        self.eta[py * self.cols + px]
    }

    /// Spread of the patch holding pixel `(x, y)`.
    pub fn at_pixel(&self, x: usize, y: usize) -> Option<f64> {
        self.patch(x / PATCH, y / PATCH)
    }
}

pub fn compute_spread(flow: &FlowField) -> Result<SpreadMap> {
    if flow.height % PATCH != 0 || flow.width % PATCH != 0 {
        return Err(Error::Argument(format!(
            "{}x{} flow is not a whole number of {}-pixel patches",
            flow.height, flow.width, PATCH
        )));
    }
    let (rows, cols) = (flow.height / PATCH, flow.width / PATCH);
    let mut eta = Vec::with_capacity(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            let mut n = 0;
            for y in py * PATCH..(py + 1) * PATCH {
                for x in px * PATCH..(px + 1) * PATCH {
                    if let Some(q) = flow.at(x, y) {
                        for a in 0..2 {
                            lo[a] = lo[a].min(q[a]);
                            hi[a] = hi[a].max(q[a]);
                        }
                        n += 1;
                    }
                }
            }
            eta.push((n >= 2).then(|| (hi[0] - lo[0]).max(hi[1] - lo[1])));
        }
    }
    Ok(SpreadMap { rows, cols, eta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Pixel error thresholds; an error equal to the threshold is correct.
    pub thresholds: Vec<f64>,
    /// Half-open spread bins `[lo, hi)`.
    pub bins: Vec<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![3.0, 5.0, 10.0],
            bins: vec![(20.0, 40.0), (40.0, 60.0), (60.0, 80.0), (80.0, 100.0)],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("thresholds must be non-empty and non-negative".into()));
        }
        if self.bins.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("every spread bin needs lo < hi".into()));
        }
        for w in self.bins.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Config("spread bins must be sorted and disjoint".into()));
            }
        }
        Ok(())
    }
}

/// Counts for one spread bin, or for every pixel when `range` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub range: Option<(f64, f64)>,
    pub count: usize,
    /// Per threshold.
    pub correct: Vec<usize>,
}

impl BinRow {
    pub fn label(&self) -> String {
        match self.range {
            Some((lo, hi)) => format!("[{},{})", lo, hi),
            None => "all".into(),
        }
    }

    /// `None` for an empty bin.
    pub fn accuracy(&self, t: usize) -> Option<f64> {
        (self.count > 0).then(|| self.correct[t] as f64 / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// One row per bin, then the "all" row.
    pub rows: Vec<BinRow>,
    /// Provenance: whatever produced the predictions.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn empty(cfg: &EvalConfig) -> EvalReport {
        let row = |range| BinRow {
            range,
            count: 0,
            correct: vec![0; cfg.thresholds.len()],
        };
        let mut rows: Vec<BinRow> = cfg.bins.iter().map(|&b| row(Some(b))).collect();
        rows.push(row(None));
        EvalReport {
            thresholds: cfg.thresholds.clone(),
            rows,
            config: serde_json::Value::Null,
        }
    }

    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if self.thresholds != other.thresholds || self.rows.len() != other.rows.len() {
            return Err(Error::Dimension("reports have different bins or thresholds".into()));
        }
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            if a.range != b.range {
                return Err(Error::Dimension("reports have different bins".into()));
            }
            a.count += b.count;
            for (x, y) in a.correct.iter_mut().zip(&b.correct) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn all(&self) -> &BinRow {
        self.rows.last().expect("all row")
    }

    fn threshold_index(&self, threshold: f64) -> Result<usize> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .ok_or_else(|| Error::Argument(format!("threshold {} was not evaluated", threshold)))
    }

    /// Accuracy over every bin inside `[lo, hi)`, pooled by pixel count.
    pub fn pooled(&self, lo: f64, hi: f64, threshold: f64) -> Result<Option<f64>> {
        let t = self.threshold_index(threshold)?;
        let (mut n, mut c) = (0, 0);
        for r in &self.rows {
            if let Some((a, b)) = r.range {
                if a >= lo && b <= hi {
                    n += r.count;
                    c += r.correct[t];
                }
            }
        }
        Ok((n > 0).then(|| c as f64 / n as f64))
    }

    /// `bin,threshold,accuracy,count,correct`; empty bins read `undefined`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,threshold,accuracy,count,correct\n");
        for r in &self.rows {
            for (t, th) in self.thresholds.iter().enumerate() {
                let acc = r.accuracy(t).map_or("undefined".to_string(), |a| a.to_string());
                let _ = writeln!(s, "{},{},{},{},{}", r.label(), th, acc, r.count, r.correct[t]);
            }
        }
        s
    }

    /// Inverse of [`EvalReport::to_csv`]; the config echo is not part of it.
    pub fn from_csv(text: &str, path: &Path) -> Result<EvalReport> {
        let bad = |why: String| Error::format(path, why);
        let mut lines = text.lines();
        if lines.next() != Some("bin,threshold,accuracy,count,correct") {
            return Err(bad("unexpected CSV header".into()));
        }
        let mut thresholds: Vec<f64> = Vec::new();
        let mut rows: Vec<BinRow> = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {:?}", s)));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count {:?}", s)));
            // Labels contain a comma: "[lo,hi)".
            let (range, rest) = if f[0] == "all" {
                (None, &f[1..])
            } else if f.len() == 6 {
                let lo = num(f[0].trim_start_matches('['))?;
                let hi = num(f[1].trim_end_matches(')'))?;
                (Some((lo, hi)), &f[2..])
            } else {
                return Err(bad(format!("bad row {:?}", line)));
            };
            if rest.len() != 4 {
                return Err(bad(format!("bad row {:?}", line)));
            }
            let th = num(rest[0])?;
            if rows.last().is_none_or(|r| r.range != range) {
                rows.push(BinRow {
                    range,
                    count: int(rest[2])?,
                    correct: Vec::new(),
                });
            }
            let row = rows.last_mut().expect("row");
            if row.correct.len() == thresholds.len() {
                thresholds.push(th);
            }
            row.correct.push(int(rest[3])?);
        }
        if rows.is_empty() || rows.iter().any(|r| r.correct.len() != thresholds.len()) {
            return Err(bad("rows disagree on thresholds".into()));
        }
        Ok(EvalReport {
            thresholds,
            rows,
            config: serde_json::Value::Null,
        })
    }

    /// Accuracy against spread, one curve per threshold; every defined
    /// point is a `class="point"` circle.
    pub fn to_svg(&self) -> String {
        let bins: Vec<&BinRow> = self.rows.iter().filter(|r| r.range.is_some()).collect();
        let (x0, x1) = bins.first().zip(bins.last()).map_or((0.0, 1.0), |(a, b)| {
            (a.range.expect("bin").0, b.range.expect("bin").1)
        });
        let mut svg = Svg::new(480.0, 320.0);
        let frame = Frame {
            x0: 50.0,
            y0: 20.0,
            w: 400.0,
            h: 250.0,
            xr: (x0, x1),
            yr: (0.0, 1.0),
        };
        frame.axes(&mut svg, "spread (px)", "accuracy");
        let colours = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b"];
        for (t, th) in self.thresholds.iter().enumerate() {
            let colour = colours[t % colours.len()];
            let pts: Vec<(f64, f64)> = bins
                .iter()
                .filter_map(|r| {
                    let (lo, hi) = r.range.expect("bin");
                    r.accuracy(t).map(|a| (frame.px((lo + hi) / 2.0), frame.py(a)))
                })
                .collect();
            svg.group(&format!("curve-{}px", th));
            svg.polyline(&pts, &format!(r#"stroke="{}" stroke-width="2""#, colour));
            for (x, y) in &pts {
                svg.circle(*x, *y, 3.0, &format!(r#"class="point" fill="{}""#, colour));
            }
            svg.end_group();
            svg.text(frame.x0 + frame.w - 60.0, frame.y0 + 14.0 * (t as f64 + 1.0), 11.0, &format!("@{} px", th));
        }
        svg.finish()
    }
}

/// Scores predicted correspondents against the true flow, binning each
/// valid pixel by its patch's spread.
pub fn accuracy(pred: &DenseFlow, gt: &FlowField, spread: &SpreadMap, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if (pred.height, pred.width) != (gt.height, gt.width)
        || (spread.rows * PATCH, spread.cols * PATCH) != (gt.height, gt.width)
    {
        return Err(Error::Dimension(format!(
            "prediction {}x{}, ground truth {}x{}, spread {}x{} patches",
            pred.height, pred.width, gt.height, gt.width, spread.rows, spread.cols
        )));
    }
    let mut report = EvalReport::empty(cfg);
    let nb = cfg.bins.len();
    for y in 0..gt.height {
        for x in 0..gt.width {
            let Some(q) = gt.at(x, y) else { continue };
            let p = pred.at(x, y);
            let err = (p[0] as f64 - q[0]).hypot(p[1] as f64 - q[1]);
            let bin = spread
                .at_pixel(x, y)
                .and_then(|eta| cfg.bins.iter().position(|&(lo, hi)| eta >= lo && eta < hi));
            for r in bin.into_iter().chain([nb]) {
                let row = &mut report.rows[r];
                row.count += 1;
                for (t, th) in cfg.thresholds.iter().enumerate() {
                    row.correct[t] += (err <= *th) as usize;
                }
            }
        }
    }
    Ok(report)
}

/// Source-to-target accuracy of `model` over `pairs`.
pub fn evaluate(model: &Model, pairs: &[ScenePair], beam: &BeamConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut report = EvalReport::empty(cfg);
    for pair in pairs {
        let m = match_images(model, &pair.source, &pair.target, beam)?;
        let spread = compute_spread(&pair.gt_flow)?;
        report.merge(&accuracy(&m.forward.flow, &pair.gt_flow, &spread, cfg)?)?;
    }
    report.config = serde_json::json!({
        "model": model.config,
        "beam": beam,
        "pairs": pairs.len(),
    });
    Ok(report)
}

/// Result of one width configuration in a sweep.
#[derive(Clone, Debug)]
pub struct AblationEntry {
    pub beam: BeamConfig,
    pub model: Option<Model>,
    pub report: std::result::Result<EvalReport, String>,
}

/// Trains a copy of `template` per width configuration (used both in
/// training and at test time) and evaluates it. A failing configuration is
/// recorded and the sweep goes on.
pub fn ablate(
    template: &Model,
    train_pairs: &[ScenePair],
    test_pairs: &[ScenePair],
    widths: &[BeamConfig],
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationEntry>> {
    if widths.is_empty() {
        return Err(Error::Argument("no width configurations to sweep".into()));
    }
    Ok(widths
        .par_iter()
        .map(|beam| {
            let cfg = TrainConfig {
                beam: beam.clone(),
                ..train_cfg.clone()
            };
            let run = || -> Result<(Model, EvalReport)> {
                let model = if template.is_trainable() {
                    train(template.clone(), train_pairs, &[], &cfg, None)?.model
                } else {
                    template.clone()
                };
                let mut report = evaluate(&model, test_pairs, beam, eval_cfg)?;
                report.config["train"] = serde_json::to_value(&cfg).expect("config serializes");
                Ok((model, report))
            };
            match run() {
                Ok((m, r)) => AblationEntry {
                    beam: beam.clone(),
                    model: Some(m),
                    report: Ok(r),
                },
                Err(e) => AblationEntry {
                    beam: beam.clone(),
                    model: None,
                    report: Err(e.to_string()),
                },
            }
        })
        .collect())
}

/// Writes `<stem>.csv`, `<stem>.svg` and `<stem>.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    write_file(&dir.join(format!("{}.csv", stem)), report.to_csv().as_bytes())?;
    write_file(&dir.join(format!("{}.svg", stem)), report.to_svg().as_bytes())?;
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    write_file(&dir.join(format!("{}.json", stem)), &json)
}
