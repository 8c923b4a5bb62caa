//! Supervised training on synthetic pairs with Adam.

mod loss;


use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{loss_from_maps, LossReport};

use crate::beam::{coverage_counts, BeamConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::image_tensor;
use crate::image::write_file;
use crate::model::{Model, ModelConfig};
use crate::numeric::{Graph, Scalar, Var};
use crate::params::{Bound, Params};
use crate::pipeline::forward::{forward, ForwardOut, Mode, TrainTargets};
use crate::scene::{gt_at_scale, Correspondence, Downsample, ScenePair};

/// Floor-downsampled ground truth of both directions, `[l - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTargets {
    pub st: Vec<Vec<Correspondence>>,
    pub ts: Vec<Vec<Correspondence>>,
}

impl PairTargets {
    pub fn new(pair: &ScenePair, levels: usize) -> Result<PairTargets> {
        let dims = (pair.height(), pair.width());
        let per = |field| -> Result<Vec<Vec<Correspondence>>> {
            (1..=levels).map(|l| gt_at_scale(field, dims, l, Downsample::Floor)).collect()
        };
        Ok(PairTargets {
            st: per(&pair.gt_flow)?,
            ts: per(&pair.gt_flow_reverse)?,
        })
    }

    pub fn correspondences(&self) -> usize {
        self.st[0].len() + self.ts[0].len()
    }
}

/// Graph objective of one pair (mean NLL per correspondence over both
/// directions), the value-side report, and the raw pass.
pub(crate) fn pair_objective<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &ModelConfig,
    beam: &BeamConfig,
    pair: &ScenePair,
    targets: &PairTargets,
    teacher_forcing: bool,
) -> Result<(Var, LossReport, ForwardOut)> {
    let n = targets.correspondences();
    if n == 0 {
        return Err(Error::Argument("pair has no valid ground truth".into()));
    }
    let xs = g.constant(image_tensor(&pair.source));
    let xt = g.constant(image_tensor(&pair.target));
    let mode = Mode::Train(TrainTargets {
        st: &targets.st,
        ts: &targets.ts,
        teacher_forcing,
    });
    let out = forward(g, bound, config, beam, xs, xt, &mode, true)?;
    let mut total: Option<Var> = None;
    for t in out.st.terms.iter().chain(&out.ts.terms) {
        total = Some(match total {
            None => t.loss,
            Some(acc) => g.add(acc, t.loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Argument("no loss terms".into()))?;
    let objective = g.scale(total, T::from_f64(1.0 / n as f64));
    let mut report = loss_from_maps(&out.st.maps, &targets.st)?;
    report.merge(&loss_from_maps(&out.ts.maps, &targets.ts)?);
    Ok((objective, report, out))
}

/// Mean per-correspondence loss of one pair as a graph node, with its
/// value-side report. Works at any precision, so gradients can be checked
/// in `f64`.
pub fn model_objective<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    config: &ModelConfig,
    beam: &BeamConfig,
    pair: &ScenePair,
    targets: &PairTargets,
    teacher_forcing: bool,
) -> Result<(Var, LossReport)> {
    let (obj, report, _) = pair_objective(g, bound, config, beam, pair, targets, teacher_forcing)?;
    Ok((obj, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Linear ramp from 0 to `peak_lr` over these steps.
    pub warmup: usize,
    pub peak_lr: f64,
    /// Per-step multiplicative decay after warmup.
    pub decay: f64,
    pub beam: BeamConfig,
    pub seed: u64,
    /// Replace the weakest hypotheses by missing ground-truth parents.
    pub teacher_forcing: bool,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Validate every this many steps (and after the last); 0 only at the end.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            warmup: 200,
            peak_lr: 3e-3,
            decay: 0.999,
            beam: BeamConfig::paper(),
            seed: 0,
            teacher_forcing: false,
            clip_norm: Some(5.0),
            validate_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak learning rate {} must be positive", self.peak_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must be in (0, 1]", self.decay)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate of 1-based `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step <= self.warmup {
            self.peak_lr * step as f64 / self.warmup as f64
        } else {
            self.peak_lr * self.decay.powi((step - self.warmup) as i32)
        }
    }
}

/// Adam with `(0.9, 0.999, 1e-8)`.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &Params<f32>) -> Adam {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, t) in params.values_mut().iter_mut().enumerate() {
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j] as f64;
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = Self::B1 * *m + (1.0 - Self::B1) * gj;
                *v = Self::B2 * *v + (1.0 - Self::B2) * gj * gj;
                *w -= (lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)) as f32;
            }
        }
    }
}

/// One optimisation step's numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub objective: f64,
    pub report: LossReport,
    pub grad_norm: f64,
}

/// Loss, coverage and 1-px accuracy on a held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub step: usize,
    pub loss: LossReport,
    /// Fraction of ground truth inside its search region, index `l - 1`;
    /// `None` at the coarsest (dense) scale.
    pub coverage: Vec<Option<f64>>,
    /// Fraction of source pixels whose finest-scale expectation lies within
    /// 1 px of the true flow.
    pub accuracy_1px: f64,
}

/// Gradients of the mean pair loss with respect to every weight.
pub fn loss_and_gradients(
    model: &Model,
    beam: &BeamConfig,
    pair: &ScenePair,
    targets: &PairTargets,
    teacher_forcing: bool,
) -> Result<(f64, LossReport, Vec<Vec<f32>>)> {
    let mut g = Graph::<f32>::new();
    let bound = model.params.bind(&mut g, true);
    let (obj, report, _) = pair_objective(&mut g, &bound, &model.config, beam, pair, targets, teacher_forcing)?;
    let value = g.value(obj).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", value)));
    }
    let grads = g.backward(obj)?;
    let out = bound
        .vars()
        .iter()
        .zip(model.params.values())
        .map(|(v, t)| grads.get_or_zeros(*v, t.len()))
        .collect();
    Ok((value, report, out))
}

/// Runs `model` on held-out pairs without teacher forcing.
pub fn validate(model: &Model, beam: &BeamConfig, pairs: &[ScenePair], step: usize) -> Result<ValidationReport> {
    let levels = model.config.levels();
    let mut loss = LossReport::default();
    let mut cov = vec![(0usize, 0usize); levels];
    let (mut good, mut total) = (0usize, 0usize);
    for pair in pairs {
        let targets = PairTargets::new(pair, levels)?;
        let mut g = Graph::<f32>::new();
        let bound = model.params.bind(&mut g, false);
        let (_, report, out) = pair_objective(&mut g, &bound, &model.config, beam, pair, &targets, false)?;
        loss.merge(&report);
        for (dir, gt) in [(&out.st, &targets.st), (&out.ts, &targets.ts)] {
            for r in &dir.regions {
                let (hit, n) = coverage_counts(r, &gt[r.scale - 1]);
                cov[r.scale - 1].0 += hit;
                cov[r.scale - 1].1 += n;
            }
        }
        let fine = out.st.maps.iter().find(|m| m.scale == 1).expect("scale-1 map");
        for y in 0..pair.height() {
            for x in 0..pair.width() {
                let Some(q) = pair.gt_flow.at(x, y) else { continue };
                let e = crate::corrmap::expectation(&fine.map(fine.src.index(x as u32, y as u32) as usize));
                total += 1;
                if (e[0] - q[0]).hypot(e[1] - q[1]) <= 1.0 {
                    good += 1;
                }
            }
        }
    }
    Ok(ValidationReport {
        step,
        loss,
        coverage: cov
            .iter()
            .enumerate()
            .map(|(i, &(h, n))| (i + 1 < levels && n > 0).then(|| h as f64 / n as f64))
            .collect(),
        accuracy_1px: good as f64 / total.max(1) as f64,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
    pub validation: Vec<ValidationReport>,
}

fn metrics_csv(levels: usize, history: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,objective,total");
    for l in 1..=levels {
        let _ = write!(s, ",loss_l{}", l);
    }
    s.push_str(",masked,clamped,grad_norm\n");
    for r in history {
        let _ = write!(s, "{},{:e},{},{}", r.step, r.lr, r.objective, r.report.total);
        for v in &r.report.per_scale {
            let _ = write!(s, ",{}", v);
        }
        let _ = writeln!(s, ",{},{},{}", r.report.masked, r.report.clamped, r.grad_norm);
    }
    s
}

fn validation_csv(levels: usize, reports: &[ValidationReport]) -> String {
    let mut s = String::from("step,mean_loss,accuracy_1px");
    for l in 1..levels {
        let _ = write!(s, ",coverage_l{}", l);
    }
    s.push('\n');
    for r in reports {
        let _ = write!(s, "{},{},{}", r.step, r.loss.mean(), r.accuracy_1px);
        for c in &r.coverage[..levels - 1] {
            let _ = write!(s, ",{}", c.unwrap_or(f64::NAN));
        }
        s.push('\n');
    }
    s
}

/// Trains `model` for `config.steps` steps, one pair per step, visiting the
/// pairs in a fresh seeded order every epoch. With `out_dir`, writes
/// `metrics.csv`, `validation.csv` and `model.bmck`; a diverging run leaves
/// `diverged.bmck` there and returns a numeric error.
pub fn train(
    mut model: Model,
    train_pairs: &[ScenePair],
    val_pairs: &[ScenePair],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.config.validate()?;
    if !model.is_trainable() {
        return Err(Error::Config("model has no learnable weights".into()));
    }
    if train_pairs.is_empty() {
        return Err(Error::Argument("no training pairs".into()));
    }
    let levels = model.config.levels();
    let targets: Vec<PairTargets> = train_pairs.iter().map(|p| PairTargets::new(p, levels)).collect::<Result<_>>()?;
    let meta = serde_json::to_value(config).expect("config serializes");
    let mut adam = Adam::new(&model.params);
    let mut history = Vec::with_capacity(config.steps);
    let mut validation = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        let pos = (step - 1) % train_pairs.len();
        if pos == 0 {
            let epoch = ((step - 1) / train_pairs.len()) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(epoch + 1);
            order = (0..train_pairs.len()).collect();
            order.shuffle(&mut rng);
        }
        let i = order[pos];
        let result = loss_and_gradients(&model, &config.beam, &train_pairs[i], &targets[i], config.teacher_forcing);
        let (objective, report, mut grads) = match result {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                if let Some(dir) = out_dir {
                    let ck = Checkpoint {
                        model: model.clone(),
                        step,
                        meta: meta.clone(),
                    };
                    ck.save(&dir.join("diverged.bmck"))?;
                    write_file(&dir.join("metrics.csv"), metrics_csv(levels, &history).as_bytes())?;
                }
                return Err(Error::Numeric(format!("step {}: {}", step, msg)));
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grads.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if let Some(c) = config.clip_norm {
            if grad_norm > c {
                let s = (c / grad_norm) as f32;
                grads.iter_mut().flatten().for_each(|v| *v *= s);
            }
        }
        let lr = config.learning_rate(step);
        adam.update(&mut model.params, &grads, lr);
        history.push(StepRecord {
            step,
            lr,
            objective,
            report,
            grad_norm,
        });
        let due = config.validate_every > 0 && step % config.validate_every == 0;
        if !val_pairs.is_empty() && (due || step == config.steps) {
            validation.push(validate(&model, &config.beam, val_pairs, step)?);
        }
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join("metrics.csv"), metrics_csv(levels, &history).as_bytes())?;
        write_file(&dir.join("validation.csv"), validation_csv(levels, &validation).as_bytes())?;
        let ck = Checkpoint {
            model: model.clone(),
            step: config.steps,
            meta,
        };
        ck.save(&dir.join("model.bmck"))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        validation,
    })
}
