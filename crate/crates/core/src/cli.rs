//! Command-line front end. Every subcommand reads an optional JSON run
//! config, applies flag overrides, validates, and writes into the output
//! directory together with the resolved config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::beam::{one_to_m_analysis, BeamConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{ablate, emit_report, evaluate, EvalConfig};
use crate::image::{write_file, Image};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{match_images, match_with_trace, trace_svgs, write_flow, MatchOptions};
use crate::scene::{load_dataset, sample_pairs, write_dataset, SceneKind, SceneSampler};
use crate::training::{train, TrainConfig};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "BEAMMATCH_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub sampler: SceneSampler,
    pub count: usize,
    /// Also write PNG copies of every image.
    pub png: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            sampler: SceneSampler::new(
                64,
                128,
                vec![SceneKind::TwoLayer, SceneKind::TwoLayer, SceneKind::Planar, SceneKind::Zoom],
            ),
            count: 200,
            png: false,
        }
    }
}

/// Everything a run depends on. Missing JSON fields take these defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub beam: BeamConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub match_options: MatchOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.sampler.validate()?;
        self.model.validate()?;
        self.beam.validate()?;
        if self.beam.levels() != self.model.levels() {
            return Err(Error::Config(format!(
                "{} beam widths for a {}-scale model",
                self.beam.widths.len(),
                self.model.levels()
            )));
        }
        self.train.validate()?;
        self.eval.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Tiny,
    Paper,
    Handcrafted,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(5, 4),
            Preset::Paper => ModelConfig::paper(),
            Preset::Handcrafted => ModelConfig::handcrafted(5, 2000.0),
        }
    }
}

fn parse_kind(s: &str) -> std::result::Result<SceneKind, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("unknown scene kind {:?}", s))
}

#[derive(Debug, Parser)]
#[command(name = "beammatch", version, about = "Beam-search coarse-to-fine dense matching")]
pub struct Cli {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Beam widths, coarsest first, e.g. `32,24,16,8`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Model architecture preset.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the output directory.
    Gen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        kinds: Option<Vec<SceneKind>>,
        #[arg(long)]
        png: bool,
    },
    /// One-to-m hypothesis histograms of a dataset's ground truth.
    Analyze {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model; writes metrics and `model.bmck`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        teacher_forcing: bool,
    },
    /// Match one image pair in both directions.
    Match {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Spread-binned accuracy of a model on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one model per width configuration.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Width configurations, e.g. `--sweep 1,1,1,1 --sweep 32,24,16,8`.
        #[arg(long)]
        sweep: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-scale SVG overlays of hypotheses and search regions for one pixel.
    Trace {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        x: u32,
        #[arg(long)]
        y: u32,
    },
}

fn parse_widths(s: &str) -> Result<BeamConfig> {
    let widths = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad beam width {:?}", v))))
        .collect::<Result<Vec<_>>>()?;
    BeamConfig::new(widths)
}

impl Cli {
    /// The run config after reading `--config` and applying every flag.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?
            }
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            cfg.model = p.config();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(w) = &self.widths {
            cfg.beam = BeamConfig::new(w.clone())?;
        }
        match &self.command {
            Command::Gen {
                count,
                height,
                width,
                kinds,
                png,
            } => {
                let s = &mut cfg.dataset.sampler;
                if height.is_some() || width.is_some() {
                    let fresh = SceneSampler::new(height.unwrap_or(s.height), width.unwrap_or(s.width), s.kinds.clone());
                    *s = SceneSampler {
                        texture: s.texture,
                        ..fresh
                    };
                }
                if let Some(k) = kinds {
                    s.kinds = k.clone();
                }
                if let Some(c) = count {
                    cfg.dataset.count = *c;
                }
                cfg.dataset.png |= *png;
            }
            Command::Train {
                steps,
                lr,
                teacher_forcing,
                ..
            } => {
                if let Some(s) = steps {
                    cfg.train.steps = *s;
                }
                if let Some(l) = lr {
                    cfg.train.peak_lr = *l;
                }
                cfg.train.teacher_forcing |= *teacher_forcing;
            }
            Command::Ablate { steps: Some(s), .. } => cfg.train.steps = *s,
            _ => {}
        }
        cfg.train.beam = cfg.beam.clone();
        cfg.match_options.beam = cfg.beam.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => Ok(Checkpoint::load(p)?.model),
        None => Model::init(cfg.model.clone(), cfg.seed),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(value).expect("serializable"))
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    let work = || execute(cli, &cfg);
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {}", e)))?
            .install(work),
        None => work(),
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(&cli)
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.out;
    write_json(&out.join("run_config.json"), cfg)?;
    match &cli.command {
        Command::Gen { .. } => {
            let d = &cfg.dataset;
            let pairs = sample_pairs(&d.sampler, cfg.seed, d.count)?;
            write_dataset(&pairs, out, d.png, Some(&d.sampler), Some(cfg.seed))?;
        }
        Command::Analyze { data } => {
            let (_, pairs) = load_dataset(data)?;
            let mut m99 = Vec::new();
            for l in 1..=cfg.model.levels() {
                let sets = pairs.iter().map(|p| p.gt_at_scale(l)).collect::<Result<Vec<_>>>()?;
                let h = one_to_m_analysis(&sets, l)?;
                write_file(&out.join(format!("hypotheses_l{}.csv", l)), h.to_csv().as_bytes())?;
                write_file(&out.join(format!("hypotheses_l{}.svg", l)), h.to_svg().as_bytes())?;
                m99.push(serde_json::json!({"scale": l, "m99": h.m99, "sources": h.total()}));
            }
            write_json(&out.join("analysis.json"), &serde_json::json!({"config": cfg, "scales": m99}))?;
        }
        Command::Train { data, val, .. } => {
            let (_, pairs) = load_dataset(data)?;
            let val_pairs = match val {
                Some(v) => load_dataset(v)?.1,
                None => Vec::new(),
            };
            let model = Model::init(cfg.model.clone(), cfg.seed)?;
            let outcome = train(model, &pairs, &val_pairs, &cfg.train, Some(out))?;
            write_json(
                &out.join("train.json"),
                &serde_json::json!({"config": cfg, "validation": outcome.validation}),
            )?;
        }
        Command::Match {
            source,
            target,
            checkpoint,
        } => {
            let model = load_model(cfg, checkpoint.as_deref())?;
            let r = match_images(&model, &Image::read(source)?, &Image::read(target)?, &cfg.beam)?;
            write_flow(&out.join("forward.flo"), &r.forward.flow)?;
            write_flow(&out.join("backward.flo"), &r.backward.flow)?;
            write_json(
                &out.join("match.json"),
                &serde_json::json!({
                    "config": cfg,
                    "forward": r.forward.flow.summary(),
                    "backward": r.backward.flow.summary(),
                }),
            )?;
        }
        Command::Eval { data, checkpoint } => {
            let model = load_model(cfg, checkpoint.as_deref())?;
            let (_, pairs) = load_dataset(data)?;
            let mut report = evaluate(&model, &pairs, &cfg.beam, &cfg.eval)?;
            report.config = serde_json::json!({"run": cfg, "pairs": pairs.len()});
            emit_report(&report, out, "eval")?;
        }
        Command::Ablate { data, test, sweep, .. } => {
            let (_, train_pairs) = load_dataset(data)?;
            let (_, test_pairs) = load_dataset(test)?;
            let widths = if sweep.is_empty() {
                vec![BeamConfig::greedy(cfg.model.levels()), BeamConfig::minimal(), BeamConfig::paper()]
            } else {
                sweep.iter().map(|s| parse_widths(s)).collect::<Result<Vec<_>>>()?
            };
            let template = Model::init(cfg.model.clone(), cfg.seed)?;
            let entries = ablate(&template, &train_pairs, &test_pairs, &widths, &cfg.train, &cfg.eval)?;
            let mut csv = String::from("widths,threshold,accuracy_all,accuracy_high,status\n");
            for e in &entries {
                let tag = e.beam.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-");
                match &e.report {
                    Ok(r) => {
                        emit_report(r, out, &format!("ablate_{}", tag))?;
                        for (t, th) in r.thresholds.iter().enumerate() {
                            let high = r.pooled(60.0, f64::INFINITY, *th)?;
                            let fmt = |v: Option<f64>| v.map_or("undefined".into(), |a| a.to_string());
                            let _ = writeln!(csv, "{},{},{},{},ok", tag, th, fmt(r.all().accuracy(t)), fmt(high));
                        }
                    }
                    Err(msg) => {
                        let _ = writeln!(csv, "{},,,,{:?}", tag, msg);
                    }
                }
            }
            write_file(&out.join("ablation.csv"), csv.as_bytes())?;
        }
        Command::Trace {
            source,
            target,
            checkpoint,
            x,
            y,
        } => {
            let model = load_model(cfg, checkpoint.as_deref())?;
            let (src, tgt) = (Image::read(source)?, Image::read(target)?);
            let (_, trace) = match_with_trace(&model, &src, &tgt, &cfg.match_options)?;
            let scales = trace_svgs(&trace, &src, &tgt, [*x, *y])?;
            let mut counts = Vec::new();
            for s in &scales {
                write_file(&out.join(format!("trace_l{}.svg", s.scale)), s.svg.as_bytes())?;
                counts.push(serde_json::json!({
                    "scale": s.scale,
                    "hypotheses": s.hypotheses,
                    "region_cells": s.region_cells,
                    "self_cells": s.self_cells,
                }));
            }
            write_json(&out.join("trace.json"), &serde_json::json!({"config": cfg, "query": [x, y], "scales": counts}))?;
        }
    }
    Ok(())
}
