//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit when
//! any fails. `ACCEPTANCE_ONLY=1,4` runs a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use beammatch::beam::{gt_coverage, one_to_m_analysis, propagate, BeamConfig};
use beammatch::cli::run_from;
use beammatch::corrmap::{dense_map, GridDims};
use beammatch::eval::{ablate, AblationEntry, EvalConfig};
use beammatch::features::handcrafted;
use beammatch::model::{Model, ModelConfig};
use beammatch::numeric::{check_gradients, check_gradients_at, Graph, IndexPlan, Tensor, Var};
use beammatch::params::{Bound, Params};
use beammatch::pipeline::{match_images, match_with_trace, trace_svgs, MatchOptions};
use beammatch::scene::{generate, sample_pairs, Correspondence, Homography, SceneConfig, SceneKind, SceneSampler, ScenePair};
use beammatch::training::{loss_and_gradients, model_objective, validate, PairTargets, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned limits.
const NN_PAIRS: usize = 100;
const NN_LIMIT: Duration = Duration::from_secs(120);
const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
const GRAD_LIMIT: Duration = Duration::from_secs(300);
const GRAD_EPS: f64 = 1e-6;
// Central differences through the whole network: 1e-6 is roundoff-bound
// there, 1e-4 straddles ReLU kinks.
const MODEL_EPS: f64 = 1e-5;
const SUM_TOL: f64 = 1e-5;
const PROPAGATION_INSTANCES: usize = 10_000;
const ANALYSIS_CORRESPONDENCES: usize = 1_000;
const LOSS_INSTANCES: usize = 100;
const LOSS_TOL: f64 = 1e-6;

// Desk training: pairs, steps, schedule, test set, required margin.
const TRAIN_PAIRS: usize = 200;
const TRAIN_STEPS: usize = 2_000;
const TRAIN_LIMIT: Duration = Duration::from_secs(30 * 60);
const TEST_PAIRS: usize = 20;
const HELD_OUT_PAIRS: usize = 8;
const HIGH_SPREAD_MARGIN: f64 = 0.05;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---- 1: exhaustive beam equals nearest neighbour ----------------------------

/// Sequential f32 inner products against every target pixel; ties keep the
/// lower location.
fn brute_argmax(src: &Tensor<f32>, tgt: &Tensor<f32>) -> Vec<[u32; 2]> {
    let grid = GridDims::of(tgt).unwrap();
    (0..src.rows())
        .map(|i| {
            let mut best = (f32::NEG_INFINITY, 0);
            for j in 0..tgt.rows() {
                let mut s = 0.0f32;
                for (a, b) in src.row(i).iter().zip(tgt.row(j)) {
                    s += a * b;
                }
                if s > best.0 {
                    best = (s, j);
                }
            }
            grid.coords(best.1 as u32)
        })
        .collect()
}

fn exhaustive_nearest_neighbour() -> Outcome {
    let model = Model::init(ModelConfig::handcrafted(5, 2000.0), 0).unwrap();
    let beam = BeamConfig::exhaustive(GridDims::new(64, 64), 5);
    let sampler = SceneSampler::new(64, 64, vec![SceneKind::TwoLayer, SceneKind::Planar, SceneKind::Zoom]);
    let pairs = sample_pairs(&sampler, 101, NN_PAIRS).unwrap();
    let mut matcher = Duration::ZERO;
    let mut mismatched = 0;
    for p in &pairs {
        let t0 = Instant::now();
        let r = match_images(&model, &p.source, &p.target, &beam).unwrap();
        matcher += t0.elapsed();
        let fs = handcrafted::<f32>(&p.source, 5);
        let ft = handcrafted::<f32>(&p.target, 5);
        let want = brute_argmax(fs.level(1), ft.level(1));
        mismatched += r.forward.argmax.iter().zip(&want).filter(|(a, b)| a != b).count();
    }
    check(
        mismatched == 0 && matcher < NN_LIMIT,
        format!("{} pairs, {} mismatched pixels, matcher {}", NN_PAIRS, mismatched, secs(matcher)),
    )
}

// ---- 2: gradients -----------------------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> beammatch::Result<Var>>;

fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, Op)> {
    let plan = Arc::new(IndexPlan::new(3, vec![0, 4, 2, 1, 1, 3, 4, 0, 2]).unwrap());
    let sparse = Arc::new(IndexPlan::new(2, vec![0, 4, 2, 2, 3, 1]).unwrap());
    let p2 = plan.clone();
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("relu", vec![vec![4, 3]], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("mean_rows", vec![vec![4, 3]], Box::new(|g, v| g.mean_rows(v[0], &[0, 2, 2, 3]))),
        ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])))),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]))),
        ("conv2d", vec![vec![5, 4, 2], vec![3, 3, 2, 3], vec![3]], Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1))),
        ("conv2d/2", vec![vec![6, 4, 2], vec![3, 3, 2, 2]], Box::new(|g, v| g.conv2d(v[0], v[1], None, 2))),
        ("upsample2x", vec![vec![2, 3, 2]], Box::new(|g, v| g.upsample2x(v[0]))),
        ("gather_rows", vec![vec![6, 2]], Box::new(|g, v| g.gather_rows(v[0], &[5, 0, 0, 3]))),
        ("inner_product", vec![vec![4], vec![5, 4]], Box::new(|g, v| g.inner_product(v[0], v[1]))),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], Box::new(|g, v| g.matmul_nt(v[0], v[1], 0.5))),
        ("indexed_dot", vec![vec![3, 4], vec![5, 4]], Box::new(move |g, v| g.indexed_dot(v[0], v[1], plan.clone(), 0.5))),
        ("softmax", vec![vec![3, 5]], Box::new(|g, v| g.softmax(v[0]))),
        ("nll", vec![vec![3, 5]], Box::new(|g, v| Ok(g.nll(v[0], &[(0, 1), (2, 4), (1, 0)])?.0))),
        ("attention", vec![vec![3, 4], vec![5, 4], vec![5, 4]], Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, None))),
        (
            "beam attention",
            vec![vec![3, 4], vec![5, 4], vec![5, 4]],
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], 2, Some(sparse.clone()))),
        ),
        ("sparse logits+nll", vec![vec![3, 4], vec![5, 4]], Box::new(move |g, v| {
            let l = g.indexed_dot(v[0], v[1], p2.clone(), 1.0)?;
            Ok(g.nll(l, &[(0, 2), (1, 0), (2, 1)])?.0)
        })),
    ]
}

fn model_gradient_error() -> (f64, usize) {
    let pair = generate(&SceneConfig::planar(16, 16, Homography::translation(2.0, 1.0), 11)).unwrap();
    let mut model = Model::init(ModelConfig::tiny(5, 4), 5).unwrap();
    // Zero biases over an all-zero coarse input put ReLUs exactly on their
    // kink, where no derivative exists. Check at a generic point instead.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let names = model.params.names().to_vec();
    for (n, t) in names.iter().zip(model.params.values_mut()) {
        if n.starts_with("pyramid") && n.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let params: Params<f64> = model.params.cast();
    let beam = BeamConfig::new(vec![2, 2, 2, 2]).unwrap();
    let targets = PairTargets::new(&pair, 5).unwrap();
    let coords: Vec<(usize, usize)> = params
        .values()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let rep = check_gradients_at(
        |g, vars| {
            let bound = Bound::from_vars(&params, vars.to_vec());
            Ok(model_objective(g, &bound, &model.config, &beam, &pair, &targets, false)?.0)
        },
        params.values(),
        MODEL_EPS,
        &coords,
    )
    .unwrap();
    (rep.max_relative_error, rep.coordinates)
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst_op = (0.0f64, "");
    for (name, shapes, op) in op_suite() {
        for seed in 1..=5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let e = check_gradients(&op, &inputs, GRAD_EPS).unwrap();
            if e > worst_op.0 {
                worst_op = (e, name);
            }
        }
    }
    let (model_err, n) = model_gradient_error();
    let elapsed = t0.elapsed();
    check(
        worst_op.0 < OP_TOL && model_err < MODEL_TOL && elapsed < GRAD_LIMIT,
        format!(
            "ops max {:.2e} ({}), tiny model max {:.2e} over {} weights, {}",
            worst_op.0,
            worst_op.1,
            model_err,
            n,
            secs(elapsed)
        ),
    )
}

// ---- 3: normalization -------------------------------------------------------

fn maps_sum_to_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let kinds = vec![SceneKind::TwoLayer, SceneKind::Planar, SceneKind::Zoom, SceneKind::Identity];
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for i in 0..10 {
        let (h, w) = (rng.gen_range(20..70), rng.gen_range(20..90));
        let sampler = SceneSampler::new(h.max(32) / 16 * 16, w.max(32) / 16 * 16, kinds.clone());
        let pair = generate(&sampler.sample(rng.gen()).unwrap()).unwrap();
        let (src, tgt) = (pair.source.padded(h, w), pair.target.padded(w.min(h + 7), h.max(w - 5)));
        let model = Model::init(ModelConfig::tiny(5, 4), rng.gen()).unwrap();
        let widths = (0..4).map(|_| rng.gen_range(1..40)).collect();
        let opts = MatchOptions {
            beam: BeamConfig::new(widths).unwrap(),
            ..MatchOptions::default()
        };
        let (_, trace) = match_with_trace(&model, &src, &tgt, &opts).unwrap();
        if trace.maps.len() != 5 {
            return Err(format!("pair {}: {} scales of maps", i, trace.maps.len()));
        }
        for b in &trace.maps {
            for r in 0..b.src.len() {
                let s: f64 = b.row(r).iter().map(|&p| p as f64).sum();
                worst = worst.max((s - 1.0).abs());
                rows += 1;
            }
        }
    }
    check(worst < SUM_TOL, format!("{} maps over 10 pairs, max |sum - 1| = {:.2e}", rows, worst))
}

// ---- 4: propagation and coverage -------------------------------------------

fn propagation_instance(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let coarse = GridDims::new(rng.gen_range(1..6), rng.gen_range(1..6));
    let src = GridDims::new(rng.gen_range(1..5), rng.gen_range(1..5));
    let c = rng.gen_range(1..4);
    // Coarse values make ties common.
    let levels = rng.gen_range(2..6) as f64;
    let mut q = || (rng.gen_range(0..levels as usize) as f64) / levels;
    let feats = Tensor::from_fn(&[coarse.height, coarse.width, c], |_| q());
    let queries: Vec<Vec<f64>> = (0..src.len()).map(|_| (0..c).map(|_| q()).collect()).collect();
    let maps: Vec<_> = queries.iter().map(|f| dense_map(f, &feats, 3.0).unwrap()).collect();
    let k = rng.gen_range(1..coarse.len() + 3);
    let (h, regions) = propagate(&maps, src, 3, k).map_err(|e| e.to_string())?;
    let keff = k.min(coarse.len());
    let fine = coarse.finer();
    for y in 0..src.height as u32 * 2 {
        for x in 0..src.width as u32 * 2 {
            let i = src.finer().index(x, y) as usize;
            let parent = src.index(x / 2, y / 2) as usize;
            let region = regions.region(i);
            if region.len() != 4 * keff {
                return Err(format!("region of {} cells for K={}", region.len(), keff));
            }
            let distinct: BTreeSet<u32> = region.iter().copied().collect();
            if distinct.len() != region.len() {
                return Err("children of distinct hypotheses overlap".into());
            }
            let hyps: BTreeSet<u32> = h.row(parent).iter().copied().collect();
            let mut per_hyp: BTreeMap<u32, usize> = BTreeMap::new();
            for &cell in region {
                let [cx, cy] = fine.coords(cell);
                let up = coarse.index(cx / 2, cy / 2);
                if !hyps.contains(&up) {
                    return Err(format!("cell {} has parent {} outside the hypotheses", cell, up));
                }
                *per_hyp.entry(up).or_default() += 1;
            }
            if per_hyp.len() != keff || per_hyp.values().any(|&n| n != 4) {
                return Err("a hypothesis does not contribute exactly four children".into());
            }
        }
    }
    Ok(())
}

fn coverage_is_monotone() -> Result<usize, String> {
    let sampler = SceneSampler::new(64, 64, vec![SceneKind::TwoLayer]);
    let pair = &sample_pairs(&sampler, 404, 1).unwrap()[0];
    let gt = PairTargets::new(pair, 5).unwrap();
    let model = Model::init(ModelConfig::tiny(5, 4), 4).unwrap();
    let sweep = [1usize, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48];
    let mut checked = 0;
    for l in 2..=5 {
        let cells = 4096 >> (2 * (l - 1));
        let mut last = -1.0;
        for &k in sweep.iter().filter(|&&k| k <= cells) {
            let mut widths = BeamConfig::paper().widths;
            widths[5 - l] = k;
            let opts = MatchOptions {
                beam: BeamConfig::new(widths).unwrap(),
                ..MatchOptions::default()
            };
            let (_, t) = match_with_trace(&model, &pair.source, &pair.target, &opts).unwrap();
            let cov = gt_coverage(t.regions_at(l - 1).unwrap(), &gt.st[l - 2]).unwrap();
            if cov < last {
                return Err(format!("coverage at scale {} drops from {} to {} at K={}", l - 1, last, cov, k));
            }
            last = cov;
            checked += 1;
        }
    }
    Ok(checked)
}

fn propagation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for n in 0..PROPAGATION_INSTANCES {
        propagation_instance(&mut rng).map_err(|e| format!("instance {}: {}", n, e))?;
    }
    let configs = coverage_is_monotone()?;
    Ok(format!(
        "{} instances disjoint with 4K cells, coverage monotone over {} width settings",
        PROPAGATION_INSTANCES, configs
    ))
}

// ---- 5: one-to-m analysis ---------------------------------------------------

fn brute_histogram(gt: &[Correspondence]) -> Vec<u64> {
    let mut srcs: Vec<[u32; 2]> = Vec::new();
    for c in gt {
        if !srcs.contains(&c.src) {
            srcs.push(c.src);
        }
    }
    let mut counts = Vec::new();
    for s in srcs {
        let mut tgts: Vec<[u32; 2]> = Vec::new();
        for c in gt.iter().filter(|c| c.src == s) {
            if !tgts.contains(&c.tgt) {
                tgts.push(c.tgt);
            }
        }
        if counts.len() < tgts.len() {
            counts.resize(tgts.len(), 0);
        }
        counts[tgts.len() - 1] += 1;
    }
    counts
}

fn analysis_matches_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let random: Vec<Correspondence> = (0..ANALYSIS_CORRESPONDENCES)
        .map(|_| Correspondence {
            src: [rng.gen_range(0..12), rng.gen_range(0..10)],
            tgt: [rng.gen_range(0..5), rng.gen_range(0..4)],
        })
        .collect();
    let sampler = SceneSampler::new(64, 128, vec![SceneKind::TwoLayer]);
    let pair = &sample_pairs(&sampler, 505, 1).unwrap()[0];
    let scene: Vec<Correspondence> = pair.gt_at_scale(2).unwrap().into_iter().take(ANALYSIS_CORRESPONDENCES).collect();
    let mut shapes = Vec::new();
    for (name, gt) in [("random", random), ("scene", scene)] {
        if gt.len() != ANALYSIS_CORRESPONDENCES {
            return Err(format!("{}: only {} correspondences", name, gt.len()));
        }
        let h = one_to_m_analysis(&[gt.clone()], 2).unwrap();
        let want = brute_histogram(&gt);
        if h.counts != want {
            return Err(format!("{}: counts {:?}, brute force {:?}", name, h.counts, want));
        }
        if h.cumulative.windows(2).any(|w| w[1] < w[0]) || h.cumulative.last() != Some(&1.0) {
            return Err(format!("{}: cumulative {:?}", name, h.cumulative));
        }
        shapes.push(format!("{} m<={}", name, h.counts.len()));
    }
    Ok(format!("{} correspondences each: {}", ANALYSIS_CORRESPONDENCES, shapes.join(", ")))
}

// ---- 6, 7: desk training ----------------------------------------------------

struct Sweep {
    entries: Vec<AblationEntry>,
    held_out: Vec<ScenePair>,
    template: Model,
    elapsed: Duration,
}

fn desk_sweep() -> &'static Result<Sweep, String> {
    static SWEEP: OnceLock<Result<Sweep, String>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let train_kinds = vec![SceneKind::TwoLayer, SceneKind::TwoLayer, SceneKind::Planar, SceneKind::Zoom];
        let train_pairs = sample_pairs(&SceneSampler::new(64, 128, train_kinds.clone()), 1, TRAIN_PAIRS).map_err(|e| e.to_string())?;
        let held_out = sample_pairs(&SceneSampler::new(64, 128, train_kinds), 2, HELD_OUT_PAIRS).map_err(|e| e.to_string())?;
        let test = sample_pairs(&SceneSampler::new(64, 128, vec![SceneKind::TwoLayer]), 3, TEST_PAIRS).map_err(|e| e.to_string())?;
        let template = Model::init(ModelConfig::desk(), 0).map_err(|e| e.to_string())?;
        let widths: Vec<BeamConfig> = [vec![32, 24, 16, 8], vec![1, 1, 1, 1], vec![12, 10, 9, 4]]
            .into_iter()
            .map(|w| BeamConfig::new(w).unwrap())
            .collect();
        let cfg = TrainConfig {
            steps: TRAIN_STEPS,
            validate_every: 0,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let entries = ablate(&template, &train_pairs, &test, &widths, &cfg, &EvalConfig::default()).map_err(|e| e.to_string())?;
        Ok(Sweep {
            entries,
            held_out,
            template,
            elapsed: t0.elapsed(),
        })
    })
}

fn high_spread(e: &AblationEntry) -> Result<f64, String> {
    let r = e.report.as_ref().map_err(|m| format!("{:?}: {}", e.beam.widths, m))?;
    r.pooled(60.0, 100.0, 3.0)
        .map_err(|m| m.to_string())?
        .ok_or_else(|| "no test pixels with spread >= 60".to_string())
}

fn beam_beats_greedy() -> Outcome {
    let s = desk_sweep().as_ref().map_err(Clone::clone)?;
    let (paper, greedy, mid) = (high_spread(&s.entries[0])?, high_spread(&s.entries[1])?, high_spread(&s.entries[2])?);
    let all = |e: &AblationEntry| e.report.as_ref().ok().and_then(|r| r.all().accuracy(0)).unwrap_or(f64::NAN);
    check(
        paper - greedy >= HIGH_SPREAD_MARGIN && mid > greedy && s.elapsed < TRAIN_LIMIT,
        format!(
            "@3px eta>=60: [32,24,16,8] {:.3}, [1,1,1,1] {:.3}, [12,10,9,4] {:.3} (all pixels {:.3}/{:.3}/{:.3}); {} steps x3 in {}",
            paper,
            greedy,
            mid,
            all(&s.entries[0]),
            all(&s.entries[1]),
            all(&s.entries[2]),
            TRAIN_STEPS,
            secs(s.elapsed)
        ),
    )
}

fn training_raises_coverage() -> Outcome {
    let s = desk_sweep().as_ref().map_err(Clone::clone)?;
    let trained = s.entries[0].model.as_ref().ok_or("paper-width model failed to train")?;
    let beam = &s.entries[0].beam;
    let before = validate(&s.template, beam, &s.held_out, 0).map_err(|e| e.to_string())?;
    let after = validate(trained, beam, &s.held_out, TRAIN_STEPS).map_err(|e| e.to_string())?;
    let (b, a) = (before.coverage[0].unwrap_or(0.0), after.coverage[0].unwrap_or(0.0));
    check(a > b, format!("held-out l=1 coverage {:.3} at init, {:.3} after training", b, a))
}

// ---- 8: loss decomposition --------------------------------------------------

fn loss_decomposes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let kinds = vec![SceneKind::TwoLayer, SceneKind::Planar, SceneKind::Zoom];
    let sampler = SceneSampler::new(32, 32, kinds);
    let mut worst = 0.0f64;
    for _ in 0..LOSS_INSTANCES {
        let pair = generate(&sampler.sample(rng.gen()).unwrap()).unwrap();
        let model = Model::init(ModelConfig::tiny(5, 4), rng.gen()).unwrap();
        let beam = BeamConfig::new((0..4).map(|_| rng.gen_range(1..12)).collect()).unwrap();
        let targets = PairTargets::new(&pair, 5).unwrap();
        let (_, r, _) = loss_and_gradients(&model, &beam, &pair, &targets, rng.gen()).unwrap();
        let sum: f64 = r.per_scale.iter().sum();
        worst = worst.max((r.total - sum).abs());
    }
    check(worst <= LOSS_TOL, format!("{} instances, max |total - sum of scales| = {:.2e}", LOSS_INSTANCES, worst))
}

// ---- 9: reproducibility -----------------------------------------------------

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let mut full = vec!["beammatch", "--out", out.to_str().unwrap(), "--threads", "1"];
    full.extend_from_slice(args);
    run_from(full).map_err(|e| format!("{:?}: {}", args, e))
}

fn cli_round(root: &Path) -> Result<(), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, run) = (root.join("data"), root.join("run"));
    cli(&data, &["gen", "--count", "3", "--height", "32", "--width", "64", "--seed", "9"])?;
    cli(&run, &["--preset", "tiny", "train", "--data", &s(&data), "--val", &s(&data), "--steps", "12"])?;
    let ck = s(&run.join("model.bmck"));
    let (src, tgt) = (s(&data.join("pair_00001_src.ppm")), s(&data.join("pair_00001_tgt.ppm")));
    cli(&root.join("match"), &["--preset", "tiny", "match", "--source", &src, "--target", &tgt, "--checkpoint", &ck])?;
    cli(&root.join("eval"), &["--preset", "tiny", "eval", "--data", &s(&data), "--checkpoint", &ck])
}

fn files(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.insert(p.strip_prefix(base).unwrap().display().to_string(), fs::read(&p).unwrap());
        }
    }
}

fn runs_are_bitwise_identical() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli_round(&a)?;
    cli_round(&b)?;
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    files(&a, &a, &mut fa);
    files(&b, &b, &mut fb);
    if fa.keys().ne(fb.keys()) {
        return Err("the two runs wrote different file sets".into());
    }
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    let wanted = ["run/model.bmck", "match/forward.flo", "match/backward.flo", "match/match.json", "eval/eval.csv", "eval/eval.json"];
    let missing: Vec<&str> = wanted.iter().copied().filter(|w| !fa.contains_key(*w)).collect();
    check(
        differing.is_empty() && missing.is_empty(),
        format!("{} files compared, differing {:?}, missing {:?}", fa.len(), differing, missing),
    )
}

// ---- 10: trace counts -------------------------------------------------------

fn trace_counts() -> Outcome {
    let model = Model::init(ModelConfig::tiny(5, 4), 10).unwrap();
    let mut scales = 0;
    for (h, w, widths) in [(64, 128, vec![32, 24, 16, 8]), (64, 64, vec![12, 10, 9, 4]), (32, 64, vec![1, 1, 1, 1])] {
        let pair = generate(&SceneConfig::planar(h, w, Homography::translation(4.0, -3.0), 10)).unwrap();
        let opts = MatchOptions {
            beam: BeamConfig::new(widths).unwrap(),
            ..MatchOptions::default()
        };
        let (_, trace) = match_with_trace(&model, &pair.source, &pair.target, &opts).unwrap();
        let keff = |l: usize| opts.beam.k(l).min((h * w) >> (2 * (l - 1)));
        for q in [[0u32, 0], [w as u32 - 1, h as u32 / 2], [17, 9]] {
            for s in trace_svgs(&trace, &pair.source, &pair.target, q).unwrap() {
                let l = s.scale;
                let markers = s.svg.matches("class=\"hyp\"").count();
                let cells = s.svg.matches("class=\"region-cell\"").count();
                let want_markers = if l >= 2 { keff(l) } else { 0 };
                let want_cells = if l < 5 { 4 * keff(l + 1) } else { 0 };
                if (markers, cells) != (want_markers, want_cells) {
                    return Err(format!(
                        "{}x{} query {:?} scale {}: {} markers, {} cells; want {}, {}",
                        h, w, q, l, markers, cells, want_markers, want_cells
                    ));
                }
                scales += 1;
            }
        }
    }
    Ok(format!("{} rendered scales, markers = K_l and region cells = 4 K_(l+1)", scales))
}

// ---- driver -----------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "exhaustive beam argmax equals nearest neighbour", exhaustive_nearest_neighbour),
        (2, "gradient suite (ops and tiny model, f64)", gradient_suite),
        (3, "correspondence maps sum to one", maps_sum_to_one),
        (4, "child disjointness, 4K regions, monotone coverage", propagation_invariants),
        (5, "one-to-m analysis matches brute force", analysis_matches_brute_force),
        (6, "multi-hypothesis beam beats greedy on high spread", beam_beats_greedy),
        (7, "training raises l=1 coverage", training_raises_coverage),
        (8, "loss total equals sum of scale terms", loss_decomposes),
        (9, "single-thread runs are bitwise identical", runs_are_bitwise_identical),
        (10, "trace markers and region cells follow the beam", trace_counts),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {}", msg))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{} criterion {:>2}: {} [{}] ({})", tag, n, name, detail, secs(t0.elapsed()));
    }
    if failed > 0 {
        println!("{} criteria failed", failed);
        std::process::exit(1);
    }
}
