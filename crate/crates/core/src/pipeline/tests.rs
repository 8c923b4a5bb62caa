use std::path::Path;

use super::forward::{forward, Mode, TrainTargets};
use super::*;
use crate::corrmap::GridDims;
use crate::features::{handcrafted, FeaturePyramid};
use crate::model::ModelConfig;
use crate::numeric::Graph;
use crate::scene::{gt_at_scale, generate, Downsample, Homography, SceneConfig};

fn hc_model() -> Model {
    Model::init(ModelConfig::handcrafted(5, 2000.0), 0).unwrap()
}

fn planar(h: usize, w: usize, hom: Homography, seed: u64) -> crate::scene::ScenePair {
    generate(&SceneConfig::planar(h, w, hom, seed)).unwrap()
}

#[test]
fn identity_pair_matches_itself() {
    let pair = planar(64, 64, Homography::identity(), 3);
    let r = match_images(&hc_model(), &pair.source, &pair.target, &BeamConfig::paper()).unwrap();
    let f = &r.forward.flow;
    let mut good = 0;
    for y in 0..64 {
        for x in 0..64 {
            let c = f.at(x, y);
            if (c[0] - x as f32).abs() <= 1.0 && (c[1] - y as f32).abs() <= 1.0 {
                good += 1;
            }
        }
    }
    assert!(good as f64 / 4096.0 >= 0.95, "{} of 4096 within 1 px", good);
}

#[test]
fn swapping_inputs_swaps_directions_bitwise() {
    let pair = planar(32, 48, Homography::translation(3.0, -2.0), 5);
    let m = Model::init(ModelConfig::tiny(3, 4), 1).unwrap();
    let beam = BeamConfig::new(vec![6, 4]).unwrap();
    let ab = match_images(&m, &pair.source, &pair.target, &beam).unwrap();
    let ba = match_images(&m, &pair.target, &pair.source, &beam).unwrap();
    assert_eq!(ab.forward, ba.backward);
    assert_eq!(ab.backward, ba.forward);
}

/// Sequential f32 inner products over every target pixel.
fn brute_argmax(fs: &FeaturePyramid<f32>, ft: &FeaturePyramid<f32>) -> Vec<[u32; 2]> {
    let (a, b) = (fs.level(1), ft.level(1));
    let grid = GridDims::of(b).unwrap();
    (0..a.rows())
        .map(|i| {
            let mut best = (f32::NEG_INFINITY, 0);
            for j in 0..b.rows() {
                let mut s = 0.0f32;
                for (x, y) in a.row(i).iter().zip(b.row(j)) {
                    s += x * y;
                }
                if s > best.0 {
                    best = (s, j);
                }
            }
            grid.coords(best.1 as u32)
        })
        .collect()
}

#[test]
fn exhaustive_beam_reproduces_nearest_neighbour() {
    let pair = planar(32, 32, Homography::similarity_with_perspective(0.1, 1.1, [16.0, 16.0], [2.0, 1.0], [0.0, 0.0]), 9);
    let beam = BeamConfig::exhaustive(GridDims::new(32, 32), 5);
    let r = match_images(&hc_model(), &pair.source, &pair.target, &beam).unwrap();
    let fs = handcrafted(&pair.source, 5);
    let ft = handcrafted(&pair.target, 5);
    assert_eq!(r.forward.argmax, brute_argmax(&fs, &ft));
    assert_eq!(r.backward.argmax, brute_argmax(&ft, &fs));
}

#[test]
fn odd_sizes_are_padded_and_clamped() {
    let pair = planar(48, 64, Homography::translation(-6.0, 4.0), 2);
    let src = pair.source.padded(37, 53);
    let tgt = pair.target.padded(41, 50);
    let r = match_images(&hc_model(), &src, &tgt, &BeamConfig::paper()).unwrap();
    assert_eq!((r.forward.flow.height, r.forward.flow.width), (37, 53));
    assert_eq!((r.backward.flow.height, r.backward.flow.width), (41, 50));
    for c in &r.forward.flow.coords {
        assert!(c[0] >= 0.0 && c[0] <= 49.0 && c[1] >= 0.0 && c[1] <= 40.0);
    }
    for a in &r.forward.argmax {
        assert!(a[0] < 50 && a[1] < 41);
    }
}

#[test]
fn flow_file_round_trips_and_rejects_damage() {
    let flow = DenseFlow {
        height: 2,
        width: 3,
        coords: (0..6).map(|i| [i as f32 * 0.5, -(i as f32)]).collect(),
        confidence: (0..6).map(|i| i as f32 / 6.0).collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.flo");
    write_flow(&p, &flow).unwrap();
    assert_eq!(read_flow(&p).unwrap(), flow);
    let bytes = flow.encode();
    let mem = Path::new("mem");
    assert!(DenseFlow::decode(&bytes[..bytes.len() - 1], mem).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(DenseFlow::decode(&bad, mem).is_err());
    let mut bad = bytes;
    bad[4] = 9;
    assert!(DenseFlow::decode(&bad, mem).is_err());
}

#[test]
fn trace_counts_follow_beam_widths() {
    let pair = planar(64, 64, Homography::translation(5.0, 3.0), 4);
    let m = Model::init(ModelConfig::tiny(5, 4), 2).unwrap();
    let opts = MatchOptions {
        beam: BeamConfig::paper(),
        ..MatchOptions::default()
    };
    let (_, trace) = match_with_trace(&m, &pair.source, &pair.target, &opts).unwrap();
    let scales = trace_svgs(&trace, &pair.source, &pair.target, [20, 33]).unwrap();
    assert_eq!(scales.len(), 5);
    for s in &scales {
        let l = s.scale;
        // K is clamped to the grid: scale 5 of a 64x64 image has 16 cells.
        let keff = |l: usize| opts.beam.k(l).min(4096 >> (2 * (l - 1)));
        let k = if l >= 2 { keff(l) } else { 0 };
        let region = if l < 5 { 4 * keff(l + 1) } else { 0 };
        assert_eq!(s.svg.matches("class=\"hyp\"").count(), k, "scale {}", l);
        assert_eq!(s.svg.matches("class=\"region-cell\"").count(), region, "scale {}", l);
        assert_eq!(s.svg.matches("class=\"self-cell\"").count(), region, "scale {}", l);
        assert_eq!(s.svg.matches("class=\"query\"").count(), 1);
        assert_eq!((s.hypotheses, s.region_cells), (k, region));
    }
    assert!(trace_svgs(&trace, &pair.source, &pair.target, [64, 0]).is_err());
    let tight = MatchOptions {
        trace_pixel_budget: 100,
        ..opts
    };
    assert!(matches!(match_with_trace(&m, &pair.source, &pair.target, &tight), Err(Error::Argument(_))));
}

#[test]
fn region_width_does_not_grow_with_the_image() {
    let m = hc_model();
    let beam = BeamConfig::paper();
    for (h, w) in [(32, 32), (64, 128)] {
        let pair = planar(h, w, Homography::identity(), 1);
        let (_, t) = match_with_trace(&m, &pair.source, &pair.target, &MatchOptions { beam: beam.clone(), ..Default::default() }).unwrap();
        assert_eq!(t.regions_at(1).unwrap().plan.width(), 4 * beam.k(2));
        assert_eq!(t.regions_at(1).unwrap().plan.rows(), h * w);
    }
}

fn train_forward(teacher_forcing: bool) -> (Vec<usize>, super::forward::ForwardOut, Vec<Vec<crate::scene::Correspondence>>) {
    let pair = planar(32, 32, Homography::translation(4.0, 0.0), 8);
    let cfg = ModelConfig::tiny(3, 4);
    let m = Model::init(cfg.clone(), 0).unwrap();
    let gt: Vec<_> = (1..=3)
        .map(|l| gt_at_scale(&pair.gt_flow, (32, 32), l, Downsample::Floor).unwrap())
        .collect();
    let gtr: Vec<_> = (1..=3)
        .map(|l| gt_at_scale(&pair.gt_flow_reverse, (32, 32), l, Downsample::Floor).unwrap())
        .collect();
    let mut g = Graph::<f64>::new();
    let bound = m.params.cast::<f64>().bind(&mut g, true);
    let xs = g.constant(crate::features::image_tensor(&pair.source));
    let xt = g.constant(crate::features::image_tensor(&pair.target));
    let targets = TrainTargets {
        st: &gt,
        ts: &gtr,
        teacher_forcing,
    };
    let out = forward(&mut g, &bound, &cfg, &BeamConfig::new(vec![2, 1]).unwrap(), xs, xt, &Mode::Train(targets), true).unwrap();
    let masked = out.st.terms.iter().map(|t| t.masked).collect();
    (masked, out, gt)
}

#[test]
fn training_maps_are_normalized_and_terms_cover_gt() {
    let (_, out, gt) = train_forward(false);
    for d in [&out.st, &out.ts] {
        assert_eq!(d.maps.len(), 3);
        for map in &d.maps {
            for i in 0..map.src.len() {
                let s: f64 = map.row(i).iter().map(|&p| p as f64).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
    for t in &out.st.terms {
        assert_eq!(t.terms + t.masked, gt[t.scale - 1].len());
    }
    // Coarsest maps are dense: nothing can be masked there.
    assert_eq!(out.st.terms[0].masked, 0);
}

#[test]
fn teacher_forcing_keeps_every_gt_parent() {
    let (masked, out, _) = train_forward(true);
    assert!(masked.iter().all(|&m| m == 0), "{:?}", masked);
    assert!(out.st.hypotheses.iter().all(|h| h.k <= 2));
}


#[test]
fn kept_maps_follow_regions_and_sum_to_one() {
    let pair = planar(32, 64, Homography::translation(-3.0, 2.0), 6);
    let m = Model::init(ModelConfig::tiny(5, 4), 3).unwrap();
    let opts = MatchOptions::default();
    let (r, t) = match_with_trace(&m, &pair.source, &pair.target, &opts).unwrap();
    assert_eq!(t.maps.iter().map(|b| b.scale).collect::<Vec<_>>(), vec![5, 4, 3, 2, 1]);
    for b in &t.maps {
        for i in 0..b.src.len() {
            let s: f64 = b.row(i).iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-5, "scale {} row {} sums to {}", b.scale, i, s);
        }
        if let Some(reg) = t.regions_at(b.scale) {
            assert_eq!(b.plan.as_deref(), Some(&*reg.plan));
        }
    }
    // The l=2 hypotheses are the top entries of the l=2 maps.
    let (h, b) = (t.hypotheses_at(2).unwrap(), t.maps_at(2).unwrap());
    let best = (0..b.width()).max_by(|&x, &y| b.row(7)[x].total_cmp(&b.row(7)[y]).then(b.location(7, y).cmp(&b.location(7, x)))).unwrap();
    assert_eq!(h.row(7)[0], b.location(7, best));
    let traced = match_images(&m, &pair.source, &pair.target, &opts.beam).unwrap();
    assert_eq!(r, traced);
}
