use std::collections::BTreeSet;

use super::*;

fn identity_pair(h: usize, w: usize) -> ScenePair {
    generate(&SceneConfig::planar(h, w, Homography::identity(), 5)).unwrap()
}

fn two_layer(shift: f64) -> SceneConfig {
    SceneConfig {
        height: 64,
        width: 128,
        texture: TextureMode::Octave,
        background: Homography::translation(2.0, 1.0),
        foreground: Some(ForegroundLayer {
            homography: Homography::translation(2.0 + shift, 1.0),
            region: Rect {
                x0: 40.5,
                y0: 10.0,
                x1: 77.5,
                y1: 54.0,
            },
        }),
        seed: 17,
    }
}

#[test]
fn identity_scene_maps_every_pixel_to_itself() {
    let pair = identity_pair(32, 48);
    assert_eq!(pair.gt_flow.valid_count(), 32 * 48);
    for y in 0..32 {
        for x in 0..48 {
            assert_eq!(pair.gt_flow.at(x, y), Some([x as f64, y as f64]));
        }
    }
    assert_eq!(pair.source, pair.target);
}

#[test]
fn translation_scene_has_closed_form_flow() {
    let (tx, ty) = (5.25, -3.5);
    let pair = generate(&SceneConfig::planar(32, 32, Homography::translation(tx, ty), 1)).unwrap();
    let mut valid = 0;
    for y in 0..32 {
        for x in 0..32 {
            let want = [x as f64 + tx, y as f64 + ty];
            let inside = want[0] >= 0.0 && want[0] <= 31.0 && want[1] >= 0.0 && want[1] <= 31.0;
            assert_eq!(pair.gt_flow.valid[y * 32 + x], inside);
            if let Some(q) = pair.gt_flow.at(x, y) {
                assert_eq!(q, want);
                valid += 1;
            }
        }
    }
    assert!(valid > 0);
}

#[test]
fn two_layer_flow_matches_per_layer_homographies() {
    let cfg = two_layer(-50.0);
    let pair = generate(&cfg).unwrap();
    let fg = cfg.foreground.unwrap();
    let fg_inv = fg.homography.inverse().unwrap();
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let p = [x as f64, y as f64];
            let i = y * cfg.width + x;
            let on_fg = fg.region.contains(p);
            assert_eq!(pair.source_layer[i] == 1, on_fg);
            let h = if on_fg { fg.homography } else { cfg.background };
            let q = h.apply(p).unwrap();
            assert_eq!(pair.gt_flow.coords[i], q);
            let in_bounds = q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= 127.0 && q[1] <= 63.0;
            // Occlusion consistency: background hidden iff foreground covers q.
            let covered = fg_inv.apply(q).is_some_and(|s| fg.region.contains(s));
            let want_valid = in_bounds && (on_fg || !covered);
            assert_eq!(pair.gt_flow.valid[i], want_valid, "pixel ({}, {})", x, y);
        }
    }
}

#[test]
fn boundary_patch_has_two_separated_correspondent_clusters() {
    let pair = generate(&two_layer(40.0)).unwrap();
    // 16x16 patch at x in [32, 48) straddles the foreground edge at x = 40.5.
    let mut xs_bg = Vec::new();
    let mut xs_fg = Vec::new();
    for y in 16..32 {
        for x in 32..48 {
            if let Some(q) = pair.gt_flow.at(x, y) {
                if pair.source_layer[y * 128 + x] == 1 {
                    xs_fg.push(q[0]);
                } else {
                    xs_bg.push(q[0]);
                }
            }
        }
    }
    assert!(!xs_bg.is_empty() && !xs_fg.is_empty());
    let fg_min = xs_fg.iter().cloned().fold(f64::MAX, f64::min);
    let bg_max = xs_bg.iter().cloned().fold(f64::MIN, f64::max);
    assert!(fg_min - bg_max > 30.0, "clusters overlap: {} vs {}", bg_max, fg_min);
}

#[test]
fn reprojection_recovers_source_coordinates() {
    for seed in 0..6 {
        let sampler = SceneSampler::new(32, 64, vec![SceneKind::Planar, SceneKind::TwoLayer, SceneKind::Zoom]);
        let cfg = sampler.sample(seed).unwrap();
        let pair = generate(&cfg).unwrap();
        for y in 0..32 {
            for x in 0..64 {
                let Some(q) = pair.gt_flow.at(x, y) else { continue };
                let h = match (pair.source_layer[y * 64 + x], cfg.foreground) {
                    (1, Some(fg)) => fg.homography,
                    _ => cfg.background,
                };
                let p = h.inverse().unwrap().apply(q).unwrap();
                assert!((p[0] - x as f64).abs() < 1e-6 && (p[1] - y as f64).abs() < 1e-6);
                assert!(q[0] >= 0.0 && q[0] <= 63.0 && q[1] >= 0.0 && q[1] <= 31.0);
            }
        }
    }
}

#[test]
fn reverse_flow_is_consistent_with_forward_flow() {
    let pair = generate(&two_layer(40.0)).unwrap();
    let mut checked = 0;
    for y in 0..64 {
        for x in 0..128 {
            let Some(q) = pair.gt_flow.at(x, y) else { continue };
            // Integer translations: q lands on a pixel centre up to the shift fraction.
            let (qx, qy) = (q[0].round() as usize, q[1].round() as usize);
            if (q[0] - qx as f64).abs() > 1e-9 || (q[1] - qy as f64).abs() > 1e-9 {
                continue;
            }
            let back = pair.gt_flow_reverse.at(qx, qy).expect("visible point maps back");
            assert!((back[0] - x as f64).abs() < 1e-9 && (back[1] - y as f64).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let sampler = SceneSampler::new(32, 32, vec![SceneKind::TwoLayer, SceneKind::Planar]);
    let a = generate(&sampler.sample(9).unwrap()).unwrap();
    let b = generate(&sampler.sample(9).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = generate(&sampler.sample(10).unwrap()).unwrap();
    assert_ne!(a.source, c.source);
}

#[test]
fn bad_configs_are_rejected() {
    let mut cfg = SceneConfig::planar(30, 32, Homography::identity(), 0);
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    cfg.height = 32;
    cfg.background = Homography([1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    let mut s = SceneSampler::new(32, 32, vec![SceneKind::Zoom]);
    s.zoom_range = (0.0, 2.0);
    assert!(s.sample(1).is_err());
}

#[test]
fn gt_at_scale_examples() {
    let pair = identity_pair(48, 48);
    let l1 = pair.gt_at_scale(1).unwrap();
    assert_eq!(l1.len(), 48 * 48);
    assert!(l1.iter().all(|c| c.src == c.tgt));
    let l3 = pair.gt_at_scale(3).unwrap();
    // Source pixel (33, 14): 33/4 = 8.25 -> 8, 14/4 = 3.5 -> 4.
    let c = l3[14 * 48 + 33];
    assert_eq!(c.src, [8, 4]);
    assert_eq!(c.tgt, [8, 4]);
    assert!(pair.gt_at_scale(0).is_err());
}

#[test]
fn gt_at_scale_matches_loop_oracle() {
    let sampler = SceneSampler::new(64, 64, vec![SceneKind::TwoLayer]);
    let pair = generate(&sampler.sample(3).unwrap()).unwrap();
    let got: BTreeSet<Correspondence> = pair.gt_at_scale(5).unwrap().into_iter().collect();
    let mut want = BTreeSet::new();
    for y in 0..64 {
        for x in 0..64 {
            let i = y * 64 + x;
            if !pair.gt_flow.valid[i] {
                continue;
            }
            let q = pair.gt_flow.coords[i];
            let down = |v: f64| -> u32 {
                let r = (v.round() / 16.0).round() as i64;
                r.clamp(0, 3) as u32
            };
            want.insert(Correspondence {
                src: [down(x as f64), down(y as f64)],
                tgt: [down(q[0]), down(q[1])],
            });
        }
    }
    assert_eq!(got, want);
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let sampler = SceneSampler::new(32, 32, vec![SceneKind::TwoLayer, SceneKind::Zoom]);
    let pairs: Vec<ScenePair> = (0..3)
        .map(|i| generate(&sampler.sample(pair_seed(4, i)).unwrap()).unwrap())
        .collect();
    let m = write_dataset(&pairs[..1], dir.path(), true, Some(&sampler), Some(4)).unwrap();
    let (m2, back) = load_dataset(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(back, pairs[..1].to_vec());

    let empty = tempfile::tempdir().unwrap();
    write_dataset(&[], empty.path(), false, None, None).unwrap();
    let (m, back) = load_dataset(empty.path()).unwrap();
    assert!(m.pairs.is_empty() && back.is_empty());
}

#[test]
fn manifest_rejects_wrong_version_and_tampered_images() {
    let dir = tempfile::tempdir().unwrap();
    let pair = identity_pair(16, 16);
    write_dataset(&[pair.clone()], dir.path(), false, None, None).unwrap();
    let img = dir.path().join("pair_00000_tgt.ppm");
    let mut other = pair.target.clone();
    other.set_pixel(0, 0, [1.0, 0.0, 0.0]);
    other.write_ppm(&img).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));

    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 99")).unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(Error::Format { .. })));
}
