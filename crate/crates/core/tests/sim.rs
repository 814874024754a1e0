use std::collections::HashMap;

use ereformer::events::Polarity;
use ereformer::sim::{read_dataset, write_dataset, DatasetSpec, MotionSegment, Plane, SceneSpec, SimulateSpec};

fn plane(depth: f64, seed: u64) -> Plane {
    Plane {
        depth,
        texture_seed: seed,
        extent: None,
        texel_px: 4.0,
    }
}

fn scene(velocity: [f64; 2], planes: Vec<Plane>) -> SceneSpec {
    SceneSpec {
        width: 32,
        height: 32,
        duration_us: 100_000,
        bin_us: 50_000,
        velocity,
        motion: Vec::new(),
        planes,
        threshold: 0.2,
        frame_rate_hz: 1000.0,
        seed: 3,
    }
}

#[test]
fn static_scene_renders_identically_and_emits_nothing() {
    let s = scene([0.0, 0.0], vec![plane(5.0, 1), plane(2.0, 2)]);
    assert_eq!(s.render_intensity(0.0), s.render_intensity(73_123.0));
    let seq = s.emit_events().unwrap();
    assert!(seq.stream.is_empty());
    assert_eq!(seq.bins(), 2);
}

#[test]
fn lateral_motion_shifts_by_disparity() {
    // f = 32 px, depth 4 m, v = 2.5 m/s, δ = 100 ms: disparity v·δ·f/Z = 2 px
    let s = scene([2.5, 0.0], vec![plane(4.0, 9)]);
    let (a, b) = (s.render_intensity(10_000.0), s.render_intensity(110_000.0));
    for y in 0..32 {
        for x in 0..30 {
            let (l, r) = (b[y * 32 + x], a[y * 32 + x + 2]);
            assert!((l - r).abs() < 1e-12, "({x},{y}): {l} vs {r}");
        }
    }
}

#[test]
fn near_planes_occlude_far_ones() {
    let mut near = plane(2.0, 4);
    near.extent = Some([-5.0, -5.0, 0.0, 5.0]);
    let s = scene([0.0, 0.0], vec![plane(10.0, 3), near]);
    let d = s.render_depth(0.0).unwrap();
    // left half of the image sees the near rectangle (x < 0 in world)
    for y in 0..32 {
        for x in 0..32 {
            let expected = if x < 16 { 2.0 } else { 10.0 };
            assert_eq!(d.values[y * 32 + x], expected, "({x},{y})");
        }
    }
}

#[test]
fn single_plane_depth_is_exact_and_masked_elsewhere() {
    let mut p = plane(7.5, 5);
    p.extent = Some([0.0, 0.0, 10.0, 10.0]);
    let seq = scene([1.0, 0.0], vec![p]).emit_events().unwrap();
    for d in &seq.depths {
        for (i, (&v, &m)) in d.values.iter().zip(&d.mask).enumerate() {
            let covered = i % 32 >= 16 && i / 32 >= 16;
            if m {
                assert_eq!(v, 7.5);
            }
            // the plane slides left by 0.2 m over 100 ms; it still covers the lower-right quadrant
            if covered {
                assert!(m, "pixel {i}");
            }
        }
        assert!(d.mask.iter().any(|&m| !m));
    }
}

#[test]
fn event_count_non_increasing_in_threshold() {
    let base = scene([2.0, 1.0], vec![plane(3.0, 1), plane(6.0, 2)]);
    let counts: Vec<usize> = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.8]
        .iter()
        .map(|&t| SceneSpec { threshold: t, ..base.clone() }.emit_events().unwrap().stream.len())
        .collect();
    assert!(counts[0] > 0);
    for w in counts.windows(2) {
        assert!(w[1] <= w[0], "{counts:?}");
    }
    // doubling strictly decreases while events remain
    assert!(counts[3] < counts[1] && counts[5] < counts[3]);
}

#[test]
fn reversing_motion_flips_polarity() {
    // under one pixel of travel, so each pixel sees a single signed gradient
    let short = |v: f64| SceneSpec {
        duration_us: 20_000,
        threshold: 0.05,
        ..scene([v, 0.0], vec![plane(2.0, 7)])
    };
    let (a, b) = (short(3.0), short(-3.0));
    let net = |s: &SceneSpec| {
        let mut m: HashMap<(u16, u16), i64> = HashMap::new();
        for e in s.emit_events().unwrap().stream.events() {
            *m.entry((e.x, e.y)).or_default() += i64::from(e.p.sign());
        }
        m
    };
    let (na, nb) = (net(&a), net(&b));
    let both: Vec<_> = na
        .iter()
        .filter_map(|(k, &v)| nb.get(k).map(|&w| (v, w)))
        .filter(|&(v, w)| v != 0 && w != 0)
        .collect();
    assert!(both.len() > 50);
    let flipped = both.iter().filter(|&&(v, w)| v.signum() != w.signum()).count();
    assert!(flipped as f64 > 0.9 * both.len() as f64, "{flipped}/{}", both.len());
}

#[test]
fn simulation_is_deterministic_and_sorted() {
    let s = DatasetSpec {
        sequences: 1,
        bins_per_sequence: 4,
        ..DatasetSpec::default()
    }
    .scene(0);
    let (a, b) = (s.emit_events().unwrap(), s.emit_events().unwrap());
    assert_eq!(a, b);
    assert!(!a.stream.is_empty());
    let keys: Vec<_> = a.stream.events().iter().map(|e| (e.t, e.y, e.x, e.p.sign())).collect();
    assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    assert!(a.stream.events().iter().any(|e| e.p == Polarity::Negative));
}

#[test]
fn pause_segments_are_silent() {
    let mut s = scene([0.0, 0.0], vec![plane(3.0, 1)]);
    s.motion = vec![
        MotionSegment {
            duration_us: 50_000,
            velocity: [2.0, 0.0],
        },
        MotionSegment {
            duration_us: 50_000,
            velocity: [0.0, 0.0],
        },
    ];
    let seq = s.emit_events().unwrap();
    let bins = seq.stream.split_into_bins(50_000).unwrap();
    assert!(bins[0].len() > 0);
    assert_eq!(bins[1].len(), 0);
}

#[test]
fn dataset_roundtrip_and_spec_parsing() {
    let spec = SimulateSpec::from_toml(
        "[dataset]\nwidth = 32\nheight = 32\nsequences = 2\nbins_per_sequence = 3\nseed = 4\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(dir.path(), &spec.scenes()).unwrap();
    let read = read_dataset(dir.path()).unwrap();
    assert_eq!(written, read);
    assert!(SimulateSpec::from_toml("[dataset]\nwidht = 32\n").is_err());
    assert!(SimulateSpec::from_toml("").is_err());
    let bad = SceneSpec {
        width: 40,
        ..scene([0.0, 0.0], vec![])
    };
    assert!(bad.validate().is_err());
}
