use ring_hough::synth::{self, RingSpec, SceneSpec};
use ring_hough::{detect_rings, detect_rings_oracle, Detector, DetectorConfig, GrayImage};

fn tuned(r_min: u32, r_max: u32) -> DetectorConfig {
    let mut cfg = DetectorConfig::new(2.5, r_min, r_max);
    cfg.curvature_threshold = -0.017;
    cfg.hough.vote_threshold_norm = 0.3;
    cfg
}

fn two_particles() -> (GrayImage, Vec<synth::TruthRing>) {
    // Two particles whose outer rings overlap; each has inner rings and a
    // bright central spot.
    let scene = SceneSpec {
        width: 200,
        height: 160,
        rings: vec![RingSpec::new(72.3, 80.6, 38.4), RingSpec::new(128.8, 76.1, 33.7)],
        noise_sd: 0.03,
        seed: 12,
        background: 0.1,
    };
    synth::render_scene(&scene).unwrap()
}

#[test]
fn two_particles_give_exactly_two_outer_rings() {
    let (img, truth) = two_particles();
    let found = detect_rings(&img, &tuned(8, 60)).unwrap();
    assert_eq!(found.len(), 2, "{found:?}");
    for t in &truth {
        assert!(
            found.iter().any(|d| (d.cx - t.cx).hypot(d.cy - t.cy) < 0.5 && (d.r - t.r).abs() < 0.5),
            "{t:?} not found in {found:?}"
        );
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let (img, _) = two_particles();
    let mut det = Detector::new(tuned(8, 60));
    let first = det.analyze(&img).unwrap();
    for _ in 0..3 {
        let again = det.analyze(&img).unwrap();
        assert_eq!(again.vote_count, first.vote_count);
        assert_eq!(again.peaks, first.peaks);
        assert_eq!(again.detections.len(), first.detections.len());
        for (a, b) in again.detections.iter().zip(&first.detections) {
            assert_eq!(
                [a.cx, a.cy, a.r, a.score, a.rms_residual].map(f64::to_bits),
                [b.cx, b.cy, b.r, b.score, b.rms_residual].map(f64::to_bits)
            );
        }
    }
    // A fresh detector (empty slab) gives the same answer as a reused one.
    assert_eq!(detect_rings(&img, &tuned(8, 60)).unwrap(), first.detections);
}

#[test]
fn oracle_single_ring_matches_truth() {
    let scene = SceneSpec {
        width: 96,
        height: 90,
        rings: vec![RingSpec::new(47.6, 44.2, 21.3)],
        noise_sd: 0.0,
        seed: 0,
        background: 0.1,
    };
    let (img, truth) = synth::render_scene(&scene).unwrap();
    let cfg = tuned(8, 40);
    let oracle = detect_rings_oracle(&img, &cfg).unwrap();
    assert_eq!(oracle, detect_rings(&img, &cfg).unwrap());
    assert_eq!(oracle.len(), 1);
    let (d, t) = (&oracle[0], &truth[0]);
    assert!((d.cx - t.cx).abs() < 0.2 && (d.cy - t.cy).abs() < 0.2 && (d.r - t.r).abs() < 0.2, "{d:?}");
}
