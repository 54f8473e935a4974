//! Acceptance criteria, run in order on one thread so that timings are not
//! disturbed by other tests. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::f64::consts::{SQRT_2, TAU};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ring_hough::batch;
use ring_hough::calib::{self, CalibrationCurve, CalibrationSample};
use ring_hough::hough::{sort_votes, stream_levels_observed, LevelObserver, LevelView, VoteCodec};
use ring_hough::imaging::GrayImage;
use ring_hough::pipeline::{curvature_of, refine_peaks, FullAccumulator};
use ring_hough::ridges::detect_ridges;
use ring_hough::spline::{fit_smoothing_spline, smooth, Lambda};
use ring_hough::synth::{self, flow, CorpusSpec, MatchReport, RingSpec, SceneSpec};
use ring_hough::track::{link_frames, LinkConfig};
use ring_hough::{hough, AccumulatorSlab, Detector, DetectorConfig, HoughConfig, RingDetection};

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    /// The host cannot exercise the criterion; reported as FAIL but not
    /// counted against the exit status.
    blocked: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, blocked: false, detail: detail.into() }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 12] = [
        (1, "oracle equivalence", oracle_equivalence),
        (2, "robustness", robustness),
        (3, "normalization constant", normalization_constant),
        (4, "smoothing width law", smoothing_width_law),
        (5, "sub-pixel accuracy", subpixel_accuracy),
        (6, "memory footprint", memory_footprint),
        (7, "throughput", throughput),
        (8, "parallel scaling", parallel_scaling),
        (9, "calibration round trip", calibration_round_trip),
        (10, "linking", linking),
        (11, "spline", spline),
        (12, "end-to-end error propagation", error_propagation),
    ];
    let (mut failed, mut blocked) = (0, 0);
    for (n, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = match (out.pass, out.blocked) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL [blocked by host]",
        };
        println!("criterion {n:2} {name}: {verdict} ({}; {:.1} s)", out.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!out.pass && !out.blocked);
        blocked += usize::from(!out.pass && out.blocked);
    }
    if blocked > 0 {
        println!("{blocked} criteria could not be exercised on this host");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn render(scene: &SceneSpec) -> GrayImage {
    synth::render_scene(scene).unwrap().0
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------

/// Copies of every completed level: the raw counts and the normalized value
/// of every hotspot.
/// Radius, raw counts, and (cell, normalized value) at each hotspot.
type CapturedLevel = (u32, Vec<u32>, Vec<(u32, f64)>);

#[derive(Default)]
struct LevelCapture {
    levels: Vec<CapturedLevel>,
}

impl LevelObserver for LevelCapture {
    fn level_complete(&mut self, level: &LevelView<'_>) {
        let hot = level.hotspots.iter().map(|&c| (c, level.norm[c as usize])).collect();
        self.levels.push((level.r, level.raw.to_vec(), hot));
    }
}

fn random_scene(rng: &mut ChaCha8Rng, seed: u64) -> SceneSpec {
    let (w, h) = (340usize, 370usize);
    let n = rng.random_range(5..=25);
    let rings = (0..n)
        .map(|_| {
            let r = rng.random_range(8.0..=55.0);
            let m = r + 3.0;
            RingSpec {
                cx: rng.random_range(m..=w as f64 - m),
                cy: rng.random_range(m..=h as f64 - m),
                r,
                amplitude: rng.random_range(0.35..=0.6),
                ring_width: 2.0,
                inner_rings: 2,
            }
        })
        .collect();
    SceneSpec { width: w, height: h, rings, noise_sd: 0.05, seed, background: 0.1 }
}

fn oracle_equivalence() -> Outcome {
    let mut cfg = DetectorConfig::new(2.5, 8, 55);
    cfg.curvature_threshold = -0.012;
    cfg.hough.vote_threshold_norm = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut det = Detector::new(cfg.clone());
    let (mut levels, mut peaks, mut fits) = (0usize, 0usize, 0usize);
    for frame in 0..50 {
        let img = render(&random_scene(&mut rng, frame));
        let (w, h) = (img.width(), img.height());

        let mut capture = LevelCapture::default();
        let streamed = det.analyze_observed(&img, &mut capture).unwrap();

        let ridges = detect_ridges(&curvature_of(&img, &cfg).unwrap(), cfg.curvature_threshold);
        let votes = hough::collect_votes(&ridges, &cfg.hough, w, h);
        let acc = FullAccumulator::from_votes(&cfg.hough, w, h, &votes).unwrap();

        let expected_levels: Vec<u32> = (cfg.hough.r_lo()..=cfg.hough.r_hi()).collect();
        let seen: Vec<u32> = capture.levels.iter().map(|l| l.0).collect();
        if seen != expected_levels {
            return outcome(false, format!("frame {frame}: streamed levels {seen:?}"));
        }
        for (r, raw, hot) in &capture.levels {
            if raw.as_slice() != acc.raw_level(*r) {
                return outcome(false, format!("frame {frame}: raw level {r} differs"));
            }
            let norm = acc.norm_level(*r);
            if let Some((c, v)) = hot.iter().find(|(c, v)| v.to_bits() != norm[*c as usize].to_bits()) {
                return outcome(false, format!("frame {frame}: level {r} cell {c}: {v} vs {}", norm[*c as usize]));
            }
            levels += 1;
        }

        let key = |p: &ring_hough::PeakCandidate| (p.r, p.cy, p.cx, p.score.to_bits());
        let mut a: Vec<_> = streamed.peaks.iter().map(key).collect();
        let mut b: Vec<_> = acc.peaks().iter().map(key).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return outcome(false, format!("frame {frame}: peak sets differ ({} vs {})", a.len(), b.len()));
        }
        peaks += a.len();

        // The oracle's remaining stage, on the accumulator already built.
        let oracle = refine_peaks(&ridges, &acc.peaks(), &cfg).0;
        if frame == 0 && oracle != ring_hough::detect_rings_oracle(&img, &cfg).unwrap() {
            return outcome(false, "oracle pipeline mismatch");
        }
        let same = |x: &RingDetection, y: &RingDetection| {
            close(x.cx, y.cx, 1e-9) && close(x.cy, y.cy, 1e-9) && close(x.r, y.r, 1e-9) && x.inliers == y.inliers
        };
        if streamed.detections.len() != oracle.len()
            || !streamed.detections.iter().zip(&oracle).all(|(x, y)| same(x, y))
        {
            return outcome(false, format!("frame {frame}: fitted circles differ"));
        }
        fits += oracle.len();
    }
    outcome(true, format!("50 frames, {levels} levels bit-exact, {peaks} peaks, {fits} fits identical"))
}

// ---------------------------------------------------------------------------

fn score_corpus(scenes: &[SceneSpec], cfg: &DetectorConfig) -> (MatchReport, MatchReport) {
    let mut det = Detector::new(cfg.clone());
    let mut all = Vec::new();
    let mut isolated = Vec::new();
    for scene in scenes {
        let (img, truth) = synth::render_scene(scene).unwrap();
        let found = det.detect(&img).unwrap();
        all.push(synth::score_detections(&truth, &found, synth::DEFAULT_TOL_CENTER, synth::DEFAULT_TOL_RADIUS));
        let clusters = synth::cluster_membership(&truth);
        let lone: Vec<_> = truth.iter().zip(&clusters).filter(|(_, &c)| !c).map(|(t, _)| *t).collect();
        isolated.push(synth::score_detections(&lone, &found, synth::DEFAULT_TOL_CENTER, synth::DEFAULT_TOL_RADIUS));
    }
    (MatchReport::aggregate(&all), MatchReport::aggregate(&isolated))
}

fn robustness() -> Outcome {
    let spec = CorpusSpec::robustness(600, 7);
    let scenes = synth::generate_corpus(&spec).unwrap();
    let shape = synth::corpus_shape(&scenes);
    let cfg = spec.detector_config();
    let (total, _) = score_corpus(&scenes, &cfg);

    // Single rings drawn from the same ranges at the same noise level.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let singles: Vec<SceneSpec> = (0..1000)
        .map(|i| {
            let r = rng.random_range(spec.r_range.0..=spec.r_range.1);
            let side = 2 * (spec.r_range.1 as usize + 12);
            let m = r + 3.0;
            SceneSpec {
                width: side,
                height: side,
                rings: vec![RingSpec {
                    cx: rng.random_range(m..=side as f64 - m),
                    cy: rng.random_range(m..=side as f64 - m),
                    r,
                    amplitude: rng.random_range(spec.amplitude_range.0..=spec.amplitude_range.1),
                    ring_width: spec.ring_width,
                    inner_rings: spec.inner_rings,
                }],
                noise_sd: spec.noise_sd,
                seed: synth::frame_seed(78, i),
                background: spec.background,
            }
        })
        .collect();
    let (single, _) = score_corpus(&singles, &cfg);

    let shape_ok = (shape.mean_rings - 14.3).abs() < 0.5 && (shape.cluster_fraction - 0.677).abs() < 0.03;
    let pass = shape_ok
        && single.detection_rate >= 0.995
        && total.detection_rate >= 0.90
        && total.false_rate <= 0.02
        && total.cluster_detection_rate >= 0.90;
    outcome(
        pass,
        format!(
            "{:.2} rings/frame, {:.1}% clustered; isolated {:.2}%; detection {:.2}%, false {:.2}%, cluster {:.2}%",
            shape.mean_rings,
            100.0 * shape.cluster_fraction,
            100.0 * single.detection_rate,
            100.0 * total.detection_rate,
            100.0 * total.false_rate,
            100.0 * total.cluster_detection_rate
        ),
    )
}

// ---------------------------------------------------------------------------

fn normalization_constant() -> Outcome {
    let mut scores = Vec::new();
    for &(r, dx, dy) in &[(12.0, 0.0, 0.0), (20.0, 0.3, 0.6), (35.0, 0.5, 0.25), (50.0, 0.8, 0.1)] {
        let side = 2 * (r as usize + 20);
        let (cx, cy) = (side as f64 / 2.0 + dx, side as f64 / 2.0 + dy);
        let scene = SceneSpec {
            width: side,
            height: side,
            rings: vec![RingSpec { cx, cy, r, amplitude: 0.5, ring_width: 2.0, inner_rings: 0 }],
            noise_sd: 0.0,
            seed: 0,
            background: 0.0,
        };
        let cfg = DetectorConfig::new(2.5, 8, 55);
        let a = Detector::new(cfg).analyze(&render(&scene)).unwrap();
        let best = a.peaks.iter().map(|p| p.score).fold(0.0, f64::max);
        scores.push(best / TAU);
    }
    let pass = scores.iter().all(|s| (0.7..=1.3).contains(s));
    outcome(pass, format!("peak score / 2π for r = 12, 20, 35, 50: {scores:.3?}"))
}

// ---------------------------------------------------------------------------

/// Normalized value at one cell of every level.
struct CellProbe {
    cell: u32,
    values: Vec<(u32, f64, f64)>,
}

impl LevelObserver for CellProbe {
    fn level_complete(&mut self, level: &LevelView<'_>) {
        if level.hotspots.contains(&self.cell) {
            self.values.push((level.r, level.norm[self.cell as usize], level.sigma));
        }
    }
}

fn smoothing_width_law() -> Outcome {
    let cfg = HoughConfig::new(10, 120);
    let exact = hough::sigma_of_r(10.0, &cfg) == 0.75 && cfg.sigma_of_r(10.0) == 0.75;

    // Two equal hotspots 2 px apart on every level. The normalized value of
    // one is N·(1 + exp(−d²/2σ²))/r, which gives back the width used.
    let (w, h) = (256usize, 256usize);
    let codec = VoteCodec::new(&cfg, w, h);
    let n = 50;
    let d = 2.0;
    let mut votes = Vec::new();
    for r in cfg.r_lo()..=cfg.r_hi() {
        for _ in 0..n {
            votes.push(codec.encode(r, 128, 126));
            votes.push(codec.encode(r, 128, 128));
        }
    }
    sort_votes(&mut votes);
    let mut slab = AccumulatorSlab::new(w, h);
    let mut probe = CellProbe { cell: (128 * w + 126) as u32, values: Vec::new() };
    stream_levels_observed(&votes, &cfg, w, h, &mut slab, &mut probe).unwrap();

    let pts: Vec<(f64, f64)> = probe
        .values
        .iter()
        .map(|&(r, v, _)| {
            let ratio = v * r as f64 / n as f64 - 1.0;
            (r as f64, d / (2.0 * (1.0 / ratio).ln()).sqrt())
        })
        .collect();
    // Least-squares line through (r, σ).
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = sxy * sxy / (sxx * syy);
    let reported = probe.values.iter().all(|&(r, _, s)| s == cfg.sigma_of_r(r as f64));
    let pass = exact
        && reported
        && pts.len() == (cfg.r_hi() - cfg.r_lo() + 1) as usize
        && (slope - 0.05).abs() < 1e-6
        && (intercept - 0.25).abs() < 1e-4
        && r2 > 0.999_999;
    outcome(
        pass,
        format!(
            "sigma_of_r(10) = {}; measured width over r = {}..{}: slope {slope:.6}, intercept {intercept:.6}, R² {r2:.8}",
            cfg.sigma_of_r(10.0),
            cfg.r_lo(),
            cfg.r_hi()
        ),
    )
}

// ---------------------------------------------------------------------------

fn subpixel_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // Smoothing pulls the ridge inward by about σ²/2r, so noiseless input
    // gets the narrower scale.
    let mut cfg = DetectorConfig::new(1.5, 8, 55);
    cfg.curvature_threshold = -0.017;
    let mut det = Detector::new(cfg);
    let (mut worst_c, mut worst_r) = (0.0f64, 0.0f64);
    let mut misses = 0;
    for _ in 0..100 {
        let r = rng.random_range(10.0..50.0);
        let side = (2 * (r as usize + 12)).max(64);
        let m = r + 5.0;
        let ring = RingSpec {
            cx: rng.random_range(m..side as f64 - m),
            cy: rng.random_range(m..side as f64 - m),
            r,
            amplitude: 0.5,
            ring_width: 2.0,
            inner_rings: 2,
        };
        let scene = SceneSpec { width: side, height: side, rings: vec![ring], noise_sd: 0.0, seed: 0, background: 0.1 };
        let found = det.detect(&render(&scene)).unwrap();
        match found.iter().min_by(|a, b| {
            let da = (a.cx - ring.cx).hypot(a.cy - ring.cy) + (a.r - ring.r).abs();
            let db = (b.cx - ring.cx).hypot(b.cy - ring.cy) + (b.r - ring.r).abs();
            da.total_cmp(&db)
        }) {
            None => misses += 1,
            Some(d) => {
                worst_c = worst_c.max((d.cx - ring.cx).abs()).max((d.cy - ring.cy).abs());
                worst_r = worst_r.max((d.r - ring.r).abs());
            }
        }
    }
    outcome(
        misses == 0 && worst_c <= 0.2 && worst_r <= 0.2,
        format!("100 rings, {misses} missed, worst center error {worst_c:.4} px, worst radius error {worst_r:.4} px"),
    )
}

// ---------------------------------------------------------------------------

fn memory_footprint() -> Outcome {
    let (w, h) = (480usize, 460usize);
    let scene = SceneSpec {
        width: w,
        height: h,
        rings: vec![RingSpec::new(150.0, 200.0, 30.0), RingSpec::new(300.0, 250.0, 80.0)],
        noise_sd: 0.02,
        seed: 3,
        background: 0.1,
    };
    let img = render(&scene);
    let mut sizes = Vec::new();
    for span in [10u32, 50, 200] {
        let cfg = DetectorConfig::new(2.0, 5, 5 + span);
        let mut det = Detector::new(cfg.clone());
        det.detect(&img).unwrap();
        let oracle_cells = FullAccumulator::new(&cfg.hough, w, h).unwrap().cell_count();
        sizes.push((span, det.slab_cells(), det.slab_bytes(), oracle_cells));
    }
    let pass = sizes.iter().all(|s| s.1 == 6 * w * h && s.2 == sizes[0].2);
    outcome(
        pass,
        format!(
            "slab cells for r_max − r_min = 10, 50, 200: {:?} (6·H·W = {}); full array: {:?}",
            sizes.iter().map(|s| s.1).collect::<Vec<_>>(),
            6 * w * h,
            sizes.iter().map(|s| s.3).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------------------

fn large_corpus(frames: usize) -> (Vec<GrayImage>, DetectorConfig) {
    let mut spec = CorpusSpec::robustness(frames, 31);
    spec.width = 968;
    spec.height = 728;
    spec.mean_rings = 50.0;
    let cfg = spec.detector_config();
    let images = synth::generate_corpus(&spec).unwrap().iter().map(render).collect();
    (images, cfg)
}

fn throughput() -> Outcome {
    let (images, cfg) = large_corpus(20);
    let rep = batch::benchmark(&images, &cfg, &[1], 1).unwrap();
    let fps = rep.runs[0].fps;
    let oracle = rep.oracle.unwrap();
    let per_frame = rep.detections as f64 / rep.frames as f64;
    outcome(
        fps >= 2.0 && oracle.speedup >= 10.0 && oracle.identical,
        format!(
            "968×728, {per_frame:.1} detections/frame: {fps:.2} frames/s on one worker; oracle {:.2} s vs streamed {:.3} s per frame ({:.0}×)",
            oracle.oracle_seconds / oracle.frames as f64,
            oracle.streamed_seconds / oracle.frames as f64,
            oracle.speedup
        ),
    )
}

fn parallel_scaling() -> Outcome {
    let (images, cfg) = large_corpus(24);
    let rep = batch::benchmark(&images, &cfg, &[1, 4], 0).unwrap();
    let speedup = rep.runs[1].speedup;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "4 workers {:.2} frames/s vs 1 worker {:.2} frames/s ({speedup:.2}×), outputs bitwise identical: {}, {cpus} CPU(s) available",
        rep.runs[1].fps, rep.runs[0].fps, rep.identical
    );
    if cpus < 4 {
        // The speedup cannot be measured without four cores; the identity
        // half of the criterion still applies.
        if !rep.identical {
            return outcome(false, detail);
        }
        return Outcome { pass: false, blocked: true, detail: format!("{detail}; needs 4 CPUs for the speedup") };
    }
    outcome(rep.identical && speedup >= 3.0, detail)
}

// ---------------------------------------------------------------------------

fn calibration_round_trip() -> Outcome {
    // r = a·u² + b·u with u = dz − shift; the larger root is u = 0.
    let (a, b) = (0.012, 0.9);
    let shifts = [-2.5, -0.75, 0.0, 1.25, 3.1];
    let mut samples = Vec::new();
    for (id, &s) in shifts.iter().enumerate() {
        for k in 0..=40 {
            let u = 10.0 + 0.3 * k as f64;
            samples.push(CalibrationSample { tracer_id: id as u32, dz_um: u + s, r_px: a * u * u + b * u });
        }
    }
    let rep = calib::calibrate(&samples, 1.58).unwrap();
    let shift_err = shifts
        .iter()
        .enumerate()
        .map(|(id, s)| (rep.shifts[&(id as u32)] - s).abs())
        .fold(0.0, f64::max);
    let curve = rep.curve;
    let mut inv_err = 0.0f64;
    let mut scale_ok = true;
    let unscaled = CalibrationCurve { refractive_ratio: 1.0, ..curve };
    for k in 0..=200 {
        let r = curve.valid_r[0] + (curve.valid_r[1] - curve.valid_r[0]) * k as f64 / 200.0;
        let dz = curve.invert(r).unwrap();
        inv_err = inv_err.max((curve.radius_at(dz) - r).abs() / r.abs());
        let dz2 = 10.0 + 12.0 * k as f64 / 200.0;
        inv_err = inv_err.max((curve.invert(curve.radius_at(dz2)).unwrap() - dz2).abs() / dz2);
        scale_ok &= curve.radius_to_z(r).unwrap() == 1.58 * unscaled.radius_to_z(r).unwrap();
    }

    // Noise propagation: depth error of the fitted curve follows the
    // radius noise divided by the local slope.
    let sigma_r = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, sigma_r).unwrap();
    let pts: Vec<(f64, f64)> = (0..2000)
        .map(|_| {
            let u: f64 = rng.random_range(10.0..22.0);
            (u, a * u * u + b * u + noise.sample(&mut rng))
        })
        .collect();
    let noisy = calib::fit_joint(&pts, 1.0).unwrap();
    let predicted = sigma_r * (pts.iter().map(|p| (2.0 * a * p.0 + b).powi(-2)).sum::<f64>() / pts.len() as f64).sqrt();
    let mc_ok = (noisy.rmse_z / predicted - 1.0).abs() < 0.1;

    outcome(
        shift_err <= 1e-6 && inv_err <= 1e-9 && scale_ok && mc_ok,
        format!(
            "shift error {shift_err:.2e}, inversion error {inv_err:.2e} relative, 1.58 scaling exact: {scale_ok}; \
             noisy rmse {:.4} µm vs propagated {predicted:.4} µm",
            noisy.rmse_z
        ),
    )
}

// ---------------------------------------------------------------------------

/// 3D particles with constant accelerations; `crossings` pairs are forced to
/// pass within 0.3 µm of each other at a random frame.
fn particle_paths(particles: usize, frames: usize, crossings: usize, seed: u64) -> Vec<Vec<[f64; 3]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kin: Vec<[[f64; 3]; 3]> = (0..particles)
        .map(|_| {
            let p0 = [0; 3].map(|_| rng.random_range(0.0..150.0));
            let v = [0; 3].map(|_| rng.random_range(-0.5..0.5));
            let a = [0; 3].map(|_| rng.random_range(-0.005..0.005));
            [p0, v, a]
        })
        .collect();
    let at = |k: &[[f64; 3]; 3], t: f64| [0, 1, 2].map(|i| k[0][i] + k[1][i] * t + 0.5 * k[2][i] * t * t);
    for c in 0..crossings {
        let (i, j) = (2 * c, 2 * c + 1);
        let tc = rng.random_range(20..frames - 20) as f64;
        let meet = at(&kin[i], tc);
        let offset = [0.3, 0.0, 0.0];
        let kj = kin[j];
        kin[j][0] = [0, 1, 2].map(|d| meet[d] + offset[d] - kj[1][d] * tc - 0.5 * kj[2][d] * tc * tc);
    }
    (0..frames).map(|f| kin.iter().map(|k| at(k, f as f64)).collect()).collect()
}

fn linking() -> Outcome {
    let (particles, frames) = (50, 200);
    let truth = particle_paths(particles, frames, 10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = Normal::new(0.0, 0.01).unwrap();
    // Observations with identities, 5% dropout.
    let mut obs: Vec<Vec<([f64; 3], usize)>> = Vec::with_capacity(frames);
    let mut runs = vec![1usize; particles];
    let mut long_gaps = 0;
    let mut last_seen = vec![None::<usize>; particles];
    for (f, ps) in truth.iter().enumerate() {
        let mut row = Vec::new();
        for (id, p) in ps.iter().enumerate() {
            if rng.random::<f64>() < 0.05 {
                continue;
            }
            if let Some(l) = last_seen[id] {
                if f - l > 1 {
                    runs[id] += 1;
                    if f - l - 1 > 3 {
                        long_gaps += 1;
                    }
                }
            }
            last_seen[id] = Some(f);
            row.push((p.map(|x| x + noise.sample(&mut rng)), id));
        }
        obs.push(row);
    }
    let positions: Vec<Vec<[f64; 3]>> = obs.iter().map(|r| r.iter().map(|o| o.0).collect()).collect();
    let owner = |f: usize, p: &[f64; 3]| obs[f].iter().find(|o| &o.0 == p).map(|o| o.1).unwrap();

    let mut cfg = LinkConfig::new(2.5);
    cfg.min_length = 1;
    let res = link_frames(&positions, &cfg).unwrap();
    let (mut links, mut correct) = (0usize, 0usize);
    for t in &res.trajectories {
        for pair in t.samples.windows(2) {
            links += 1;
            correct += usize::from(owner(pair[0].frame, &pair[0].pos) == owner(pair[1].frame, &pair[1].pos));
        }
    }
    let rate = correct as f64 / links as f64;
    let unsplit = res.trajectories.len() == particles + long_gaps;

    cfg.memory = 0;
    let zero = link_frames(&positions, &cfg).unwrap();
    let expected_zero: usize = runs.iter().sum();
    let zero_ok = zero.trajectories.len() == expected_zero;

    // Closest approach of the forced crossings, for the record.
    let closest = (0..10)
        .map(|c| {
            truth
                .iter()
                .map(|ps| {
                    let (p, q) = (ps[2 * c], ps[2 * c + 1]);
                    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    outcome(
        rate >= 0.99 && unsplit && zero_ok,
        format!(
            "{links} links, {:.2}% correct; {} trajectories for {particles} particles ({long_gaps} gaps over memory); \
             memory 0: {} trajectories, {expected_zero} runs; crossings closer than {closest:.2} µm",
            100.0 * rate,
            res.trajectories.len(),
            zero.trajectories.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn spline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    let mut bc = 0.0f64;
    for (k, &sd) in [0.01, 0.05, 0.2, 1.0].iter().enumerate() {
        let noise = Normal::new(0.0, sd).unwrap();
        let t: Vec<f64> = (0..1000).map(|i| i as f64 * 0.01).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|&x| 3.0 * (0.7 * x + k as f64).sin() + 0.2 * x * x + noise.sample(&mut rng))
            .collect();
        let fit = fit_smoothing_spline(&t, &y, Lambda::Auto).unwrap();
        worst = worst.max((fit.sigma_est / sd - 1.0).abs());
        bc = bc.max(fit.second_derivative(t[0]).abs()).max(fit.second_derivative(t[999]).abs());
    }

    // A cubic is in the null space of the penalty only up to the natural
    // end conditions; away from the ends it is reproduced exactly.
    let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.05 + 0.01 * ((i * 7) % 3) as f64).collect();
    let cubic = |x: f64| 0.5 - x + 0.3 * x * x - 0.02 * x * x * x;
    let y: Vec<f64> = t.iter().map(|&x| cubic(x)).collect();
    let fit = fit_smoothing_spline(&t, &y, Lambda::Fixed(0.0)).unwrap();
    let knot_err = t.iter().zip(&y).map(|(&x, v)| (fit.value(x) - v).abs()).fold(0.0, f64::max);
    let mut deriv_err = 0.0f64;
    for &x in &t[25..175] {
        deriv_err = deriv_err
            .max((fit.derivative(x) - (-1.0 + 0.6 * x - 0.06 * x * x)).abs())
            .max((fit.second_derivative(x) - (0.6 - 0.12 * x)).abs());
    }
    outcome(
        worst <= 0.2 && bc <= 1e-9 && knot_err <= 1e-9 && deriv_err <= 1e-6,
        format!(
            "noise estimate within {:.1}% on 1000 points; end f'' {bc:.1e}; cubic: knot error {knot_err:.1e}, interior derivative error {deriv_err:.1e}",
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------------------

fn error_propagation() -> Outcome {
    let spec = flow::FlowSpec::new(300, 6, 11);
    let curve = flow::flow_curve();
    let corpus = flow::generate_flow(&spec, &curve).unwrap();
    let images: Vec<GrayImage> = corpus.scenes.iter().map(render).collect();
    let out = batch::detect_images(&images, &spec.detector_config(&curve), 1).unwrap();
    let mut positions = vec![Vec::new(); images.len()];
    for f in &out.frames {
        positions[f.frame] = calib::localize(&f.detections, &curve, spec.pixel_size_um).0;
    }
    let link = link_frames(&positions, &LinkConfig::new(1.0)).unwrap();
    let mut acc = [0.0; 3];
    for t in &link.trajectories {
        let s = smooth(t, Lambda::Auto, 1.0 / 70.0).unwrap();
        for (a, v) in acc.iter_mut().zip(s.sigma_est()) {
            *a += v * v;
        }
    }
    let n = link.trajectories.len().max(1) as f64;
    let sigma = acc.map(|a| (a / n).sqrt());
    let lateral = ((sigma[0] * sigma[0] + sigma[1] * sigma[1]) / 2.0).sqrt();
    let measured = sigma[2] / lateral;

    // Circle fits have radius error 1/√2 of the center error; depth error
    // is radius error over the local slope, times the refractive ratio.
    let inv_slope_sq: f64 = corpus
        .positions
        .iter()
        .flatten()
        .map(|p| curve.slope_at(p[2] / curve.refractive_ratio).powi(-2))
        .sum::<f64>()
        / corpus.positions.iter().map(Vec::len).sum::<usize>() as f64;
    let predicted = curve.refractive_ratio * inv_slope_sq.sqrt() / (SQRT_2 * spec.pixel_size_um);
    let factor = measured / predicted;
    outcome(
        link.trajectories.len() == spec.particles && (0.5..=2.0).contains(&factor),
        format!(
            "{} trajectories; σ x {:.4} y {:.4} z {:.4} µm; axial/lateral {measured:.2} vs predicted {predicted:.2} (factor {factor:.2})",
            link.trajectories.len(),
            sigma[0],
            sigma[1],
            sigma[2]
        ),
    )
}
