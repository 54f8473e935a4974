//! Particles moving smoothly in 3D, rendered as defocus ring sequences.
//!
//! Each coordinate oscillates sinusoidally about a random center, so the
//! motion is smooth and stays inside the frame and the calibrated axial
//! range by construction. Ring radius follows the calibration curve at the
//! particle's axial position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{frame_seed, RingSpec, SceneSpec};
use crate::calib::{CalibrationCurve, CalibrationSample, DEFAULT_REFRACTIVE_RATIO};
use crate::error::{Error, Result};
use crate::pipeline::DetectorConfig;

/// Parameters of a synthetic 3D flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub particles: usize,
    pub pixel_size_um: f64,
    /// Peak lateral excursion about the particle's center, px.
    pub lateral_amplitude_px: f64,
    /// Peak axial excursion, physical µm.
    pub axial_amplitude_um: f64,
    /// Oscillation periods are drawn uniformly from this range, frames.
    pub period_frames: (f64, f64),
    pub amplitude: f64,
    pub ring_width: f64,
    pub inner_rings: u32,
    pub noise_sd: f64,
    pub background: f64,
    pub seed: u64,
}

impl FlowSpec {
    pub fn new(frames: usize, particles: usize, seed: u64) -> Self {
        Self {
            frames,
            width: 320,
            height: 320,
            particles,
            pixel_size_um: 0.1,
            lateral_amplitude_px: 12.0,
            axial_amplitude_um: 4.0,
            period_frames: (80.0, 160.0),
            amplitude: 0.5,
            ring_width: 2.0,
            inner_rings: 2,
            noise_sd: 0.05,
            background: 0.1,
            seed,
        }
    }

    /// Detector settings matched to the rendered rings and the radii the
    /// curve can produce.
    pub fn detector_config(&self, curve: &CalibrationCurve) -> DetectorConfig {
        let (r_lo, r_hi) = radius_span(curve);
        let mut cfg = DetectorConfig::new(
            1.25 * self.ring_width,
            (r_lo.floor() as u32).saturating_sub(2).max(1),
            r_hi.ceil() as u32 + 3,
        );
        cfg.curvature_threshold = -0.034 * self.amplitude;
        cfg.hough.vote_threshold_norm = 0.3;
        cfg
    }
}

/// Default radius curve `r = 0.01·dz² + 0.8·dz` px over stage positions
/// 12–22 µm, larger root at zero.
pub fn flow_curve() -> CalibrationCurve {
    CalibrationCurve::from_coefficients(0.01, 0.8, 0.0, DEFAULT_REFRACTIVE_RATIO, [12.0, 22.0])
        .expect("default curve is monotonic on its range")
}

fn radius_span(curve: &CalibrationCurve) -> (f64, f64) {
    let (r0, r1) = (curve.radius_at(curve.dz_range[0]), curve.radius_at(curve.dz_range[1]));
    (r0.min(r1), r0.max(r1))
}

/// Rendered frames plus the true physical position of every particle in
/// every frame, µm, in particle order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCorpus {
    pub scenes: Vec<SceneSpec>,
    pub positions: Vec<Vec<[f64; 3]>>,
}

struct Oscillator {
    center: f64,
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Oscillator {
    fn at(&self, t: f64) -> f64 {
        self.center + self.amplitude * (self.omega * t + self.phase).sin()
    }
}

/// Generate a flow whose ring radii follow `curve`.
pub fn generate_flow(spec: &FlowSpec, curve: &CalibrationCurve) -> Result<FlowCorpus> {
    if !(spec.pixel_size_um > 0.0) || !(spec.period_frames.0 > 0.0 && spec.period_frames.0 <= spec.period_frames.1) {
        return Err(Error::Scene("pixel size and periods must be positive".into()));
    }
    let ratio = curve.refractive_ratio;
    let z_lo = curve.dz_range[0] * ratio + spec.axial_amplitude_um;
    let z_hi = curve.dz_range[1] * ratio - spec.axial_amplitude_um;
    if !(z_lo <= z_hi) {
        return Err(Error::Scene("axial excursion exceeds the calibrated range".into()));
    }
    let (_, r_max) = radius_span(curve);
    let reach = r_max + 3.0 + spec.lateral_amplitude_px;
    let (w, h) = (spec.width as f64, spec.height as f64);
    if 2.0 * reach >= w.min(h) {
        return Err(Error::Scene("frame too small for the lateral excursion".into()));
    }
    // Oscillation centers far enough apart that rings never touch.
    let min_sep = 2.0 * reach - 2.0 * 3.0;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut particles: Vec<[Oscillator; 3]> = Vec::with_capacity(spec.particles);
    let mut attempts = 0;
    while particles.len() < spec.particles {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Scene(format!(
                "cannot place {} separated particles in {}x{}",
                spec.particles, spec.width, spec.height
            )));
        }
        let cx = rng.random_range(reach..w - reach);
        let cy = rng.random_range(reach..h - reach);
        if particles.iter().any(|p| (p[0].center - cx).hypot(p[1].center - cy) < min_sep) {
            continue;
        }
        let mut osc = |center: f64, amplitude: f64| Oscillator {
            center,
            amplitude,
            omega: std::f64::consts::TAU / rng.random_range(spec.period_frames.0..=spec.period_frames.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        let x = osc(cx, spec.lateral_amplitude_px);
        let y = osc(cy, spec.lateral_amplitude_px);
        let z = osc(z_lo, spec.axial_amplitude_um);
        particles.push([x, y, z]);
    }
    // Axial centers come from their own stream so rejected placements do
    // not shift them.
    let mut zrng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5A5A_5A5A);
    for p in &mut particles {
        p[2].center = zrng.random_range(z_lo..=z_hi);
    }

    let mut scenes = Vec::with_capacity(spec.frames);
    let mut positions = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let t = f as f64;
        let mut rings = Vec::with_capacity(particles.len());
        let mut pos = Vec::with_capacity(particles.len());
        for p in &particles {
            let (xp, yp, z) = (p[0].at(t), p[1].at(t), p[2].at(t));
            rings.push(RingSpec {
                cx: xp,
                cy: yp,
                r: curve.radius_at(z / ratio),
                amplitude: spec.amplitude,
                ring_width: spec.ring_width,
                inner_rings: spec.inner_rings,
            });
            pos.push([xp * spec.pixel_size_um, yp * spec.pixel_size_um, z]);
        }
        let scene = SceneSpec {
            width: spec.width,
            height: spec.height,
            rings,
            noise_sd: spec.noise_sd,
            seed: frame_seed(spec.seed, f),
            background: spec.background,
        };
        scene.validate()?;
        scenes.push(scene);
        positions.push(pos);
    }
    Ok(FlowCorpus { scenes, positions })
}

/// Stage sweeps of `tracers` tracers, each with an unknown stage offset in
/// ±3 µm, sampled every `step_um` over the curve's stage range with
/// Gaussian radius noise.
pub fn calibration_sweeps(
    curve: &CalibrationCurve,
    tracers: u32,
    step_um: f64,
    noise_px: f64,
    seed: u64,
) -> Result<Vec<CalibrationSample>> {
    if !(step_um > 0.0) || !(noise_px >= 0.0) {
        return Err(Error::Scene("sweep step must be positive and noise non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_px).map_err(|e| Error::Scene(e.to_string()))?;
    let mut out = Vec::new();
    let n = ((curve.dz_range[1] - curve.dz_range[0]) / step_um).floor() as usize;
    for id in 0..tracers {
        let offset = rng.random_range(-3.0..=3.0);
        for k in 0..=n {
            let dz = curve.dz_range[0] + k as f64 * step_um;
            out.push(CalibrationSample {
                tracer_id: id,
                dz_um: dz + offset,
                r_px: curve.radius_at(dz) + noise.sample(&mut rng),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::calibrate;
    use crate::synth::cluster_membership;

    #[test]
    fn flow_is_deterministic_and_in_range() {
        let spec = FlowSpec::new(50, 6, 3);
        let curve = flow_curve();
        let a = generate_flow(&spec, &curve).unwrap();
        let b = generate_flow(&spec, &curve).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.positions.len(), 50);
        for (scene, pos) in a.scenes.iter().zip(&a.positions) {
            assert_eq!(scene.rings.len(), 6);
            assert!(cluster_membership(&scene.truth()).iter().all(|&c| !c));
            for (ring, p) in scene.rings.iter().zip(pos) {
                let z = curve.radius_to_z(ring.r).unwrap();
                assert!((z - p[2]).abs() < 1e-9, "{z} vs {}", p[2]);
                assert!((ring.cx * spec.pixel_size_um - p[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn motion_is_smooth() {
        let spec = FlowSpec::new(200, 4, 9);
        let flow = generate_flow(&spec, &flow_curve()).unwrap();
        let max_step_px = spec.lateral_amplitude_px * std::f64::consts::TAU / spec.period_frames.0;
        for f in 1..flow.positions.len() {
            for (p, q) in flow.positions[f].iter().zip(&flow.positions[f - 1]) {
                let step = (p[0] - q[0]).hypot(p[1] - q[1]) / spec.pixel_size_um;
                assert!(step <= max_step_px * 2f64.sqrt() + 1e-9);
            }
        }
    }

    #[test]
    fn sweeps_recover_the_curve() {
        let curve = flow_curve();
        let samples = calibration_sweeps(&curve, 5, 0.5, 0.0, 1).unwrap();
        let fit = calibrate(&samples, curve.refractive_ratio).unwrap().curve;
        assert!((fit.a - curve.a).abs() < 1e-9 && (fit.b - curve.b).abs() < 1e-8 && fit.c.abs() < 1e-7);
    }

    #[test]
    fn crowded_flow_is_rejected() {
        let spec = FlowSpec::new(5, 200, 1);
        assert!(generate_flow(&spec, &flow_curve()).is_err());
    }
}
