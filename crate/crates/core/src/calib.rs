//! Ring radius to axial distance.
//!
//! Each tracer's radius-versus-stage-position sweep is fitted with a
//! quadratic and shifted so that its larger real root sits at zero. The
//! pooled, aligned samples are fitted again and the monotonic branch of that
//! quadratic is inverted. Stage distances become physical distances after
//! multiplication by the refractive index ratio.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::RingDetection;

/// Default ratio of refractive indices applied to stage displacements.
pub const DEFAULT_REFRACTIVE_RATIO: f64 = 1.58;
/// Margin added on both sides of the observed radius range, px.
pub const VALID_R_MARGIN_PX: f64 = 2.0;

/// `r(dz) = a·dz² + b·dz + c` and its inverse on one monotonic branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub refractive_ratio: f64,
    pub valid_r: [f64; 2],
    pub rmse_z: f64,
    /// Stage-distance range of the fitted data.
    #[serde(default)]
    pub dz_range: [f64; 2],
}

/// One calibration measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub tracer_id: u32,
    pub dz_um: f64,
    pub r_px: f64,
}

/// Least-squares quadratic `[a, b, c]`.
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<[f64; 3]> {
    if points.len() < 3 {
        return Err(Error::Calibration(format!(
            "quadratic fit needs at least 3 samples, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let scale = points.iter().map(|p| (p.0 - mean).abs()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Calibration("degenerate dz range".into()));
    }
    // Fit in centered, scaled coordinates u = (x - mean) / scale.
    let design = DMatrix::from_fn(points.len(), 3, |i, j| {
        let u = (points[i].0 - mean) / scale;
        u.powi(2 - j as i32)
    });
    let rhs = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-10 * smax) {
        return Err(Error::Calibration("degenerate quadratic fit: fewer than 3 distinct dz values".into()));
    }
    let p = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Calibration(format!("quadratic fit failed: {e}")))?;
    let (pa, pb, pc) = (p[0] / (scale * scale), p[1] / scale, p[2]);
    // Expand a·(x-m)² + b·(x-m) + c.
    Ok([pa, pb - 2.0 * pa * mean, pa * mean * mean - pb * mean + pc])
}

/// Real roots of `a·x² + b·x + c`, ascending. Linear when `a` is zero.
fn real_roots([a, b, c]: [f64; 3]) -> Option<Vec<f64>> {
    if a == 0.0 {
        return if b == 0.0 { None } else { Some(vec![-c / b]) };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = if q == 0.0 {
        vec![0.0, 0.0]
    } else {
        vec![q / a, c / q]
    };
    roots.sort_by(f64::total_cmp);
    Some(roots)
}

/// Shift of a tracer's sweep: the larger real root of its quadratic fit.
pub fn tracer_shift(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(Error::Calibration(format!(
            "tracer alignment needs at least 4 samples, got {}",
            samples.len()
        )));
    }
    let coef = fit_quadratic(samples)?;
    let roots = real_roots(coef).ok_or_else(|| {
        Error::Calibration(format!("tracer fit {coef:?} has no real root"))
    })?;
    Ok(*roots.last().unwrap())
}

/// Subtract the tracer's larger root from every stage position.
pub fn align_tracer(samples: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let s = tracer_shift(samples)?;
    Ok(samples.iter().map(|&(dz, r)| (dz - s, r)).collect())
}

impl CalibrationCurve {
    /// Curve with known coefficients over the stage range `dz_range`.
    /// `valid_r` spans the radii reached on that range plus the usual
    /// margin.
    pub fn from_coefficients(a: f64, b: f64, c: f64, refractive_ratio: f64, dz_range: [f64; 2]) -> Result<Self> {
        let mut curve = Self { a, b, c, refractive_ratio, valid_r: [0.0; 2], rmse_z: 0.0, dz_range };
        if !(dz_range[0] < dz_range[1]) || !(refractive_ratio > 0.0) {
            return Err(Error::Calibration(format!("invalid stage range {dz_range:?} or ratio {refractive_ratio}")));
        }
        if let Some(v) = curve.vertex() {
            if v > dz_range[0] && v < dz_range[1] {
                return Err(Error::Calibration(format!("curve turns at dz = {v} inside {dz_range:?}")));
            }
        }
        let (r0, r1) = (curve.radius_at(dz_range[0]), curve.radius_at(dz_range[1]));
        curve.valid_r = [r0.min(r1) - VALID_R_MARGIN_PX, r0.max(r1) + VALID_R_MARGIN_PX];
        Ok(curve)
    }

    pub fn radius_at(&self, dz: f64) -> f64 {
        (self.a * dz + self.b) * dz + self.c
    }

    pub fn slope_at(&self, dz: f64) -> f64 {
        2.0 * self.a * dz + self.b
    }

    fn vertex(&self) -> Option<f64> {
        (self.a != 0.0).then(|| -self.b / (2.0 * self.a))
    }

    /// Whether the data lie on the branch right of the vertex.
    fn right_branch(&self) -> bool {
        match self.vertex() {
            Some(v) => self.dz_range[0] >= v,
            None => true,
        }
    }

    /// Stage distance for radius `r`, without refractive scaling.
    pub fn invert(&self, r: f64) -> Result<f64> {
        let [lo, hi] = self.valid_r;
        if !(r >= lo && r <= hi) {
            return Err(Error::Range { value: r, lo, hi });
        }
        self.invert_unchecked(r)
    }

    fn invert_unchecked(&self, r: f64) -> Result<f64> {
        let coef = [self.a, self.b, self.c - r];
        let roots = real_roots(coef).ok_or_else(|| {
            Error::Calibration(format!("radius {r} is beyond the curve's extremum"))
        })?;
        Ok(if roots.len() == 1 || self.right_branch() {
            *roots.last().unwrap()
        } else {
            roots[0]
        })
    }

    /// Physical axial distance for radius `r`.
    pub fn radius_to_z(&self, r: f64) -> Result<f64> {
        Ok(self.invert(r)? * self.refractive_ratio)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Calibration(format!("bad calibration JSON: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Physical positions `[x, y, z]`, µm, of ring detections. Detections
/// whose radius falls outside the curve's valid range are dropped; the
/// second value counts them.
pub fn localize(detections: &[RingDetection], curve: &CalibrationCurve, pixel_size_um: f64) -> (Vec<[f64; 3]>, usize) {
    let mut out = Vec::with_capacity(detections.len());
    let mut dropped = 0;
    for d in detections {
        match curve.radius_to_z(d.r) {
            Ok(z) => out.push([d.cx * pixel_size_um, d.cy * pixel_size_um, z]),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

/// Quadratic through pooled aligned samples.
pub fn fit_joint(samples: &[(f64, f64)], refractive_ratio: f64) -> Result<CalibrationCurve> {
    if samples.len() < 10 {
        return Err(Error::Calibration(format!(
            "joint fit needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    if !(refractive_ratio > 0.0) {
        return Err(Error::Calibration("refractive ratio must be positive".into()));
    }
    let [a, b, c] = fit_quadratic(samples)?;
    let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
        samples.iter().map(pick).fold(init, f)
    };
    let dz_range = [fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0)];
    let r_range = [fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1)];
    let mut curve = CalibrationCurve {
        a,
        b,
        c,
        refractive_ratio,
        valid_r: [r_range[0] - VALID_R_MARGIN_PX, r_range[1] + VALID_R_MARGIN_PX],
        rmse_z: 0.0,
        dz_range,
    };
    if let Some(v) = curve.vertex() {
        if v > dz_range[0] && v < dz_range[1] {
            return Err(Error::Calibration(format!(
                "fitted curve turns at dz = {v} inside the data range {dz_range:?}"
            )));
        }
    }
    if b == 0.0 && a == 0.0 {
        return Err(Error::Calibration("fitted curve is constant".into()));
    }
    let mut sq = 0.0;
    for &(dz, r) in samples {
        let e = dz - curve.invert_unchecked(r)?;
        sq += e * e;
    }
    curve.rmse_z = (sq / samples.len() as f64).sqrt();
    Ok(curve)
}

/// Result of the full calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub curve: CalibrationCurve,
    /// Applied shift per tracer.
    pub shifts: BTreeMap<u32, f64>,
    /// Tracers left out, with the reason.
    pub excluded: BTreeMap<u32, String>,
}

/// Align every tracer, pool and fit.
pub fn calibrate(samples: &[CalibrationSample], refractive_ratio: f64) -> Result<CalibrationReport> {
    let mut by_tracer: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
    for s in samples {
        by_tracer.entry(s.tracer_id).or_default().push((s.dz_um, s.r_px));
    }
    let mut pool = Vec::new();
    let mut shifts = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    for (id, pts) in by_tracer {
        match tracer_shift(&pts) {
            Ok(s) => {
                shifts.insert(id, s);
                pool.extend(pts.iter().map(|&(dz, r)| (dz - s, r)));
            }
            Err(e) => {
                log::warn!("tracer {id} excluded: {e}");
                excluded.insert(id, e.to_string());
            }
        }
    }
    let curve = fit_joint(&pool, refractive_ratio)?;
    Ok(CalibrationReport { curve, shifts, excluded })
}

/// Parse `tracer_id,dz_um,r_px` CSV.
pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<CalibrationSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let s: CalibrationSample =
            rec.map_err(|e| Error::Input(format!("calibration CSV row {}: {e}", i + 2)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_samples_csv<W: Write>(samples: &[CalibrationSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s).map_err(|e| Error::Input(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sweep(shift: f64, a: f64, b: f64, dz: impl Iterator<Item = f64>) -> Vec<(f64, f64)> {
        dz.map(|z| {
            let u = z - shift;
            (z, b * u + a * u * u)
        })
        .collect()
    }

    #[test]
    fn shift_recovered_from_exact_quadratic() {
        let pts = sweep(5.0, 0.01, 0.6, (0..30).map(|i| 5.0 + i as f64 * 2.0));
        let s = tracer_shift(&pts).unwrap();
        assert!((s - 5.0).abs() < 1e-6, "{s}");
        let aligned = align_tracer(&pts).unwrap();
        assert!(aligned[0].0.abs() < 1e-6 && aligned[0].1.abs() < 1e-12);
    }

    #[test]
    fn aligned_input_is_unchanged() {
        let pts = sweep(0.0, 0.01, 0.6, (0..20).map(|i| i as f64 * 3.0));
        for ((z0, r0), (z1, r1)) in pts.iter().zip(align_tracer(&pts).unwrap()) {
            assert!((z0 - z1).abs() < 1e-9);
            assert_eq!(*r0, r1);
        }
    }

    #[test]
    fn alignment_is_shift_equivariant() {
        let pts = sweep(3.0, 0.008, 0.7, (0..25).map(|i| 4.0 + i as f64 * 2.5));
        let moved: Vec<_> = pts.iter().map(|&(z, r)| (z + 17.25, r)).collect();
        for (p, q) in align_tracer(&pts).unwrap().iter().zip(align_tracer(&moved).unwrap()) {
            assert!((p.0 - q.0).abs() < 1e-8);
        }
    }

    #[test]
    fn complex_roots_and_short_sweeps_fail() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 10.0 + (i as f64 - 5.0).powi(2))).collect();
        assert!(matches!(tracer_shift(&pts), Err(Error::Calibration(_))));
        assert!(tracer_shift(&pts[..3]).is_err());
        let flat: Vec<_> = (0..10).map(|_| (2.0, 1.0)).collect();
        assert!(tracer_shift(&flat).is_err());
    }

    #[test]
    fn tracers_collapse_after_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let (a, b) = (0.004, 0.5);
        let mut aligned_all = Vec::new();
        for _ in 0..25 {
            let shift = rng.random_range(-20.0..20.0);
            let pts: Vec<_> = (0..40)
                .map(|i| {
                    let z = shift + 1.0 + i as f64 * 1.5;
                    let u = z - shift;
                    (z, b * u + a * u * u + noise.sample(&mut rng))
                })
                .collect();
            aligned_all.push(align_tracer(&pts).unwrap());
        }
        // Spread of the aligned per-tracer fits over a common grid: the
        // RMS over the grid of the across-tracer standard deviation.
        let fits: Vec<[f64; 3]> = aligned_all.iter().map(|t| fit_quadratic(t).unwrap()).collect();
        let eval = |c: &[f64; 3], z: f64| (c[0] * z + c[1]) * z + c[2];
        let grid: Vec<f64> = (0..=50).map(|k| 1.0 + k as f64 * 1.1).collect();
        let mut acc = 0.0;
        for &z in &grid {
            let v: Vec<f64> = fits.iter().map(|c| eval(c, z)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            acc += v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        }
        let spread = (acc / grid.len() as f64).sqrt();
        assert!(spread <= 0.1, "spread {spread}");
    }

    fn exact_curve() -> CalibrationCurve {
        let pool = sweep(0.0, 0.004, 0.5, (0..60).map(|i| i as f64));
        fit_joint(&pool, DEFAULT_REFRACTIVE_RATIO).unwrap()
    }

    #[test]
    fn noiseless_pool_fits_exactly() {
        let c = exact_curve();
        assert!(c.rmse_z <= 1e-6);
        assert!((c.a - 0.004).abs() < 1e-10 && (c.b - 0.5).abs() < 1e-10 && c.c.abs() < 1e-9);
        assert_eq!(c.valid_r, [-2.0, 0.5 * 59.0 + 0.004 * 59.0 * 59.0 + 2.0]);
    }

    #[test]
    fn refractive_scaling_is_exact() {
        let c = exact_curve();
        let z = c.radius_to_z(c.radius_at(10.0)).unwrap();
        assert!((z - 15.8).abs() < 1e-9, "{z}");
        assert!(c.radius_to_z(c.c).unwrap().abs() < 1e-9);
    }

    #[test]
    fn round_trip_on_random_distances() {
        let c = exact_curve();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dz = rng.random_range(0.5..59.0);
            let back = c.radius_to_z(c.radius_at(dz)).unwrap() / c.refractive_ratio;
            assert!(((back - dz) / dz).abs() <= 1e-9, "{dz} -> {back}");
        }
    }

    #[test]
    fn decreasing_branch_inverts() {
        // Data left of the vertex on an upward parabola: r decreases with dz.
        let pool: Vec<_> = (0..30).map(|i| {
            let z = -40.0 + i as f64;
            (z, 0.01 * z * z + 0.1 * z + 5.0)
        }).collect();
        let c = fit_joint(&pool, 1.0).unwrap();
        for &(z, r) in &pool {
            assert!((c.invert(r).unwrap() - z).abs() < 1e-8);
        }
    }

    #[test]
    fn inversion_is_monotonic() {
        let c = exact_curve();
        let mut prev = f64::NEG_INFINITY;
        let n = 500;
        for i in 0..=n {
            let r = c.valid_r[0] + (c.valid_r[1] - c.valid_r[0]) * i as f64 / n as f64;
            let z = c.radius_to_z(r).unwrap();
            assert!(z > prev);
            prev = z;
        }
    }

    #[test]
    fn out_of_range_radius_is_range_error() {
        let c = exact_curve();
        assert!(matches!(c.radius_to_z(c.valid_r[1] + 0.01), Err(Error::Range { .. })));
        assert!(matches!(c.radius_to_z(f64::NAN), Err(Error::Range { .. })));
    }

    #[test]
    fn vertex_inside_data_is_rejected() {
        let pool: Vec<_> = (0..30).map(|i| {
            let z = i as f64 - 15.0;
            (z, 0.05 * z * z + 3.0)
        }).collect();
        assert!(matches!(fit_joint(&pool, 1.0), Err(Error::Calibration(_))));
        assert!(fit_joint(&pool[..9], 1.0).is_err());
    }

    #[test]
    fn noisy_pool_rmse_matches_propagated_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sd = 0.1;
        let noise = Normal::new(0.0, sd).unwrap();
        let (a, b) = (0.004, 0.5);
        let pool: Vec<_> = (0..2000)
            .map(|_| {
                let z: f64 = rng.random_range(0.0..60.0);
                (z, b * z + a * z * z + noise.sample(&mut rng))
            })
            .collect();
        let c = fit_joint(&pool, 1.0).unwrap();
        let predicted = (pool.iter().map(|&(z, _)| (sd / (2.0 * a * z + b)).powi(2)).sum::<f64>()
            / pool.len() as f64)
            .sqrt();
        let ratio = c.rmse_z / predicted;
        assert!((0.5..=2.0).contains(&ratio), "{} vs {predicted}", c.rmse_z);
    }

    #[test]
    fn calibrate_excludes_bad_tracers() {
        let mut samples = Vec::new();
        for t in 0..5u32 {
            for i in 0..20 {
                let z = t as f64 * 3.0 + i as f64 * 2.0;
                let u = z - t as f64 * 3.0;
                samples.push(CalibrationSample { tracer_id: t, dz_um: z, r_px: 0.5 * u + 0.004 * u * u });
            }
        }
        for i in 0..6 {
            samples.push(CalibrationSample { tracer_id: 9, dz_um: i as f64, r_px: 10.0 + (i as f64 - 3.0).powi(2) });
        }
        let rep = calibrate(&samples, DEFAULT_REFRACTIVE_RATIO).unwrap();
        assert_eq!(rep.shifts.len(), 5);
        assert!(rep.excluded.contains_key(&9));
        for (t, s) in &rep.shifts {
            assert!((s - *t as f64 * 3.0).abs() < 1e-6);
        }
        assert!(rep.curve.rmse_z < 1e-6);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let samples = vec![CalibrationSample { tracer_id: 2, dz_um: 1.5, r_px: 7.25 }];
        let mut buf = Vec::new();
        write_samples_csv(&samples, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("tracer_id,dz_um,r_px\n"));
        assert_eq!(read_samples_csv(&buf[..]).unwrap(), samples);
        let c = exact_curve();
        assert_eq!(CalibrationCurve::from_json(&c.to_json()).unwrap(), c);
        assert!(read_samples_csv("tracer_id,dz_um,r_px\n1,x,2\n".as_bytes()).is_err());
    }
}
