//! Sub-pixel refinement: each Hough peak selects the ridge pixels inside an
//! annulus around its circle and those are fitted with an algebraic (Kåsa)
//! least-squares circle. Classification is non-exclusive.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::hough::{HoughConfig, PeakCandidate};
use crate::ridges::DirectedRidge;

/// Sub-pixel ring estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingDetection {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub score: f64,
    pub inliers: usize,
    pub rms_residual: f64,
}

/// How wide the classification annulus is around a peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AnnulusWidth {
    /// `max(2, ceil(2σ(r)))` with σ from the Hough configuration.
    Auto,
    Fixed(f64),
}

impl AnnulusWidth {
    pub fn halfwidth(&self, r: u32, cfg: &HoughConfig) -> f64 {
        match *self {
            AnnulusWidth::Auto => (2.0 * cfg.sigma_of_r(r as f64)).ceil().max(2.0),
            AnnulusWidth::Fixed(w) => w,
        }
    }
}

/// Circle parameters from a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    /// Root mean square of the geometric residuals `|p - c| - r`.
    pub fn rms_residual(&self, points: &[(f64, f64)]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let ss: f64 = points
            .iter()
            .map(|&(x, y)| ((x - self.cx).hypot(y - self.cy) - self.r).powi(2))
            .sum();
        (ss / points.len() as f64).sqrt()
    }
}

/// Why a peak produced no detection.
#[derive(Debug, Clone, PartialEq)]
pub enum FitFailure {
    TooFewInliers { peak: PeakCandidate, inliers: usize },
    Singular { peak: PeakCandidate, inliers: usize },
}

/// Algebraic circle fit minimizing `Σ (x² + y² + D·x + E·y + F)²`.
///
/// Points are shifted to their centroid before forming the normal equations.
/// Returns `None` for fewer than three points or a singular (collinear)
/// configuration.
pub fn fit_circle_kasa(points: &[(f64, f64)]) -> Option<Circle> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (mx / n, my / n);

    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for &(x, y) in points {
        let (u, v) = (x - mx, y - my);
        let row = Vector3::new(u, v, 1.0);
        let z = u * u + v * v;
        ata += row * row.transpose();
        atb -= row * z;
    }
    // Reject near-collinear sets through the conditioning of the system.
    let eig = ata.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > hi * 1e-12) {
        return None;
    }
    let sol = ata.cholesky()?.solve(&atb);
    let (d, e, f) = (sol[0], sol[1], sol[2]);
    let r2 = 0.25 * (d * d + e * e) - f;
    if !(r2 > 0.0) || !r2.is_finite() {
        return None;
    }
    Some(Circle {
        cx: mx - 0.5 * d,
        cy: my - 0.5 * e,
        r: r2.sqrt(),
    })
}

/// Ridge pixels within `halfwidth` of the circle of a peak.
pub fn annulus_inliers(ridges: &[DirectedRidge], peak: &PeakCandidate, halfwidth: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    collect_annulus(ridges, peak, halfwidth, &mut out);
    out
}

fn in_annulus(p: &DirectedRidge, cx: f64, cy: f64, r: f64, halfwidth: f64) -> Option<(f64, f64)> {
    let outer = r + halfwidth;
    let (x, y) = (p.x as f64, p.y as f64);
    let (ddx, ddy) = (x - cx, y - cy);
    if ddx.abs() > outer || ddy.abs() > outer {
        return None;
    }
    let d = ddx.hypot(ddy);
    ((d - r).abs() <= halfwidth).then_some((x, y))
}

fn collect_annulus(ridges: &[DirectedRidge], peak: &PeakCandidate, halfwidth: f64, out: &mut Vec<(f64, f64)>) {
    let (cx, cy, r) = (peak.cx as f64, peak.cy as f64, peak.r as f64);
    out.extend(ridges.iter().filter_map(|p| in_annulus(p, cx, cy, r, halfwidth)));
}

/// Row offsets into ridges stored in raster order, so that a peak only
/// visits the rows and columns of its bounding box. Visiting order matches
/// a full scan, which keeps fits bit-identical.
struct RowIndex {
    starts: Vec<usize>,
}

impl RowIndex {
    fn new(ridges: &[DirectedRidge]) -> Option<Self> {
        if !ridges.windows(2).all(|w| (w[0].y, w[0].x) < (w[1].y, w[1].x)) {
            return None;
        }
        let rows = ridges.last().map_or(0, |p| p.y as usize + 1);
        let mut starts = vec![0; rows + 1];
        for p in ridges {
            starts[p.y as usize + 1] += 1;
        }
        for i in 1..starts.len() {
            starts[i] += starts[i - 1];
        }
        Some(Self { starts })
    }

    fn collect(&self, ridges: &[DirectedRidge], peak: &PeakCandidate, halfwidth: f64, out: &mut Vec<(f64, f64)>) {
        let (cx, cy, r) = (peak.cx as f64, peak.cy as f64, peak.r as f64);
        let outer = r + halfwidth;
        let rows = self.starts.len() - 1;
        if rows == 0 {
            return;
        }
        let y0 = (cy - outer).floor().max(0.0) as usize;
        let y1 = ((cy + outer).ceil().max(0.0) as usize).min(rows - 1);
        let x0 = (cx - outer).floor().max(0.0) as u32;
        let x1 = (cx + outer).ceil().max(0.0) as u32;
        for y in y0..=y1 {
            let row = &ridges[self.starts[y]..self.starts[y + 1]];
            let first = row.partition_point(|p| p.x < x0);
            for p in row[first..].iter().take_while(|p| p.x <= x1) {
                out.extend(in_annulus(p, cx, cy, r, halfwidth));
            }
        }
    }
}

/// Classify ridges by the annulus of each peak and fit each class.
pub fn classify_and_fit(
    ridges: &[DirectedRidge],
    peaks: &[PeakCandidate],
    width: AnnulusWidth,
    cfg: &HoughConfig,
) -> Vec<RingDetection> {
    classify_and_fit_with_diagnostics(ridges, peaks, width, cfg).0
}

/// [`classify_and_fit`] that also reports dropped peaks. The returned
/// detections are not yet deduplicated.
pub fn classify_and_fit_with_diagnostics(
    ridges: &[DirectedRidge],
    peaks: &[PeakCandidate],
    width: AnnulusWidth,
    cfg: &HoughConfig,
) -> (Vec<RingDetection>, Vec<FitFailure>) {
    let mut out = Vec::with_capacity(peaks.len());
    let mut failures = Vec::new();
    let index = RowIndex::new(ridges);
    let mut inliers = Vec::new();
    for peak in peaks {
        let hw = width.halfwidth(peak.r, cfg);
        inliers.clear();
        match &index {
            Some(ix) => ix.collect(ridges, peak, hw, &mut inliers),
            None => collect_annulus(ridges, peak, hw, &mut inliers),
        }
        if inliers.len() < 3 {
            failures.push(FitFailure::TooFewInliers {
                peak: *peak,
                inliers: inliers.len(),
            });
            continue;
        }
        match fit_circle_kasa(&inliers) {
            Some(c) => out.push(RingDetection {
                cx: c.cx,
                cy: c.cy,
                r: c.r,
                score: peak.score,
                inliers: inliers.len(),
                rms_residual: c.rms_residual(&inliers),
            }),
            None => {
                log::debug!("dropping peak {peak:?}: singular fit over {} inliers", inliers.len());
                failures.push(FitFailure::Singular {
                    peak: *peak,
                    inliers: inliers.len(),
                });
            }
        }
    }
    (out, failures)
}

/// Center distance below which two detections are merged.
pub const DEDUP_CENTER_PX: f64 = 2.0;
/// Radius difference below which two detections are merged.
pub const DEDUP_RADIUS_PX: f64 = 2.0;

/// Merge near-duplicate detections, keeping the higher score. Ties keep the
/// earlier detection. The survivors keep their input order.
pub fn deduplicate(detections: &[RingDetection]) -> Vec<RingDetection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; detections.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let dup = kept.iter().any(|&j| {
            let k = &detections[j];
            (d.cx - k.cx).hypot(d.cy - k.cy) < DEDUP_CENTER_PX && (d.r - k.r).abs() < DEDUP_RADIUS_PX
        });
        if !dup {
            keep[i] = true;
            kept.push(i);
        }
    }
    detections
        .iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(*d))
        .collect()
}
