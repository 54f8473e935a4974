//! Per-frame ring detection: smoothing, curvature, directed ridges, votes,
//! the streamed transform and sub-pixel fitting.

mod oracle;

pub use oracle::{detect_rings_oracle, FullAccumulator};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hough::{
    collect_votes_into, radix_sort, stream_levels_observed, AccumulatorSlab, HoughConfig,
    LevelObserver, PeakCandidate,
};
use crate::imaging::{gaussian_smooth, hessian_fields, least_curvature, CurvatureField, GrayImage};
use crate::refine::{classify_and_fit_with_diagnostics, deduplicate, AnnulusWidth, FitFailure, RingDetection};
use crate::ridges::{detect_ridges_into, DirectedRidge};

/// Everything a detector needs besides the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Gaussian scale selecting the outer ring; about half its radial
    /// thickness.
    pub smoothing_sigma: f64,
    /// Ridges need `kappa` strictly below this (≤ 0).
    pub curvature_threshold: f64,
    pub hough: HoughConfig,
    pub annulus_halfwidth: AnnulusWidth,
}

impl DetectorConfig {
    pub fn new(smoothing_sigma: f64, r_min: u32, r_max: u32) -> Self {
        Self {
            smoothing_sigma,
            curvature_threshold: 0.0,
            hough: HoughConfig::new(r_min, r_max),
            annulus_halfwidth: AnnulusWidth::Auto,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.smoothing_sigma > 0.0) || !self.smoothing_sigma.is_finite() {
            return Err(Error::Config(format!(
                "smoothing_sigma must be positive, got {}",
                self.smoothing_sigma
            )));
        }
        if !(self.curvature_threshold <= 0.0) {
            return Err(Error::Config(format!(
                "curvature_threshold must be <= 0, got {}",
                self.curvature_threshold
            )));
        }
        if let AnnulusWidth::Fixed(w) = self.annulus_halfwidth {
            if !(w > 0.0) {
                return Err(Error::Config(format!("annulus half-width must be positive, got {w}")));
            }
        }
        self.hough.validate(width, height)
    }
}

/// Intermediate products of one detection, for inspection and testing.
#[derive(Debug, Clone, Default)]
pub struct FrameAnalysis {
    pub ridges: Vec<DirectedRidge>,
    pub vote_count: usize,
    pub peaks: Vec<PeakCandidate>,
    pub failures: Vec<FitFailure>,
    pub detections: Vec<RingDetection>,
}

/// Front end shared by the streamed detector and the oracle.
pub fn curvature_of(img: &GrayImage, cfg: &DetectorConfig) -> Result<CurvatureField> {
    let smoothed = gaussian_smooth(img, cfg.smoothing_sigma)?;
    Ok(least_curvature(&hessian_fields(&smoothed)?))
}

/// Fit peaks and merge duplicates.
pub fn refine_peaks(
    ridges: &[DirectedRidge],
    peaks: &[PeakCandidate],
    cfg: &DetectorConfig,
) -> (Vec<RingDetection>, Vec<FitFailure>) {
    let (fits, failures) =
        classify_and_fit_with_diagnostics(ridges, peaks, cfg.annulus_halfwidth, &cfg.hough);
    (deduplicate(&fits), failures)
}

/// Reusable per-worker detector. Holds one accumulator slab plus the ridge
/// and vote buffers, so repeated frames of one size allocate nothing new.
#[derive(Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    slab: Option<AccumulatorSlab>,
    ridges: Vec<DirectedRidge>,
    votes: Vec<u64>,
    scratch: Vec<u64>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            cfg,
            slab: None,
            ridges: Vec::new(),
            votes: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Dense cells in the current slab, if one has been allocated.
    pub fn slab_cells(&self) -> usize {
        self.slab.as_ref().map_or(0, AccumulatorSlab::cell_count)
    }

    pub fn slab_bytes(&self) -> usize {
        self.slab.as_ref().map_or(0, AccumulatorSlab::dense_bytes)
    }

    pub fn slab(&self) -> Option<&AccumulatorSlab> {
        self.slab.as_ref()
    }

    pub fn detect(&mut self, img: &GrayImage) -> Result<Vec<RingDetection>> {
        Ok(self.analyze_observed(img, &mut ())?.detections)
    }

    pub fn analyze(&mut self, img: &GrayImage) -> Result<FrameAnalysis> {
        self.analyze_observed(img, &mut ())
    }

    /// Full analysis with a hook on every completed radius level.
    pub fn analyze_observed<O: LevelObserver + ?Sized>(
        &mut self,
        img: &GrayImage,
        observer: &mut O,
    ) -> Result<FrameAnalysis> {
        let (w, h) = (img.width(), img.height());
        self.cfg.validate(w, h)?;
        let curv = curvature_of(img, &self.cfg)?;
        detect_ridges_into(&curv, self.cfg.curvature_threshold, &mut self.ridges);
        collect_votes_into(&self.ridges, &self.cfg.hough, w, h, &mut self.votes);
        radix_sort(&mut self.votes, &mut self.scratch);

        let slab = match &mut self.slab {
            Some(s) if s.width() == w && s.height() == h => s,
            other => other.insert(AccumulatorSlab::new(w, h)),
        };
        let peaks = stream_levels_observed(&self.votes, &self.cfg.hough, w, h, slab, observer)?;
        let (detections, failures) = refine_peaks(&self.ridges, &peaks, &self.cfg);
        Ok(FrameAnalysis {
            ridges: self.ridges.clone(),
            vote_count: self.votes.len(),
            peaks,
            failures,
            detections,
        })
    }
}

/// Detect rings in one frame with a fresh detector.
pub fn detect_rings(img: &GrayImage, cfg: &DetectorConfig) -> Result<Vec<RingDetection>> {
    Detector::new(cfg.clone()).detect(img)
}
