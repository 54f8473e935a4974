//! Streamed directed circle Hough transform.
//!
//! Each directed ridge votes for circle centers at distance `r` on both
//! sides of it along its principal direction, for every radius in the
//! extended range `[r_min - 1, r_max + 1]`. Votes are encoded as integers
//! whose order is lexicographic in `(r, y, x)`, fully sorted, and then
//! replayed level by level into an [`AccumulatorSlab`] that only ever holds
//! three consecutive equi-radius levels.
//!
//! When a level `r` is complete its hotspots (raw count above the integer
//! threshold) are mapped to the normalized space as a Gaussian-weighted sum
//! with width `σ(r)`, divided by `r`; an ideal ring then scores about 2π.
//! Hotspots of level `r - 1` are then tested for 3×3×3 maximality and level
//! `r - 2` is undone through its registry of touched cells.

mod sort;

pub use sort::{radix_sort, sort_votes};

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ridges::DirectedRidge;

/// Parameters of the transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoughConfig {
    pub r_min: u32,
    pub r_max: u32,
    /// Raw count a cell must exceed to become a hotspot.
    pub vote_threshold_raw: u32,
    /// Normalized score threshold, as a fraction of 2π.
    pub vote_threshold_norm: f64,
    pub sigma_slope: f64,
    pub sigma_offset: f64,
}

impl HoughConfig {
    pub const DEFAULT_SIGMA_SLOPE: f64 = 0.05;
    pub const DEFAULT_SIGMA_OFFSET: f64 = 0.25;
    pub const DEFAULT_THRESHOLD_RAW: u32 = 3;
    pub const DEFAULT_THRESHOLD_NORM: f64 = 0.5;

    /// Radius range with every other parameter at its default.
    pub fn new(r_min: u32, r_max: u32) -> Self {
        Self {
            r_min,
            r_max,
            vote_threshold_raw: Self::DEFAULT_THRESHOLD_RAW,
            vote_threshold_norm: Self::DEFAULT_THRESHOLD_NORM,
            sigma_slope: Self::DEFAULT_SIGMA_SLOPE,
            sigma_offset: Self::DEFAULT_SIGMA_OFFSET,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.r_min < 2 || self.r_min >= self.r_max {
            return Err(Error::Config(format!(
                "radius range must satisfy 2 <= r_min < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.r_max as usize >= width.min(height) {
            return Err(Error::Config(format!(
                "r_max {} must be below the smaller image side {}",
                self.r_max,
                width.min(height)
            )));
        }
        if self.vote_threshold_raw < 1 {
            return Err(Error::Config("vote_threshold_raw must be >= 1".into()));
        }
        if !(self.vote_threshold_norm > 0.0) || !self.vote_threshold_norm.is_finite() {
            return Err(Error::Config("vote_threshold_norm must be positive".into()));
        }
        if !(self.sigma_slope >= 0.0) || !(self.sigma_of_r(self.r_lo() as f64) > 0.0) {
            return Err(Error::Config(
                "sigma(r) must be positive over the radius range".into(),
            ));
        }
        Ok(())
    }

    /// Lowest radius that receives votes (`r_min - 1`).
    #[inline]
    pub fn r_lo(&self) -> u32 {
        self.r_min - 1
    }

    /// Highest radius that receives votes (`r_max + 1`).
    #[inline]
    pub fn r_hi(&self) -> u32 {
        self.r_max + 1
    }

    /// Number of equi-radius levels the votes span.
    #[inline]
    pub fn level_count(&self) -> usize {
        (self.r_hi() - self.r_lo() + 1) as usize
    }

    /// Width of the parameter-space smoothing at radius `r`.
    #[inline]
    pub fn sigma_of_r(&self, r: f64) -> f64 {
        self.sigma_slope * r + self.sigma_offset
    }

    /// Truncation radius of the smoothing kernel at `r`, `ceil(3σ(r))`.
    #[inline]
    pub fn kernel_radius(&self, r: u32) -> usize {
        (3.0 * self.sigma_of_r(r as f64)).ceil() as usize
    }

    /// Threshold on normalized scores.
    #[inline]
    pub fn score_threshold(&self) -> f64 {
        self.vote_threshold_norm * TAU
    }
}

/// `sigma_slope * r + sigma_offset`.
pub fn sigma_of_r(r: f64, cfg: &HoughConfig) -> f64 {
    cfg.sigma_of_r(r)
}

/// Bijection between `(r, y, x)` in the extended box and `u64` codes,
/// `code = ((r - r_lo) * height + y) * width + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteCodec {
    pub r_lo: u32,
    pub levels: u32,
    pub width: usize,
    pub height: usize,
}

impl VoteCodec {
    pub fn new(cfg: &HoughConfig, width: usize, height: usize) -> Self {
        Self {
            r_lo: cfg.r_lo(),
            levels: cfg.level_count() as u32,
            width,
            height,
        }
    }

    #[inline]
    pub fn level_size(&self) -> u64 {
        (self.width * self.height) as u64
    }

    /// One past the largest code.
    #[inline]
    pub fn code_bound(&self) -> u64 {
        self.levels as u64 * self.level_size()
    }

    #[inline]
    pub fn encode(&self, r: u32, y: usize, x: usize) -> u64 {
        debug_assert!(r >= self.r_lo && r < self.r_lo + self.levels);
        debug_assert!(x < self.width && y < self.height);
        ((r - self.r_lo) as u64 * self.height as u64 + y as u64) * self.width as u64 + x as u64
    }

    #[inline]
    pub fn decode(&self, code: u64) -> (u32, usize, usize) {
        let ls = self.level_size();
        let r = self.r_lo + (code / ls) as u32;
        let cell = (code % ls) as usize;
        (r, cell / self.width, cell % self.width)
    }
}

/// Every in-bounds vote of every ridge, unsorted.
pub fn collect_votes(
    ridges: &[DirectedRidge],
    cfg: &HoughConfig,
    width: usize,
    height: usize,
) -> Vec<u64> {
    let mut votes = Vec::new();
    collect_votes_into(ridges, cfg, width, height, &mut votes);
    votes
}

/// [`collect_votes`] into a reusable buffer (cleared first).
pub fn collect_votes_into(
    ridges: &[DirectedRidge],
    cfg: &HoughConfig,
    width: usize,
    height: usize,
    votes: &mut Vec<u64>,
) {
    votes.clear();
    votes.reserve(ridges.len() * cfg.level_count() * 2);
    let codec = VoteCodec::new(cfg, width, height);
    let (wf, hf) = (width as f64, height as f64);
    for ridge in ridges {
        let (x, y) = (ridge.x as f64, ridge.y as f64);
        for r in cfg.r_lo()..=cfg.r_hi() {
            let rf = r as f64;
            let base = (r - codec.r_lo) as u64 * codec.level_size();
            for sign in [1.0, -1.0] {
                let cx = (x + sign * rf * ridge.dx).round();
                let cy = (y + sign * rf * ridge.dy).round();
                if cx >= 0.0 && cy >= 0.0 && cx < wf && cy < hf {
                    votes.push(base + cy as u64 * width as u64 + cx as u64);
                }
            }
        }
    }
}

/// A local maximum of the normalized parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakCandidate {
    pub cx: u32,
    pub cy: u32,
    pub r: u32,
    /// Normalized votes; an ideal ring scores about 2π.
    pub score: f64,
}

/// Number of equi-radius levels kept in memory at once.
pub const SLAB_LEVELS: usize = 3;

/// Raw and normalized storage for three consecutive radius levels, with
/// registries of touched cells and hotspots per level. Level `r` lives at
/// index `r % 3`.
#[derive(Debug, Clone)]
pub struct AccumulatorSlab {
    width: usize,
    height: usize,
    raw: Vec<u32>,
    norm: Vec<f64>,
    modified: [Vec<u32>; SLAB_LEVELS],
    hotspots: [Vec<u32>; SLAB_LEVELS],
}

impl AccumulatorSlab {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            raw: vec![0; SLAB_LEVELS * n],
            norm: vec![0.0; SLAB_LEVELS * n],
            modified: Default::default(),
            hotspots: Default::default(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn level_index(r: u32) -> usize {
        (r % SLAB_LEVELS as u32) as usize
    }

    /// Cells allocated across the raw and normalized arrays (6·H·W).
    pub fn cell_count(&self) -> usize {
        self.raw.len() + self.norm.len()
    }

    /// Bytes held by the dense arrays.
    pub fn dense_bytes(&self) -> usize {
        self.raw.len() * std::mem::size_of::<u32>() + self.norm.len() * std::mem::size_of::<f64>()
    }

    #[inline]
    fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let n = self.width * self.height;
        level * n..(level + 1) * n
    }

    pub fn raw_level(&self, level: usize) -> &[u32] {
        &self.raw[self.level_range(level)]
    }

    pub fn norm_level(&self, level: usize) -> &[f64] {
        &self.norm[self.level_range(level)]
    }

    pub fn modified(&self, level: usize) -> &[u32] {
        &self.modified[level]
    }

    pub fn hotspots(&self, level: usize) -> &[u32] {
        &self.hotspots[level]
    }

    /// Add `count` votes to a cell, registering it on first touch and as a
    /// hotspot once it exceeds `threshold`.
    pub fn increment(&mut self, level: usize, cell: usize, count: u32, threshold: u32) {
        let base = level * self.width * self.height;
        let slot = &mut self.raw[base + cell];
        let before = *slot;
        *slot += count;
        if before == 0 {
            self.modified[level].push(cell as u32);
        }
        if before <= threshold && *slot > threshold {
            self.hotspots[level].push(cell as u32);
        }
    }

    /// Zero every registered cell of a level and clear its registries.
    /// Returns the number of cells touched.
    pub fn undo_level(&mut self, level: usize) -> usize {
        let base = level * self.width * self.height;
        let touched = self.modified[level].len();
        for &cell in &self.modified[level] {
            self.raw[base + cell as usize] = 0;
            self.norm[base + cell as usize] = 0.0;
        }
        self.modified[level].clear();
        self.hotspots[level].clear();
        touched
    }

    /// True when every counter is zero and every registry empty.
    pub fn is_clear(&self) -> bool {
        self.raw.iter().all(|&v| v == 0)
            && self.norm.iter().all(|&v| v == 0.0)
            && self.modified.iter().all(Vec::is_empty)
            && self.hotspots.iter().all(Vec::is_empty)
    }
}

/// `undo_level` as a free function.
pub fn undo_level(slab: &mut AccumulatorSlab, level_index: usize) -> usize {
    slab.undo_level(level_index)
}

/// Snapshot of a completed level, handed to a [`LevelObserver`].
#[derive(Debug)]
pub struct LevelView<'a> {
    pub r: u32,
    pub raw: &'a [u32],
    pub norm: &'a [f64],
    pub modified: &'a [u32],
    pub hotspots: &'a [u32],
    pub sigma: f64,
    pub kernel_radius: usize,
}

/// Hook called once per radius level after its hotspots are mapped.
pub trait LevelObserver {
    fn level_complete(&mut self, level: &LevelView<'_>);
}

impl LevelObserver for () {
    fn level_complete(&mut self, _: &LevelView<'_>) {}
}

/// Per-level statistics for tuning, written as CSV.
#[derive(Debug, Clone, Default)]
pub struct LevelStats {
    pub rows: Vec<LevelStatsRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelStatsRow {
    pub r: u32,
    pub modified: usize,
    pub hotspots: usize,
    pub sigma: f64,
    pub kernel_radius: usize,
}

impl LevelObserver for LevelStats {
    fn level_complete(&mut self, level: &LevelView<'_>) {
        self.rows.push(LevelStatsRow {
            r: level.r,
            modified: level.modified.len(),
            hotspots: level.hotspots.len(),
            sigma: level.sigma,
            kernel_radius: level.kernel_radius,
        });
    }
}

impl LevelStats {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "r,modified,hotspots,sigma,kernel_radius")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                row.r, row.modified, row.hotspots, row.sigma, row.kernel_radius
            )?;
        }
        Ok(())
    }
}

/// Unnormalized Gaussian weights `exp(-½(Δx²+Δy²)/σ²)` on a
/// `(2k+1)²` grid, row-major in `(Δy, Δx)`.
pub fn smoothing_weights(sigma: f64, k: usize) -> Vec<f64> {
    let k = k as isize;
    let mut w = Vec::with_capacity(((2 * k + 1) * (2 * k + 1)) as usize);
    for dy in -k..=k {
        for dx in -k..=k {
            let d2 = (dx * dx + dy * dy) as f64;
            w.push((-0.5 * d2 / (sigma * sigma)).exp());
        }
    }
    w
}

/// Replay sorted votes through the slab and return the peaks.
pub fn stream_levels(
    sorted_votes: &[u64],
    cfg: &HoughConfig,
    width: usize,
    height: usize,
    slab: &mut AccumulatorSlab,
) -> Result<Vec<PeakCandidate>> {
    stream_levels_observed(sorted_votes, cfg, width, height, slab, &mut ())
}

/// [`stream_levels`] with a per-level observer.
pub fn stream_levels_observed<O: LevelObserver + ?Sized>(
    sorted_votes: &[u64],
    cfg: &HoughConfig,
    width: usize,
    height: usize,
    slab: &mut AccumulatorSlab,
    observer: &mut O,
) -> Result<Vec<PeakCandidate>> {
    if slab.width != width || slab.height != height {
        return Err(Error::Config(format!(
            "slab is {}x{} but the frame is {width}x{height}",
            slab.width, slab.height
        )));
    }
    cfg.validate(width, height)?;
    let codec = VoteCodec::new(cfg, width, height);
    let level_size = codec.level_size();
    let threshold_raw = cfg.vote_threshold_raw;
    let threshold_norm = cfg.score_threshold();
    let mut peaks = Vec::new();
    let mut weights = Vec::new();
    let mut pos = 0usize;

    for r in cfg.r_lo()..=cfg.r_hi() {
        let top = AccumulatorSlab::level_index(r);
        debug_assert!(slab.modified[top].is_empty());

        // Populate level r; all votes for one cell arrive consecutively.
        let level_start = (r - cfg.r_lo()) as u64 * level_size;
        let level_end = level_start + level_size;
        while pos < sorted_votes.len() && sorted_votes[pos] < level_end {
            let code = sorted_votes[pos];
            debug_assert!(code >= level_start, "votes are not sorted");
            let mut run = 1u32;
            pos += 1;
            while pos < sorted_votes.len() && sorted_votes[pos] == code {
                run += 1;
                pos += 1;
            }
            slab.increment(top, (code - level_start) as usize, run, threshold_raw);
        }

        // Map hotspots of level r into the normalized space.
        let sigma = cfg.sigma_of_r(r as f64);
        let k = cfg.kernel_radius(r);
        if !slab.hotspots[top].is_empty() {
            weights.clear();
            weights.extend(smoothing_weights(sigma, k));
            map_hotspots(slab, top, r, k, &weights);
        }
        observer.level_complete(&LevelView {
            r,
            raw: slab.raw_level(top),
            norm: slab.norm_level(top),
            modified: &slab.modified[top],
            hotspots: &slab.hotspots[top],
            sigma,
            kernel_radius: k,
        });

        // Local maxima among hotspots of the middle level.
        if r > cfg.r_min {
            let mid_r = r - 1;
            find_maxima(slab, mid_r, threshold_norm, &mut peaks);
        }

        // Recycle the bottom level.
        if r >= cfg.r_lo() + 2 {
            slab.undo_level(AccumulatorSlab::level_index(r - 2));
        }
    }
    // Drain the last two levels so the slab can be reused.
    slab.undo_level(AccumulatorSlab::level_index(cfg.r_hi() - 1));
    slab.undo_level(AccumulatorSlab::level_index(cfg.r_hi()));
    debug_assert!(pos == sorted_votes.len(), "votes outside the radius range");
    Ok(peaks)
}

fn map_hotspots(slab: &mut AccumulatorSlab, level: usize, r: u32, k: usize, weights: &[f64]) {
    let (w, h) = (slab.width, slab.height);
    let base = level * w * h;
    let side = 2 * k + 1;
    let inv_r = 1.0 / r as f64;
    for hi in 0..slab.hotspots[level].len() {
        let cell = slab.hotspots[level][hi] as usize;
        let (y, x) = (cell / w, cell % w);
        let y0 = y.saturating_sub(k);
        let y1 = (y + k).min(h - 1);
        let x0 = x.saturating_sub(k);
        let x1 = (x + k).min(w - 1);
        let mut sum = 0.0;
        for yy in y0..=y1 {
            let wrow = &weights[(yy + k - y) * side..];
            let row = &slab.raw[base + yy * w..base + (yy + 1) * w];
            for xx in x0..=x1 {
                sum += f64::from(row[xx]) * wrow[xx + k - x];
            }
        }
        slab.norm[base + cell] = sum * inv_r;
    }
}

fn find_maxima(slab: &AccumulatorSlab, mid_r: u32, threshold: f64, peaks: &mut Vec<PeakCandidate>) {
    let (w, h) = (slab.width, slab.height);
    let n = w * h;
    let levels = [
        AccumulatorSlab::level_index(mid_r - 1),
        AccumulatorSlab::level_index(mid_r),
        AccumulatorSlab::level_index(mid_r + 1),
    ];
    let mid = levels[1];
    for &cell in &slab.hotspots[mid] {
        let cell = cell as usize;
        let v = slab.norm[mid * n + cell];
        if !(v >= threshold) {
            continue;
        }
        let (y, x) = (cell / w, cell % w);
        let mut is_max = true;
        'scan: for (li, &level) in levels.iter().enumerate() {
            for dy in -1isize..=1 {
                let ny = y as isize + dy;
                if ny < 0 || ny >= h as isize {
                    continue;
                }
                for dx in -1isize..=1 {
                    let nx = x as isize + dx;
                    if nx < 0 || nx >= w as isize || (li == 1 && dx == 0 && dy == 0) {
                        continue;
                    }
                    let nv = slab.norm[level * n + ny as usize * w + nx as usize];
                    // The neighbor precedes the candidate in (r, y, x) order.
                    let precedes = li == 0 || (li == 1 && (dy < 0 || (dy == 0 && dx < 0)));
                    if (precedes && v <= nv) || (!precedes && v < nv) {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
        }
        if is_max {
            peaks.push(PeakCandidate {
                cx: x as u32,
                cy: y as u32,
                r: mid_r,
                score: v,
            });
        }
    }
}
