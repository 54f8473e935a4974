//! Reference transform holding the full `(levels × H × W)` raw and
//! normalized arrays. Populated straight from unsorted votes and smoothed
//! by evaluating the weighted sum at every cell of every level, it shares
//! none of the slab's recycling or registry logic. Used for verification
//! and benchmarks only.

use crate::error::{Error, Result};
use crate::hough::{collect_votes, HoughConfig, PeakCandidate, VoteCodec};
use crate::imaging::GrayImage;
use crate::refine::RingDetection;
use crate::ridges::detect_ridges;

use super::{curvature_of, refine_peaks, DetectorConfig};

#[derive(Debug, Clone)]
pub struct FullAccumulator {
    cfg: HoughConfig,
    codec: VoteCodec,
    raw: Vec<u32>,
    norm: Vec<f64>,
}

fn alloc<T: Clone + Default>(n: usize) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(n)
        .map_err(|e| Error::Config(format!("cannot allocate {n} accumulator cells: {e}")))?;
    v.resize(n, T::default());
    Ok(v)
}

impl FullAccumulator {
    pub fn new(cfg: &HoughConfig, width: usize, height: usize) -> Result<Self> {
        cfg.validate(width, height)?;
        let codec = VoteCodec::new(cfg, width, height);
        let n = usize::try_from(codec.code_bound())
            .map_err(|_| Error::Config("parameter space too large".into()))?;
        Ok(Self {
            cfg: cfg.clone(),
            codec,
            raw: alloc(n)?,
            norm: alloc(n)?,
        })
    }

    /// Build, populate and normalize from votes in any order.
    pub fn from_votes(cfg: &HoughConfig, width: usize, height: usize, votes: &[u64]) -> Result<Self> {
        let mut acc = Self::new(cfg, width, height)?;
        for &v in votes {
            acc.raw[v as usize] += 1;
        }
        acc.normalize();
        Ok(acc)
    }

    pub fn cell_count(&self) -> usize {
        self.raw.len() + self.norm.len()
    }

    fn level_slice<T>(&self, buf: &[T], r: u32) -> std::ops::Range<usize> {
        let n = self.codec.level_size() as usize;
        let l = (r - self.codec.r_lo) as usize;
        debug_assert!(buf.len() >= (l + 1) * n);
        l * n..(l + 1) * n
    }

    pub fn raw_level(&self, r: u32) -> &[u32] {
        &self.raw[self.level_slice(&self.raw, r)]
    }

    pub fn norm_level(&self, r: u32) -> &[f64] {
        &self.norm[self.level_slice(&self.norm, r)]
    }

    /// Smooth every cell of every level; keep the value only where the raw
    /// count passes the integer threshold.
    fn normalize(&mut self) {
        let (w, h) = (self.codec.width, self.codec.height);
        let n = w * h;
        for r in self.cfg.r_lo()..=self.cfg.r_hi() {
            let sigma = self.cfg.sigma_of_r(r as f64);
            let k = (3.0 * sigma).ceil() as usize;
            let off = (r - self.codec.r_lo) as usize * n;
            let inv_r = 1.0 / r as f64;
            let side = k + 1;
            let table: Vec<f64> = (0..side * side)
                .map(|i| {
                    let (ady, adx) = ((i / side) as isize, (i % side) as isize);
                    let d2 = (adx * adx + ady * ady) as f64;
                    (-0.5 * d2 / (sigma * sigma)).exp()
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let y0 = y.saturating_sub(k);
                    let y1 = (y + k).min(h - 1);
                    let x0 = x.saturating_sub(k);
                    let x1 = (x + k).min(w - 1);
                    let mut sum = 0.0;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            let wt = table[yy.abs_diff(y) * side + xx.abs_diff(x)];
                            sum += f64::from(self.raw[off + yy * w + xx]) * wt;
                        }
                    }
                    let i = off + y * w + x;
                    self.norm[i] = if self.raw[i] > self.cfg.vote_threshold_raw {
                        sum * inv_r
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Exhaustive 3×3×3 local-maximum scan over `[r_min, r_max]`, in
    /// `(r, y, x)` order. Ties go to the cell that comes first.
    pub fn peaks(&self) -> Vec<PeakCandidate> {
        let (w, h) = (self.codec.width as isize, self.codec.height as isize);
        let threshold = self.cfg.score_threshold();
        let mut out = Vec::new();
        for r in self.cfg.r_min..=self.cfg.r_max {
            for y in 0..h {
                for x in 0..w {
                    let code = self.codec.encode(r, y as usize, x as usize);
                    let v = self.norm[code as usize];
                    if !(v >= threshold) {
                        continue;
                    }
                    let mut is_max = true;
                    'n: for dr in -1i64..=1 {
                        for dy in -1..=1 {
                            for dx in -1..=1 {
                                let (ny, nx) = (y + dy, x + dx);
                                if (dr, dy, dx) == (0, 0, 0) || ny < 0 || nx < 0 || ny >= h || nx >= w {
                                    continue;
                                }
                                let nr = (r as i64 + dr) as u32;
                                let ncode = self.codec.encode(nr, ny as usize, nx as usize);
                                let nv = self.norm[ncode as usize];
                                let beaten = if ncode < code { v <= nv } else { v < nv };
                                if beaten {
                                    is_max = false;
                                    break 'n;
                                }
                            }
                        }
                    }
                    if is_max {
                        out.push(PeakCandidate {
                            cx: x as u32,
                            cy: y as u32,
                            r,
                            score: v,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Same pipeline as [`super::detect_rings`] but over the full parameter
/// space.
pub fn detect_rings_oracle(img: &GrayImage, cfg: &DetectorConfig) -> Result<Vec<RingDetection>> {
    let (w, h) = (img.width(), img.height());
    cfg.validate(w, h)?;
    let curv = curvature_of(img, cfg)?;
    let ridges = detect_ridges(&curv, cfg.curvature_threshold);
    let votes = collect_votes(&ridges, &cfg.hough, w, h);
    let acc = FullAccumulator::from_votes(&cfg.hough, w, h, &votes)?;
    let peaks = acc.peaks();
    Ok(refine_peaks(&ridges, &peaks, cfg).0)
}
