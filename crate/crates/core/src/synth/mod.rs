//! Ground-truth scenes of defocused particles and the detection scorer.
//!
//! Each particle renders as a thick outer ring with Gaussian radial profile,
//! thinner and dimmer inner rings, and a central spot. Corpora reproduce
//! the shape of the robustness study: a mean ring count per frame and a
//! target fraction of rings in overlap or inclusion clusters.

pub mod flow;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::pipeline::DetectorConfig;
use crate::refine::RingDetection;

/// Inner ring amplitude relative to the outer ring.
pub const INNER_AMPLITUDE: f64 = 0.35;
/// Central spot amplitude relative to the outer ring.
pub const SPOT_AMPLITUDE: f64 = 0.8;
/// Extra radius, in pixels, of the disk used for cluster membership.
pub const CLUSTER_MARGIN_PX: f64 = 3.0;

/// One particle image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub amplitude: f64,
    /// Standard deviation of the outer ring's radial profile, px.
    pub ring_width: f64,
    pub inner_rings: u32,
}

/// A frame to render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub rings: Vec<RingSpec>,
    pub noise_sd: f64,
    pub seed: u64,
    #[serde(default)]
    pub background: f64,
}

/// Ground-truth circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRing {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl RingSpec {
    /// A mid-contrast particle with width-2 outer ring and two inner rings.
    pub fn new(cx: f64, cy: f64, r: f64) -> Self {
        Self {
            cx,
            cy,
            r,
            amplitude: 0.5,
            ring_width: 2.0,
            inner_rings: 2,
        }
    }
}

impl From<&RingSpec> for TruthRing {
    fn from(s: &RingSpec) -> Self {
        Self {
            cx: s.cx,
            cy: s.cy,
            r: s.r,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 5 || self.height < 5 {
            return Err(Error::Scene(format!(
                "frame {}x{} is too small",
                self.width, self.height
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Scene("noise_sd must be >= 0".into()));
        }
        for (i, s) in self.rings.iter().enumerate() {
            if !(s.r > 0.0) || !(s.ring_width > 0.0) || !s.amplitude.is_finite() {
                return Err(Error::Scene(format!("ring {i} has invalid parameters: {s:?}")));
            }
            let m = s.r + 3.0;
            if s.cx - m < 0.0
                || s.cy - m < 0.0
                || s.cx + m > self.width as f64
                || s.cy + m > self.height as f64
            {
                return Err(Error::Scene(format!(
                    "ring {i} at ({}, {}) r={} leaves the frame margin",
                    s.cx, s.cy, s.r
                )));
            }
        }
        Ok(())
    }

    pub fn truth(&self) -> Vec<TruthRing> {
        self.rings.iter().map(TruthRing::from).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn add_ring_profile(data: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, r: f64, sd: f64, amp: f64) {
    let reach = r + 5.0 * sd;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w - 1);
    let y1 = ((cy + reach).ceil() as usize).min(h - 1);
    let inv = 1.0 / (2.0 * sd * sd);
    for y in y0..=y1 {
        let dy = y as f64 - cy;
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let u = (dx * dx + dy * dy).sqrt() - r;
            if u.abs() <= 5.0 * sd {
                data[y * w + x] += amp * (-u * u * inv).exp();
            }
        }
    }
}

/// Render a scene and return it with its ground truth.
pub fn render_scene(spec: &SceneSpec) -> Result<(GrayImage, Vec<TruthRing>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut data = vec![spec.background; w * h];
    for s in &spec.rings {
        add_ring_profile(&mut data, w, h, s.cx, s.cy, s.r, s.ring_width, s.amplitude);
        for k in 1..=s.inner_rings {
            let rk = s.r * k as f64 / (s.inner_rings + 1) as f64;
            add_ring_profile(
                &mut data,
                w,
                h,
                s.cx,
                s.cy,
                rk,
                0.5 * s.ring_width,
                INNER_AMPLITUDE * s.amplitude,
            );
        }
        // Central spot: a ring of radius zero is a Gaussian blob.
        add_ring_profile(&mut data, w, h, s.cx, s.cy, 0.0, s.ring_width, SPOT_AMPLITUDE * s.amplitude);
    }
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Scene(e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((GrayImage::new(w, h, data)?, spec.truth()))
}

/// Rings whose membership disks (radius `r + CLUSTER_MARGIN_PX`)
/// intersect another ring's: overlap and inclusion configurations.
pub fn cluster_membership(truth: &[TruthRing]) -> Vec<bool> {
    let mut member = vec![false; truth.len()];
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            let (a, b) = (&truth[i], &truth[j]);
            let d = (a.cx - b.cx).hypot(a.cy - b.cy);
            if d < a.r + b.r + 2.0 * CLUSTER_MARGIN_PX {
                member[i] = true;
                member[j] = true;
            }
        }
    }
    member
}

/// Outcome of matching detections to ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub cluster_truths: usize,
    pub cluster_true_positives: usize,
    pub detection_rate: f64,
    pub false_rate: f64,
    pub cluster_detection_rate: f64,
}

impl MatchReport {
    fn from_counts(tp: usize, fneg: usize, fp: usize, ct: usize, ctp: usize) -> Self {
        let ratio = |num: usize, den: usize, empty: f64| {
            if den == 0 {
                empty
            } else {
                num as f64 / den as f64
            }
        };
        Self {
            true_positives: tp,
            false_negatives: fneg,
            false_positives: fp,
            cluster_truths: ct,
            cluster_true_positives: ctp,
            detection_rate: ratio(tp, tp + fneg, 1.0),
            false_rate: ratio(fp, tp + fp, 0.0),
            cluster_detection_rate: ratio(ctp, ct, 1.0),
        }
    }

    /// Pool the counts of several reports.
    pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a MatchReport>) -> MatchReport {
        let mut c = [0usize; 5];
        for r in reports {
            c[0] += r.true_positives;
            c[1] += r.false_negatives;
            c[2] += r.false_positives;
            c[3] += r.cluster_truths;
            c[4] += r.cluster_true_positives;
        }
        Self::from_counts(c[0], c[1], c[2], c[3], c[4])
    }
}

/// Default matching tolerances, px.
pub const DEFAULT_TOL_CENTER: f64 = 3.0;
pub const DEFAULT_TOL_RADIUS: f64 = 3.0;

/// Greedy one-to-one matching in ascending center distance. A pair is
/// admissible when the centers are within `tol_center` and the radii
/// within `tol_radius`.
pub fn match_detections(
    truth: &[TruthRing],
    detections: &[RingDetection],
    tol_center: f64,
    tol_radius: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (ti, t) in truth.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            let dc = (t.cx - d.cx).hypot(t.cy - d.cy);
            let dr = (t.r - d.r).abs();
            if dc <= tol_center && dr <= tol_radius {
                pairs.push((dc, dr, ti, di));
            }
        }
    }
    // Ties are broken by detection content, not input order.
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then_with(|| {
                let (p, q) = (&detections[a.3], &detections[b.3]);
                p.cx.total_cmp(&q.cx)
                    .then(p.cy.total_cmp(&q.cy))
                    .then(p.r.total_cmp(&q.r))
            })
    });
    let mut t_used = vec![false; truth.len()];
    let mut d_used = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, _, ti, di) in pairs {
        if !t_used[ti] && !d_used[di] {
            t_used[ti] = true;
            d_used[di] = true;
            out.push((ti, di));
        }
    }
    out
}

pub fn score_detections(
    truth: &[TruthRing],
    detections: &[RingDetection],
    tol_center: f64,
    tol_radius: f64,
) -> MatchReport {
    let matches = match_detections(truth, detections, tol_center, tol_radius);
    let clusters = cluster_membership(truth);
    let tp = matches.len();
    let ct = clusters.iter().filter(|&&c| c).count();
    let ctp = matches.iter().filter(|&&(ti, _)| clusters[ti]).count();
    MatchReport::from_counts(tp, truth.len() - tp, detections.len() - tp, ct, ctp)
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Poisson mean of the ring count per frame.
    pub mean_rings: f64,
    /// Target fraction of rings placed in overlap or inclusion clusters.
    pub cluster_fraction: f64,
    pub r_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub ring_width: f64,
    pub inner_rings: u32,
    pub noise_sd: f64,
    pub background: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// Corpus shaped like the robustness study: 340×370 sub-frames, about 14
    /// rings each, two thirds in clusters.
    pub fn robustness(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            width: 340,
            height: 370,
            mean_rings: 14.3,
            cluster_fraction: 0.677,
            r_range: (10.0, 52.0),
            amplitude_range: (0.35, 0.6),
            ring_width: 2.0,
            inner_rings: 2,
            noise_sd: 0.05,
            background: 0.1,
            seed,
        }
    }

    /// Detector settings for this corpus: smoothing at 1.25 ring widths,
    /// a curvature threshold that rejects the dimmer inner rings of the
    /// faintest particles, and a score threshold of 0.3·2π so that rings
    /// partly hidden in clusters still pass.
    pub fn detector_config(&self) -> DetectorConfig {
        let (r_lo, r_hi) = self.r_range;
        let mut cfg = DetectorConfig::new(
            1.25 * self.ring_width,
            (r_lo.floor() as u32).saturating_sub(2).max(1),
            r_hi.ceil() as u32 + 3,
        );
        cfg.curvature_threshold = -0.034 * self.amplitude_range.0;
        cfg.hough.vote_threshold_norm = 0.3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 5 || self.height < 5 {
            return Err(Error::Scene("frame too small".into()));
        }
        let (lo, hi) = self.r_range;
        if !(lo > 0.0 && lo <= hi) || 2.0 * (hi + 3.0) >= self.width.min(self.height) as f64 {
            return Err(Error::Scene(format!("radius range {:?} does not fit the frame", self.r_range)));
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return Err(Error::Scene("cluster_fraction must be in [0, 1]".into()));
        }
        if !(self.mean_rings >= 0.0) || !(self.ring_width > 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::Scene("invalid corpus parameters".into()));
        }
        Ok(())
    }
}

/// Per-frame seed derived from the corpus seed.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Placer<'a> {
    spec: &'a CorpusSpec,
    rng: ChaCha8Rng,
    placed: Vec<(RingSpec, usize)>,
}

impl Placer<'_> {
    fn radius(&mut self) -> f64 {
        let (lo, hi) = self.spec.r_range;
        self.rng.random_range(lo..=hi)
    }

    fn ring_at(&mut self, cx: f64, cy: f64, r: f64) -> RingSpec {
        let (alo, ahi) = self.spec.amplitude_range;
        RingSpec {
            cx,
            cy,
            r,
            amplitude: self.rng.random_range(alo..=ahi),
            ring_width: self.spec.ring_width,
            inner_rings: self.spec.inner_rings,
        }
    }

    fn inside(&self, cx: f64, cy: f64, r: f64) -> bool {
        let m = r + 3.0;
        cx - m >= 0.0 && cy - m >= 0.0 && cx + m <= self.spec.width as f64 && cy + m <= self.spec.height as f64
    }

    fn random_center(&mut self, r: f64) -> (f64, f64) {
        let m = r + 3.0;
        (
            self.rng.random_range(m..=self.spec.width as f64 - m),
            self.rng.random_range(m..=self.spec.height as f64 - m),
        )
    }

    fn touches(a: (f64, f64, f64), b: &RingSpec) -> bool {
        (a.0 - b.cx).hypot(a.1 - b.cy) < a.2 + b.r + 2.0 * CLUSTER_MARGIN_PX
    }

    /// Whether `(cx, cy, r)` is clear of every ring outside `group`.
    fn clear_of_others(&self, c: (f64, f64, f64), group: Option<usize>) -> bool {
        self.placed
            .iter()
            .all(|(p, g)| Some(*g) == group || !Self::touches(c, p))
    }

    fn place_isolated(&mut self, group: usize) -> bool {
        for _ in 0..200 {
            let r = self.radius();
            let (cx, cy) = self.random_center(r);
            if self.clear_of_others((cx, cy, r), None) {
                let ring = self.ring_at(cx, cy, r);
                self.placed.push((ring, group));
                return true;
            }
        }
        false
    }

    /// Place a ring in contact with a member of `group` while staying clear
    /// of every other group. Members stay resolvable: each pair differs by
    /// at least 5 px in center or 5 px in radius.
    fn place_member(&mut self, group: usize) -> bool {
        let members: Vec<RingSpec> = self
            .placed
            .iter()
            .filter(|(_, g)| *g == group)
            .map(|(p, _)| *p)
            .collect();
        for _ in 0..400 {
            let anchor = members[self.rng.random_range(0..members.len())];
            let r = self.radius();
            // Uniform over the disk of centers whose membership disks meet
            // the anchor's: what random scattering produces given contact.
            let reach = anchor.r + r + 2.0 * CLUSTER_MARGIN_PX;
            let d = reach * self.rng.random::<f64>().sqrt();
            let t: f64 = self.rng.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = (anchor.cx + d * t.cos(), anchor.cy + d * t.sin());
            if !self.inside(cx, cy, r) || !self.clear_of_others((cx, cy, r), Some(group)) {
                continue;
            }
            let resolvable = members
                .iter()
                .all(|m| (m.cx - cx).hypot(m.cy - cy) >= 5.0 || (m.r - r).abs() >= 5.0);
            if !resolvable {
                continue;
            }
            let ring = self.ring_at(cx, cy, r);
            self.placed.push((ring, group));
            return true;
        }
        false
    }
}

/// Lay out the rings of one corpus frame.
pub fn generate_frame(spec: &CorpusSpec, frame: usize) -> SceneSpec {
    let seed = frame_seed(spec.seed, frame);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = if spec.mean_rings > 0.0 {
        Poisson::new(spec.mean_rings).unwrap().sample(&mut rng) as usize
    } else {
        0
    };
    let mut clustered = (spec.cluster_fraction * n as f64).round() as usize;
    if clustered == 1 {
        clustered = if n >= 2 { 2 } else { 0 };
    }
    // Split the clustered rings into groups of two or three.
    let mut sizes = Vec::new();
    let mut left = clustered;
    while left > 0 {
        let s = if left == 2 || left == 4 || (left > 3 && rng.random_bool(0.5)) { 2 } else { 3 };
        let s = s.min(left);
        sizes.push(s);
        left -= s;
    }

    let mut placer = Placer {
        spec,
        rng,
        placed: Vec::new(),
    };
    let mut group = 0;
    for size in sizes {
        if !placer.place_isolated(group) {
            break;
        }
        for _ in 1..size {
            if !placer.place_member(group) {
                break;
            }
        }
        group += 1;
    }
    while placer.placed.len() < n {
        if !placer.place_isolated(group) {
            break;
        }
        group += 1;
    }
    SceneSpec {
        width: spec.width,
        height: spec.height,
        rings: placer.placed.into_iter().map(|(r, _)| r).collect(),
        noise_sd: spec.noise_sd,
        seed,
        background: spec.background,
    }
}

/// All frames of a corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SceneSpec>> {
    spec.validate()?;
    Ok((0..spec.frames).map(|f| generate_frame(spec, f)).collect())
}

/// Mean ring count and cluster fraction of a set of scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusShape {
    pub frames: usize,
    pub mean_rings: f64,
    pub cluster_fraction: f64,
}

pub fn corpus_shape(scenes: &[SceneSpec]) -> CorpusShape {
    let mut rings = 0usize;
    let mut clustered = 0usize;
    for s in scenes {
        let truth = s.truth();
        rings += truth.len();
        clustered += cluster_membership(&truth).iter().filter(|&&c| c).count();
    }
    CorpusShape {
        frames: scenes.len(),
        mean_rings: if scenes.is_empty() { 0.0 } else { rings as f64 / scenes.len() as f64 },
        cluster_fraction: if rings == 0 { 0.0 } else { clustered as f64 / rings as f64 },
    }
}

/// Truth CSV with columns `frame,cx,cy,r`.
pub fn write_truth_csv<W: Write>(truth: &[(usize, TruthRing)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "frame,cx,cy,r")?;
    for (f, t) in truth {
        writeln!(w, "{f},{},{},{}", t.cx, t.cy, t.r)?;
    }
    Ok(())
}

/// Read `frame,cx,cy,r` rows.
pub fn read_truth_csv<R: std::io::Read>(reader: R) -> Result<Vec<(usize, TruthRing)>> {
    #[derive(Deserialize)]
    struct Row {
        frame: usize,
        cx: f64,
        cy: f64,
        r: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: Row = rec.map_err(|e| Error::Input(format!("truth CSV row {}: {e}", i + 2)))?;
        out.push((row.frame, TruthRing { cx: row.cx, cy: row.cy, r: row.r }));
    }
    Ok(out)
}
