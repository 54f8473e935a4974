//! Producer/consumer worker pool over image sequences.
//!
//! One producer thread decodes frames in order into a bounded queue; each
//! worker owns its own [`Detector`] (and so its own accumulator slab) and
//! pulls frames from the queue. Results are reordered by frame index, so
//! output never depends on the worker count.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, GrayImage};
use crate::pipeline::{Detector, DetectorConfig};
use crate::refine::RingDetection;

/// Per-worker frame processing state.
pub trait FrameProcessor: Send {
    fn process(&mut self, img: &GrayImage) -> Result<Vec<RingDetection>>;

    fn slab_bytes(&self) -> usize {
        0
    }

    fn slab_cells(&self) -> usize {
        0
    }
}

impl FrameProcessor for Detector {
    fn process(&mut self, img: &GrayImage) -> Result<Vec<RingDetection>> {
        self.detect(img)
    }

    fn slab_bytes(&self) -> usize {
        Detector::slab_bytes(self)
    }

    fn slab_cells(&self) -> usize {
        Detector::slab_cells(self)
    }
}

/// A frame that produced no result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub worker: usize,
    pub frames: usize,
    pub busy_seconds: f64,
    pub fps: f64,
}

/// Summary of one batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames_total: usize,
    pub frames_processed: usize,
    pub skipped: Vec<SkippedFrame>,
    pub workers: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub per_worker: Vec<WorkerStats>,
    /// Largest slab held by any single worker.
    pub peak_slab_bytes: usize,
    pub peak_slab_cells: usize,
    pub detections: usize,
}

impl RunReport {
    pub fn is_partial(&self) -> bool {
        !self.skipped.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Detections of one successfully processed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: usize,
    pub detections: Vec<RingDetection>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Processed frames in ascending frame order.
    pub frames: Vec<FrameDetections>,
    pub report: RunReport,
}

enum Outcome {
    Done(Vec<RingDetection>),
    Failed(String),
}

struct WorkerResult {
    frame: usize,
    outcome: Outcome,
}

/// Run `make_processor()` on `workers` threads over frames `0..frames`,
/// loading each with `load` on a single producer thread.
pub fn run_pool<P, F, L>(frames: usize, load: L, workers: usize, make_processor: F) -> Result<BatchOutput>
where
    P: FrameProcessor,
    F: Fn() -> P + Sync,
    L: Fn(usize) -> Result<GrayImage> + Send,
{
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let start = Instant::now();
    let (job_tx, job_rx) = bounded::<(usize, GrayImage)>(2 * workers);
    let (res_tx, res_rx) = unbounded::<WorkerResult>();

    let (mut results, per_worker, peak) = std::thread::scope(|s| {
        let producer_results = res_tx.clone();
        s.spawn(move || {
            for frame in 0..frames {
                match load(frame) {
                    Ok(img) => {
                        if job_tx.send((frame, img)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        log::warn!("frame {frame}: {e}");
                        let _ = producer_results.send(WorkerResult {
                            frame,
                            outcome: Outcome::Failed(e.to_string()),
                        });
                    }
                }
            }
        });

        let handles: Vec<_> = (0..workers)
            .map(|worker| {
                let rx = job_rx.clone();
                let tx = res_tx.clone();
                let make = &make_processor;
                s.spawn(move || {
                    let mut proc = make();
                    let mut stats = WorkerStats { worker, frames: 0, busy_seconds: 0.0, fps: 0.0 };
                    let (mut peak_bytes, mut peak_cells) = (0, 0);
                    for (frame, img) in rx.iter() {
                        let t0 = Instant::now();
                        let outcome = match catch_unwind(AssertUnwindSafe(|| proc.process(&img))) {
                            Ok(Ok(d)) => Outcome::Done(d),
                            Ok(Err(e)) => Outcome::Failed(e.to_string()),
                            Err(panic) => {
                                // The processor may be half-updated; start over.
                                proc = make();
                                Outcome::Failed(format!("worker panicked: {}", panic_message(&panic)))
                            }
                        };
                        stats.busy_seconds += t0.elapsed().as_secs_f64();
                        if let Outcome::Done(_) = outcome {
                            stats.frames += 1;
                        } else if let Outcome::Failed(reason) = &outcome {
                            log::warn!("frame {frame}: {reason}");
                        }
                        peak_bytes = peak_bytes.max(proc.slab_bytes());
                        peak_cells = peak_cells.max(proc.slab_cells());
                        let _ = tx.send(WorkerResult { frame, outcome });
                    }
                    if stats.busy_seconds > 0.0 {
                        stats.fps = stats.frames as f64 / stats.busy_seconds;
                    }
                    (stats, peak_bytes, peak_cells)
                })
            })
            .collect();
        drop(job_rx);
        drop(res_tx);

        let results: Vec<WorkerResult> = res_rx.iter().collect();
        let mut per_worker = Vec::with_capacity(workers);
        let mut peak = (0, 0);
        for h in handles {
            let (stats, bytes, cells) = h.join().expect("worker loop does not panic");
            peak = (peak.0.max(bytes), peak.1.max(cells));
            per_worker.push(stats);
        }
        (results, per_worker, peak)
    });

    results.sort_by_key(|r| r.frame);
    let mut out = Vec::with_capacity(results.len());
    let mut skipped = Vec::new();
    for r in results {
        match r.outcome {
            Outcome::Done(mut detections) => {
                sort_detections(&mut detections);
                out.push(FrameDetections { frame: r.frame, detections });
            }
            Outcome::Failed(reason) => skipped.push(SkippedFrame { frame: r.frame, reason }),
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let report = RunReport {
        frames_total: frames,
        frames_processed: out.len(),
        skipped,
        workers,
        wall_seconds,
        fps: if wall_seconds > 0.0 { out.len() as f64 / wall_seconds } else { 0.0 },
        per_worker,
        peak_slab_bytes: peak.0,
        peak_slab_cells: peak.1,
        detections: out.iter().map(|f| f.detections.len()).sum(),
    };
    Ok(BatchOutput { frames: out, report })
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

/// Detect rings in image files, frame index = position in `paths`.
pub fn detect_files(paths: &[PathBuf], cfg: &DetectorConfig, workers: usize) -> Result<BatchOutput> {
    run_pool(paths.len(), |i| load_image(&paths[i]), workers, || Detector::new(cfg.clone()))
}

/// Detect rings in in-memory frames.
pub fn detect_images(images: &[GrayImage], cfg: &DetectorConfig, workers: usize) -> Result<BatchOutput> {
    run_pool(images.len(), |i| Ok(images[i].clone()), workers, || Detector::new(cfg.clone()))
}

/// Order detections by (cx, cy).
pub fn sort_detections(dets: &mut [RingDetection]) {
    dets.sort_by(|a, b| a.cx.total_cmp(&b.cx).then(a.cy.total_cmp(&b.cy)).then(a.r.total_cmp(&b.r)));
}

pub const DETECTIONS_HEADER: [&str; 7] = ["frame", "cx", "cy", "r", "score", "inliers", "rms_residual"];

/// Write `frame,cx,cy,r,score,inliers,rms_residual`, rows ordered by
/// (frame, cx, cy).
pub fn write_detections_csv<W: Write>(frames: &[FrameDetections], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(DETECTIONS_HEADER).map_err(csv_err)?;
    let mut ordered: Vec<&FrameDetections> = frames.iter().collect();
    ordered.sort_by_key(|f| f.frame);
    for f in ordered {
        let mut dets = f.detections.clone();
        sort_detections(&mut dets);
        for d in dets {
            wr.write_record(&[
                f.frame.to_string(),
                d.cx.to_string(),
                d.cy.to_string(),
                d.r.to_string(),
                d.score.to_string(),
                d.inliers.to_string(),
                d.rms_residual.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn save_detections_csv(frames: &[FrameDetections], path: &Path) -> Result<()> {
    write_detections_csv(frames, std::fs::File::create(path)?)
}

/// Read a detections CSV back into per-frame groups. Frames with no rows
/// do not appear.
pub fn read_detections_csv(path: &Path) -> Result<Vec<FrameDetections>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out: Vec<FrameDetections> = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                Error::Input(format!("{}: line {}: bad field {}", path.display(), line + 2, DETECTIONS_HEADER[i]))
            })
        };
        let frame = field(0)? as usize;
        let det = RingDetection {
            cx: field(1)?,
            cy: field(2)?,
            r: field(3)?,
            score: field(4)?,
            inliers: field(5)? as usize,
            rms_residual: field(6)?,
        };
        match out.last_mut() {
            Some(f) if f.frame == frame => f.detections.push(det),
            _ => out.push(FrameDetections { frame, detections: vec![det] }),
        }
    }
    out.sort_by_key(|f| f.frame);
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(e.to_string())
}

/// Throughput of one worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub workers: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub per_worker_fps: Vec<f64>,
    /// `fps` over the first run's `fps`.
    pub speedup: f64,
}

/// Streamed detector against the full-array oracle on the same frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub frames: usize,
    pub streamed_seconds: f64,
    pub oracle_seconds: f64,
    pub speedup: f64,
    /// Same detections, fit parameters equal to 1e-9 relative.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub detections: usize,
    pub runs: Vec<BenchRun>,
    /// Detections CSV bytes equal across all worker counts.
    pub identical: bool,
    pub peak_slab_bytes: usize,
    pub oracle: Option<OracleComparison>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Detect `images` once per worker count and, when `oracle_frames > 0`,
/// time the oracle on the first `oracle_frames` images.
pub fn benchmark(
    images: &[GrayImage],
    cfg: &DetectorConfig,
    worker_counts: &[usize],
    oracle_frames: usize,
) -> Result<BenchReport> {
    if images.is_empty() || worker_counts.is_empty() {
        return Err(Error::Config("benchmark needs frames and at least one worker count".into()));
    }
    let mut runs: Vec<BenchRun> = Vec::new();
    let mut reference: Option<Vec<u8>> = None;
    let mut identical = true;
    let (mut detections, mut peak) = (0, 0);
    for &workers in worker_counts {
        let out = detect_images(images, cfg, workers)?;
        let mut csv = Vec::new();
        write_detections_csv(&out.frames, &mut csv)?;
        match &reference {
            Some(r) => identical &= *r == csv,
            None => reference = Some(csv),
        }
        let rep = out.report;
        detections = rep.detections;
        peak = peak.max(rep.peak_slab_bytes);
        let base = runs.first().map_or(rep.fps, |r| r.fps);
        runs.push(BenchRun {
            workers,
            wall_seconds: rep.wall_seconds,
            fps: rep.fps,
            per_worker_fps: rep.per_worker.iter().map(|w| w.fps).collect(),
            speedup: if base > 0.0 { rep.fps / base } else { 0.0 },
        });
    }
    let oracle = (oracle_frames > 0).then(|| compare_oracle(&images[..oracle_frames.min(images.len())], cfg)).transpose()?;
    Ok(BenchReport {
        frames: images.len(),
        width: images[0].width(),
        height: images[0].height(),
        detections,
        runs,
        identical,
        peak_slab_bytes: peak,
        oracle,
    })
}

fn compare_oracle(images: &[GrayImage], cfg: &DetectorConfig) -> Result<OracleComparison> {
    let mut det = Detector::new(cfg.clone());
    let t0 = Instant::now();
    let streamed = images.iter().map(|img| det.detect(img)).collect::<Result<Vec<_>>>()?;
    let streamed_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let oracle = images
        .iter()
        .map(|img| crate::pipeline::detect_rings_oracle(img, cfg))
        .collect::<Result<Vec<_>>>()?;
    let oracle_seconds = t1.elapsed().as_secs_f64();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    let identical = streamed.iter().zip(&oracle).all(|(s, o)| {
        s.len() == o.len()
            && s.iter().zip(o).all(|(a, b)| {
                close(a.cx, b.cx) && close(a.cy, b.cy) && close(a.r, b.r) && close(a.score, b.score) && a.inliers == b.inliers
            })
    });
    Ok(OracleComparison {
        frames: images.len(),
        streamed_seconds,
        oracle_seconds,
        speedup: if streamed_seconds > 0.0 { oracle_seconds / streamed_seconds } else { 0.0 },
        identical,
    })
}
