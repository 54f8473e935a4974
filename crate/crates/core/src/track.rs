//! Predictive linking of per-frame positions into trajectories.
//!
//! Every open trajectory predicts its next position by extrapolating a
//! quadratic through its last three samples (a line through two, the last
//! position for one). Prediction/detection pairs inside the gate are matched
//! greedily in ascending squared error. A trajectory may go unmatched for up
//! to `memory` consecutive frames before it is closed; the frames it coasts
//! through are left empty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames a trajectory may miss before it is closed.
pub const DEFAULT_MEMORY: usize = 3;
/// Acquisition rate assumed when no other is given, Hz.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Largest accepted distance between prediction and detection.
    pub max_displacement: f64,
    pub memory: usize,
    /// Shorter trajectories are dissolved into unlinked samples.
    pub min_length: usize,
}

impl LinkConfig {
    /// Gate `max_displacement`, default memory, one second minimum length at
    /// the default frame rate.
    pub fn new(max_displacement: f64) -> Self {
        Self::with_frame_rate(max_displacement, DEFAULT_FRAME_RATE_HZ)
    }

    /// Minimum length of one second at `frame_rate_hz`.
    pub fn with_frame_rate(max_displacement: f64, frame_rate_hz: f64) -> Self {
        Self {
            max_displacement,
            memory: DEFAULT_MEMORY,
            min_length: frame_rate_hz.ceil().max(1.0) as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_displacement > 0.0) || !self.max_displacement.is_finite() {
            return Err(Error::Config(format!(
                "max_displacement must be positive, got {}",
                self.max_displacement
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample<const D: usize> {
    pub frame: usize,
    #[serde(with = "serde_arrays")]
    pub pos: [f64; D],
}

mod serde_arrays {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(v: &[f64; D], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(d: De) -> Result<[f64; D], De::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into().map_err(|v: Vec<f64>| De::Error::invalid_length(v.len(), &"a fixed-size array"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<const D: usize> {
    pub id: usize,
    pub samples: Vec<Sample<D>>,
    /// Frames skipped between consecutive samples.
    pub gap_count: usize,
}

impl<const D: usize> Trajectory<D> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_frame(&self) -> usize {
        self.samples[0].frame
    }

    pub fn last_frame(&self) -> usize {
        self.samples[self.samples.len() - 1].frame
    }

    /// Predicted position at `frame` from the last three samples.
    pub fn predict(&self, frame: usize) -> [f64; D] {
        let n = self.samples.len();
        let tail = &self.samples[n.saturating_sub(3)..];
        extrapolate(tail, frame as f64)
    }
}

/// Lagrange extrapolation through the given samples (at most three).
fn extrapolate<const D: usize>(tail: &[Sample<D>], t: f64) -> [f64; D] {
    let ts: Vec<f64> = tail.iter().map(|s| s.frame as f64).collect();
    let mut out = [0.0; D];
    for (i, s) in tail.iter().enumerate() {
        let mut w = 1.0;
        for (j, &tj) in ts.iter().enumerate() {
            if j != i {
                w *= (t - tj) / (ts[i] - tj);
            }
        }
        for (o, p) in out.iter_mut().zip(s.pos) {
            *o += w * p;
        }
    }
    out
}

fn dist2<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cmp_pos<const D: usize>(a: &[f64; D], b: &[f64; D]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult<const D: usize> {
    pub trajectories: Vec<Trajectory<D>>,
    /// Detections not in any kept trajectory.
    pub unlinked: Vec<Sample<D>>,
}

/// Link frame-indexed position lists. `frames[f]` holds the positions
/// detected in frame `f`.
pub fn link_frames<const D: usize>(frames: &[Vec<[f64; D]>], cfg: &LinkConfig) -> Result<LinkResult<D>> {
    cfg.validate()?;
    let gate2 = cfg.max_displacement * cfg.max_displacement;
    let mut open: Vec<Trajectory<D>> = Vec::new();
    let mut closed: Vec<Trajectory<D>> = Vec::new();
    let mut next_id = 0;

    for (f, dets) in frames.iter().enumerate() {
        let preds: Vec<[f64; D]> = open.iter().map(|t| t.predict(f)).collect();
        let mut pairs = Vec::new();
        for (ti, p) in preds.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                let c = dist2(p, d);
                if c <= gate2 {
                    pairs.push((c, ti, di));
                }
            }
        }
        // Ties fall back to positions so that input order never matters.
        pairs.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| cmp_pos(&dets[a.2], &dets[b.2]))
                .then_with(|| {
                    let (p, q) = (&open[a.1], &open[b.1]);
                    cmp_pos(&p.samples[p.len() - 1].pos, &q.samples[q.len() - 1].pos)
                        .then(p.first_frame().cmp(&q.first_frame()))
                })
        });
        let mut t_used = vec![false; open.len()];
        let mut d_used = vec![false; dets.len()];
        for (_, ti, di) in pairs {
            if t_used[ti] || d_used[di] {
                continue;
            }
            t_used[ti] = true;
            d_used[di] = true;
            let t = &mut open[ti];
            t.gap_count += f - t.last_frame() - 1;
            t.samples.push(Sample { frame: f, pos: dets[di] });
        }

        let mut still_open = Vec::with_capacity(open.len());
        for (ti, t) in open.into_iter().enumerate() {
            if t_used[ti] || f - t.last_frame() <= cfg.memory {
                still_open.push(t);
            } else {
                closed.push(t);
            }
        }
        open = still_open;

        let mut fresh: Vec<[f64; D]> = dets
            .iter()
            .zip(&d_used)
            .filter(|(_, &u)| !u)
            .map(|(d, _)| *d)
            .collect();
        fresh.sort_by(cmp_pos);
        for pos in fresh {
            open.push(Trajectory {
                id: next_id,
                samples: vec![Sample { frame: f, pos }],
                gap_count: 0,
            });
            next_id += 1;
        }
    }
    closed.extend(open);
    closed.sort_by_key(|t| t.id);

    let mut result = LinkResult {
        trajectories: Vec::new(),
        unlinked: Vec::new(),
    };
    for t in closed {
        if t.len() >= cfg.min_length.max(1) {
            result.trajectories.push(t);
        } else {
            result.unlinked.extend(t.samples);
        }
    }
    result.unlinked.sort_by(|a, b| a.frame.cmp(&b.frame).then_with(|| cmp_pos(&a.pos, &b.pos)));
    Ok(result)
}

#[derive(Debug, Deserialize)]
struct PositionRow {
    frame: usize,
    x_um: f64,
    y_um: f64,
    z_um: f64,
}

/// Read `frame,x_um,y_um,z_um` rows into per-frame lists. Frames with no
/// rows are empty.
pub fn read_positions_csv<R: Read>(reader: R) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut frames: Vec<Vec<[f64; 3]>> = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: PositionRow = rec.map_err(|e| Error::Input(format!("positions CSV row {}: {e}", i + 2)))?;
        if frames.len() <= row.frame {
            frames.resize(row.frame + 1, Vec::new());
        }
        frames[row.frame].push([row.x_um, row.y_um, row.z_um]);
    }
    Ok(frames)
}

pub fn write_positions_csv<W: Write>(frames: &[Vec<[f64; 3]>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "frame,x_um,y_um,z_um")?;
    for (f, ps) in frames.iter().enumerate() {
        for p in ps {
            writeln!(w, "{f},{},{},{}", p[0], p[1], p[2])?;
        }
    }
    Ok(())
}

/// Trajectories as `traj_id,frame,x,y,z`.
pub fn write_trajectories_csv<W: Write>(trajs: &[Trajectory<3>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "traj_id,frame,x,y,z")?;
    for t in trajs {
        for s in &t.samples {
            writeln!(w, "{},{},{},{},{}", t.id, s.frame, s.pos[0], s.pos[1], s.pos[2])?;
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    traj_id: usize,
    frame: usize,
    x: f64,
    y: f64,
    z: f64,
}

pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<Trajectory<3>>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out: Vec<Trajectory<3>> = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: TrajectoryRow =
            rec.map_err(|e| Error::Input(format!("trajectories CSV row {}: {e}", i + 2)))?;
        let sample = Sample { frame: row.frame, pos: [row.x, row.y, row.z] };
        match out.last_mut() {
            Some(t) if t.id == row.traj_id => {
                if row.frame <= t.last_frame() {
                    return Err(Error::Input(format!(
                        "trajectories CSV row {}: frames of trajectory {} are not increasing",
                        i + 2,
                        row.traj_id
                    )));
                }
                t.gap_count += row.frame - t.last_frame() - 1;
                t.samples.push(sample);
            }
            _ => out.push(Trajectory { id: row.traj_id, samples: vec![sample], gap_count: 0 }),
        }
    }
    Ok(out)
}
