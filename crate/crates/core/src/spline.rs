//! Natural cubic smoothing splines.
//!
//! For knots `t` and data `y` the fit minimizes
//! `Σ (y_i − f(t_i))² + λ ∫ f''(t)² dt`. The solution is computed with the
//! Reinsch algorithm: one pentadiagonal system for the interior second
//! derivatives. λ can be given or chosen by generalized cross-validation;
//! the trace of the smoother matrix comes from the central band of the
//! inverse of that system.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    /// Minimize the generalized cross-validation score.
    Auto,
    /// Fixed penalty weight, in (time unit)³ per (value unit)⁰.
    Fixed(f64),
}

/// A fitted natural cubic spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFit {
    pub knots: Vec<f64>,
    /// Fitted values at the knots.
    pub values: Vec<f64>,
    /// Second derivatives at the knots; zero at both ends.
    pub second: Vec<f64>,
    pub lambda: f64,
    pub rss: f64,
    /// Trace of the smoother matrix.
    pub dof: f64,
    /// Noise standard deviation estimate `sqrt(rss / (n − dof))`.
    pub sigma_est: f64,
}

/// Pentadiagonal system `R + λ QᵀQ` over the interior knots.
struct Reinsch {
    h: Vec<f64>,
    // Bands of R (tridiagonal) and QᵀQ (pentadiagonal), by row offset.
    r0: Vec<f64>,
    r1: Vec<f64>,
    q0: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
}

/// `L D Lᵀ` factors of a symmetric pentadiagonal matrix.
struct Ldl {
    d: Vec<f64>,
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Reinsch {
    fn new(t: &[f64]) -> Self {
        let n = t.len();
        let m = n - 2;
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        // Column j of Q (interior knot j+1) has entries at rows j, j+1, j+2.
        let qc = |j: usize| {
            let (a, b) = (1.0 / h[j], 1.0 / h[j + 1]);
            [a, -a - b, b]
        };
        let mut r0 = vec![0.0; m];
        let mut r1 = vec![0.0; m];
        let mut q0 = vec![0.0; m];
        let mut q1 = vec![0.0; m];
        let mut q2 = vec![0.0; m];
        for j in 0..m {
            r0[j] = (h[j] + h[j + 1]) / 3.0;
            if j + 1 < m {
                r1[j] = h[j + 1] / 6.0;
            }
            let c = qc(j);
            q0[j] = c.iter().map(|v| v * v).sum();
            if j + 1 < m {
                let d = qc(j + 1);
                q1[j] = c[1] * d[0] + c[2] * d[1];
            }
            if j + 2 < m {
                let d = qc(j + 2);
                q2[j] = c[2] * d[0];
            }
        }
        Self { h, r0, r1, q0, q1, q2 }
    }

    fn m(&self) -> usize {
        self.r0.len()
    }

    /// `Qᵀ y`.
    fn qt(&self, y: &[f64]) -> Vec<f64> {
        (0..self.m())
            .map(|j| {
                let (a, b) = (1.0 / self.h[j], 1.0 / self.h[j + 1]);
                a * y[j] + (-a - b) * y[j + 1] + b * y[j + 2]
            })
            .collect()
    }

    /// `Q γ`, length n.
    fn q(&self, g: &[f64]) -> Vec<f64> {
        let n = self.m() + 2;
        let mut out = vec![0.0; n];
        for (j, &gj) in g.iter().enumerate() {
            let (a, b) = (1.0 / self.h[j], 1.0 / self.h[j + 1]);
            out[j] += a * gj;
            out[j + 1] += (-a - b) * gj;
            out[j + 2] += b * gj;
        }
        out
    }

    fn factor(&self, lambda: f64) -> Result<Ldl> {
        let m = self.m();
        let a0: Vec<f64> = (0..m).map(|i| self.r0[i] + lambda * self.q0[i]).collect();
        let a1: Vec<f64> = (0..m).map(|i| self.r1[i] + lambda * self.q1[i]).collect();
        let a2: Vec<f64> = (0..m).map(|i| lambda * self.q2[i]).collect();
        let mut d = vec![0.0; m];
        let mut l1 = vec![0.0; m];
        let mut l2 = vec![0.0; m];
        for i in 0..m {
            // A[i][i-2] = a2[i-2], A[i][i-1] = a1[i-1].
            if i >= 2 {
                l2[i] = a2[i - 2] / d[i - 2];
            }
            if i >= 1 {
                let mut v = a1[i - 1];
                if i >= 2 {
                    v -= l2[i] * d[i - 2] * l1[i - 1];
                }
                l1[i] = v / d[i - 1];
            }
            let mut di = a0[i];
            if i >= 1 {
                di -= l1[i] * l1[i] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i] * l2[i] * d[i - 2];
            }
            if !(di > 0.0) {
                return Err(Error::Input(format!("spline system is not positive definite (lambda {lambda})")));
            }
            d[i] = di;
        }
        Ok(Ldl { d, l1, l2 })
    }
}

impl Ldl {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = b.len();
        let mut z = b.to_vec();
        for i in 0..m {
            if i >= 1 {
                z[i] -= self.l1[i] * z[i - 1];
            }
            if i >= 2 {
                z[i] -= self.l2[i] * z[i - 2];
            }
        }
        for (zi, di) in z.iter_mut().zip(&self.d) {
            *zi /= di;
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                z[i] -= self.l1[i + 1] * z[i + 1];
            }
            if i + 2 < m {
                z[i] -= self.l2[i + 2] * z[i + 2];
            }
        }
        z
    }

    /// Diagonal and first two superdiagonals of the inverse.
    fn inverse_band(&self) -> [Vec<f64>; 3] {
        let m = self.d.len();
        let mut s0 = vec![0.0; m];
        let mut s1 = vec![0.0; m];
        let mut s2 = vec![0.0; m];
        let l1 = |i: usize| if i < m { self.l1[i] } else { 0.0 };
        let l2 = |i: usize| if i < m { self.l2[i] } else { 0.0 };
        let g = |v: &Vec<f64>, i: usize| if i < m { v[i] } else { 0.0 };
        for i in (0..m).rev() {
            s2[i] = if i + 2 < m {
                -l1(i + 1) * g(&s1, i + 1) - l2(i + 2) * g(&s0, i + 2)
            } else {
                0.0
            };
            s1[i] = if i + 1 < m {
                -l1(i + 1) * g(&s0, i + 1) - l2(i + 2) * g(&s1, i + 1)
            } else {
                0.0
            };
            s0[i] = 1.0 / self.d[i] - l1(i + 1) * s1[i] - l2(i + 2) * s2[i];
        }
        [s0, s1, s2]
    }
}

fn check_input(t: &[f64], y: &[f64]) -> Result<()> {
    if t.len() != y.len() {
        return Err(Error::Input(format!("{} times but {} values", t.len(), y.len())));
    }
    if t.len() < 4 {
        return Err(Error::Input(format!("smoothing needs at least 4 samples, got {}", t.len())));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite sample".into()));
    }
    if let Some(w) = t.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Input(format!(
            "sample times must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

struct Solution {
    values: Vec<f64>,
    gamma: Vec<f64>,
    rss: f64,
    dof: f64,
}

fn solve_at(sys: &Reinsch, y: &[f64], qty: &[f64], lambda: f64) -> Result<Solution> {
    let n = y.len();
    let ldl = sys.factor(lambda)?;
    let gamma = ldl.solve(qty);
    let qg = sys.q(&gamma);
    let values: Vec<f64> = y.iter().zip(&qg).map(|(yi, q)| yi - lambda * q).collect();
    let rss = y.iter().zip(&values).map(|(a, b)| (a - b) * (a - b)).sum();
    // tr S = n − λ tr(A⁻¹ QᵀQ), both matrices banded.
    let [s0, s1, s2] = ldl.inverse_band();
    let mut tr = 0.0;
    for i in 0..sys.m() {
        tr += s0[i] * sys.q0[i] + 2.0 * s1[i] * sys.q1[i] + 2.0 * s2[i] * sys.q2[i];
    }
    Ok(Solution {
        values,
        gamma,
        rss,
        dof: n as f64 - lambda * tr,
    })
}

fn gcv(n: usize, s: &Solution) -> f64 {
    let df = n as f64 - s.dof;
    n as f64 * s.rss / (df * df)
}

/// Fit a natural cubic smoothing spline.
pub fn fit_smoothing_spline(t: &[f64], y: &[f64], lambda: Lambda) -> Result<SplineFit> {
    check_input(t, y)?;
    let n = t.len();
    let sys = Reinsch::new(t);
    let qty = sys.qt(y);
    let lambda = match lambda {
        Lambda::Fixed(l) if l >= 0.0 && l.is_finite() => l,
        Lambda::Fixed(l) => return Err(Error::Input(format!("lambda must be >= 0, got {l}"))),
        Lambda::Auto => select_lambda(&sys, y, &qty)?,
    };
    let s = solve_at(&sys, y, &qty, lambda)?;
    let df = n as f64 - s.dof;
    let sigma_est = if df > 1e-9 { (s.rss / df).sqrt() } else { 0.0 };
    let mut second = vec![0.0; n];
    second[1..n - 1].copy_from_slice(&s.gamma);
    Ok(SplineFit {
        knots: t.to_vec(),
        values: s.values,
        second,
        lambda,
        rss: s.rss,
        dof: s.dof,
        sigma_est,
    })
}

/// Grid search over the dimensionless penalty, then golden-section
/// refinement around the best grid point.
fn select_lambda(sys: &Reinsch, y: &[f64], qty: &[f64]) -> Result<f64> {
    let n = y.len();
    let scale = sys.r0.iter().sum::<f64>() / sys.q0.iter().sum::<f64>();
    let score = |p: f64| -> Result<f64> {
        let s = solve_at(sys, y, qty, scale * 10f64.powf(p))?;
        Ok(gcv(n, &s))
    };
    let (lo, hi, step) = (-6.0, 14.0, 0.25);
    let steps = ((hi - lo) / step) as usize;
    let mut best = (f64::INFINITY, lo);
    for k in 0..=steps {
        let p = lo + k as f64 * step;
        let v = score(p)?;
        if v < best.0 {
            best = (v, p);
        }
    }
    let (mut a, mut b) = (best.1 - step, best.1 + step);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (score(c)?, score(d)?);
    for _ in 0..40 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = score(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = score(d)?;
        }
    }
    let p = if fc.min(fd) < best.0 { if fc < fd { c } else { d } } else { best.1 };
    Ok(scale * 10f64.powf(p))
}

impl SplineFit {
    /// Segment index and offset for `t`; `None` outside the knot range.
    fn locate(&self, t: f64) -> Option<(usize, f64)> {
        let k = &self.knots;
        let n = k.len();
        if !(t >= k[0] && t <= k[n - 1]) {
            return None;
        }
        let i = k.partition_point(|&v| v <= t).clamp(1, n - 1) - 1;
        Some((i, t - k[i]))
    }

    /// Polynomial coefficients `[a, b, c, d]` of segment `i`.
    fn segment(&self, i: usize) -> [f64; 4] {
        let h = self.knots[i + 1] - self.knots[i];
        let (g0, g1) = (self.values[i], self.values[i + 1]);
        let (s0, s1) = (self.second[i], self.second[i + 1]);
        [g0, (g1 - g0) / h - h * (2.0 * s0 + s1) / 6.0, s0 / 2.0, (s1 - s0) / (6.0 * h)]
    }

    /// Value, first and second derivative at `t`. Beyond the end knots
    /// the spline continues linearly.
    pub fn eval_all(&self, t: f64) -> [f64; 3] {
        let n = self.knots.len();
        let (i, u) = match self.locate(t) {
            Some(v) => v,
            None => {
                let end = if t < self.knots[0] { 0 } else { n - 1 };
                let [v, d1, _] = self.eval_all(self.knots[end]);
                return [v + d1 * (t - self.knots[end]), d1, 0.0];
            }
        };
        let [a, b, c, d] = self.segment(i);
        [
            a + u * (b + u * (c + u * d)),
            b + u * (2.0 * c + 3.0 * d * u),
            2.0 * c + 6.0 * d * u,
        ]
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval_all(t)[0]
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.eval_all(t)[1]
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        self.eval_all(t)[2]
    }
}

/// Independent smoothing splines for every coordinate of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedTrajectory {
    pub id: usize,
    pub knots: Vec<f64>,
    pub coords: Vec<SplineFit>,
}

impl SmoothedTrajectory {
    pub fn sigma_est(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c.sigma_est).collect()
    }

    pub fn position(&self, t: f64) -> Vec<f64> {
        self.coords.iter().map(|c| c.value(t)).collect()
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        self.coords.iter().map(|c| c.derivative(t)).collect()
    }

    pub fn acceleration(&self, t: f64) -> Vec<f64> {
        self.coords.iter().map(|c| c.second_derivative(t)).collect()
    }
}

/// Smooth a trajectory. Sample times are `frame · dt`.
pub fn smooth<const D: usize>(traj: &Trajectory<D>, lambda: Lambda, dt: f64) -> Result<SmoothedTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::Input(format!("frame interval must be positive, got {dt}")));
    }
    let t: Vec<f64> = traj.samples.iter().map(|s| s.frame as f64 * dt).collect();
    let coords = (0..D)
        .map(|k| {
            let y: Vec<f64> = traj.samples.iter().map(|s| s.pos[k]).collect();
            fit_smoothing_spline(&t, &y, lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SmoothedTrajectory { id: traj.id, knots: t, coords })
}

/// Per-knot rows `traj_id,t,x,y,z,vx,vy,vz,ax,ay,az`.
pub fn write_smoothed_csv<W: Write>(trajs: &[SmoothedTrajectory], mut w: W) -> std::io::Result<()> {
    writeln!(w, "traj_id,t,x,y,z,vx,vy,vz,ax,ay,az")?;
    for s in trajs {
        for &t in &s.knots {
            let mut row = vec![s.id.to_string(), t.to_string()];
            let evals: Vec<[f64; 3]> = s.coords.iter().map(|c| c.eval_all(t)).collect();
            for k in 0..3 {
                row.extend(evals.iter().map(|e| e[k].to_string()));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Per-trajectory entry of the smoothing summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSummary {
    pub traj_id: usize,
    pub samples: usize,
    pub lambda: Vec<f64>,
    pub sigma_est: Vec<f64>,
}

impl From<&SmoothedTrajectory> for SmoothingSummary {
    fn from(s: &SmoothedTrajectory) -> Self {
        Self {
            traj_id: s.id,
            samples: s.knots.len(),
            lambda: s.coords.iter().map(|c| c.lambda).collect(),
            sigma_est: s.sigma_est(),
        }
    }
}
