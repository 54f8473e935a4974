//! Directed ridge pixels: negative least principal curvature that is a
//! local minimum along its own principal direction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::imaging::CurvatureField;

/// A ridge pixel and the unit principal direction at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedRidge {
    pub x: u32,
    pub y: u32,
    pub dx: f64,
    pub dy: f64,
    pub kappa: f64,
}

/// Nearest 8-connected step for a unit direction.
#[inline]
fn step(d: f64) -> isize {
    d.round() as isize
}

/// Scan the curvature field for directed ridges, in row-major order.
///
/// A pixel qualifies when `kappa < curvature_threshold` and its kappa is no
/// larger than at the two 8-neighbors nearest to `(x ± dx, y ± dy)`. On an
/// exact tie the pixel later in row-major order is suppressed. Pixels whose
/// Hessian is isotropic, or whose neighbors fall outside the valid band,
/// never qualify.
pub fn detect_ridges(curv: &CurvatureField, curvature_threshold: f64) -> Vec<DirectedRidge> {
    let mut out = Vec::new();
    detect_ridges_into(curv, curvature_threshold, &mut out);
    out
}

/// [`detect_ridges`] into a reusable buffer (cleared first).
pub fn detect_ridges_into(
    curv: &CurvatureField,
    curvature_threshold: f64,
    out: &mut Vec<DirectedRidge>,
) {
    out.clear();
    let w = curv.width;
    let h = curv.height;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let k = curv.kappa[i];
            if !(k < curvature_threshold) || !curv.is_valid(i) || curv.is_degenerate(i) {
                continue;
            }
            let (dx, dy) = (curv.dir_x[i], curv.dir_y[i]);
            let (sx, sy) = (step(dx), step(dy));
            let mut is_min = true;
            for sign in [1isize, -1] {
                let nx = x as isize + sign * sx;
                let ny = y as isize + sign * sy;
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    is_min = false;
                    break;
                }
                let j = ny as usize * w + nx as usize;
                if !curv.is_valid(j) {
                    is_min = false;
                    break;
                }
                let kn = curv.kappa[j];
                if k > kn || (k == kn && j < i) {
                    is_min = false;
                    break;
                }
            }
            if is_min {
                out.push(DirectedRidge {
                    x: x as u32,
                    y: y as u32,
                    dx,
                    dy,
                    kappa: k,
                });
            }
        }
    }
}

/// Debug dump with columns `x,y,dx,dy,kappa`.
pub fn write_ridges_csv<W: Write>(ridges: &[DirectedRidge], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x,y,dx,dy,kappa")?;
    for r in ridges {
        writeln!(w, "{},{},{},{},{}", r.x, r.y, r.dx, r.dy, r.kappa)?;
    }
    Ok(())
}
