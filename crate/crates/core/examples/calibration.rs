//! Fit a radius-to-depth curve from noisy stage sweeps of tracers with
//! unknown offsets, then convert radii to depth.
//!
//!     cargo run --release --example calibration

use ring_hough::calib;
use ring_hough::synth::flow;

fn main() -> anyhow::Result<()> {
    let truth = flow::flow_curve();
    let samples = flow::calibration_sweeps(&truth, 6, 0.25, 0.05, 4)?;
    let rep = calib::calibrate(&samples, truth.refractive_ratio)?;
    let c = &rep.curve;
    println!("fitted r = {:.5}·dz² + {:.5}·dz + {:.5}  (truth {:.5}, {:.5}, {:.5})", c.a, c.b, c.c, truth.a, truth.b, truth.c);
    println!("depth rmse {:.4} µm, valid radii {:.2}..{:.2} px", c.rmse_z, c.valid_r[0], c.valid_r[1]);
    let mut shifts: Vec<_> = rep.shifts.iter().collect();
    shifts.sort_by_key(|(id, _)| **id);
    for (id, s) in shifts {
        println!("tracer {id}: stage offset {s:+.3} µm");
    }
    for r in [12.0, 16.0, 20.0] {
        println!("r = {r:4.1} px -> z = {:.3} µm", c.radius_to_z(r)?);
    }
    Ok(())
}
