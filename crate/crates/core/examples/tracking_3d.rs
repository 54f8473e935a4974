//! Full chain on a synthetic 3D flow: detect rings, convert radius to
//! depth, link positions into trajectories and smooth them.
//!
//!     cargo run --release --example tracking_3d -- [frames] [particles] [seed]

use ring_hough::batch;
use ring_hough::calib::localize;
use ring_hough::spline::{smooth, Lambda};
use ring_hough::synth::{self, flow};
use ring_hough::track::{link_frames, LinkConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let frames = args.first().map_or(Ok(300), |s| s.parse())?;
    let particles = args.get(1).map_or(Ok(6), |s| s.parse())?;
    let seed = args.get(2).map_or(Ok(11), |s| s.parse())?;

    let spec = flow::FlowSpec::new(frames, particles, seed);
    let curve = flow::flow_curve();
    let corpus = flow::generate_flow(&spec, &curve)?;
    let images = corpus
        .scenes
        .iter()
        .map(|s| synth::render_scene(s).map(|(img, _)| img))
        .collect::<Result<Vec<_>, _>>()?;

    let cfg = spec.detector_config(&curve);
    let out = batch::detect_images(&images, &cfg, 1)?;
    let mut positions = vec![Vec::new(); frames];
    let mut dropped = 0;
    for f in &out.frames {
        let (p, d) = localize(&f.detections, &curve, spec.pixel_size_um);
        positions[f.frame] = p;
        dropped += d;
    }
    println!("{} detections, {dropped} outside the calibrated range", out.report.detections);

    let link = link_frames(&positions, &LinkConfig::new(1.0))?;
    println!("{} trajectories, {} unlinked samples", link.trajectories.len(), link.unlinked.len());

    let dt = 1.0 / 70.0;
    let mut sigma = [0.0; 3];
    let mut n = 0;
    for t in &link.trajectories {
        let s = smooth(t, Lambda::Auto, dt)?;
        let est = s.sigma_est();
        println!("trajectory {:3}: {} samples, sigma x {:.4} y {:.4} z {:.4} um", t.id, t.len(), est[0], est[1], est[2]);
        for k in 0..3 {
            sigma[k] += est[k] * est[k];
        }
        n += 1;
    }
    let sigma = sigma.map(|s| (s / n.max(1) as f64).sqrt());
    let lateral = (0.5 * (sigma[0] * sigma[0] + sigma[1] * sigma[1])).sqrt();

    // A circle fit has radius error 1/sqrt(2) of the center error; depth
    // error is radius error times the refractive ratio over the slope.
    let mut inv_slope_sq = 0.0;
    let mut m = 0;
    for frame in &corpus.positions {
        for p in frame {
            inv_slope_sq += curve.slope_at(p[2] / curve.refractive_ratio).powi(-2);
            m += 1;
        }
    }
    let predicted =
        curve.refractive_ratio * (inv_slope_sq / m as f64).sqrt() / (std::f64::consts::SQRT_2 * spec.pixel_size_um);
    println!("sigma x {:.4} y {:.4} z {:.4} um", sigma[0], sigma[1], sigma[2]);
    println!("axial/lateral ratio {:.2}, predicted from calibration slope {:.2}", sigma[2] / lateral, predicted);
    Ok(())
}
