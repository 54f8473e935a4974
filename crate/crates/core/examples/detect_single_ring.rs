//! Detect one rendered particle ring and compare with the truth.
//!
//!     cargo run --release --example detect_single_ring

use ring_hough::synth::{self, RingSpec, SceneSpec};
use ring_hough::{detect_rings, DetectorConfig};

fn main() -> anyhow::Result<()> {
    let ring = RingSpec::new(80.4, 71.7, 27.3);
    let scene = SceneSpec { width: 160, height: 150, rings: vec![ring], noise_sd: 0.03, seed: 1, background: 0.1 };
    let (img, _) = synth::render_scene(&scene)?;

    let mut cfg = DetectorConfig::new(2.5, 10, 50);
    cfg.curvature_threshold = -0.017;
    for d in detect_rings(&img, &cfg)? {
        println!(
            "found  cx {:7.3}  cy {:7.3}  r {:7.3}  score {:.2}  inliers {}",
            d.cx, d.cy, d.r, d.score, d.inliers
        );
    }
    println!("truth  cx {:7.3}  cy {:7.3}  r {:7.3}", ring.cx, ring.cy, ring.r);
    Ok(())
}
