//! The streamed three-level slab against the full 3D accumulator on the
//! same frame: identical circles, very different cost.
//!
//!     cargo run --release --example streamed_vs_oracle

use std::time::Instant;

use ring_hough::synth::{self, CorpusSpec};
use ring_hough::{detect_rings_oracle, Detector};

fn main() -> anyhow::Result<()> {
    let mut spec = CorpusSpec::robustness(1, 3);
    spec.mean_rings = 20.0;
    let scene = &synth::generate_corpus(&spec)?[0];
    let (img, truth) = synth::render_scene(scene)?;
    let cfg = spec.detector_config();

    let mut det = Detector::new(cfg.clone());
    let t = Instant::now();
    let streamed = det.detect(&img)?;
    let t_stream = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let oracle = detect_rings_oracle(&img, &cfg)?;
    let t_oracle = t.elapsed().as_secs_f64();

    let same = streamed.len() == oracle.len()
        && streamed.iter().zip(&oracle).all(|(a, b)| (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.r - b.r).abs() < 1e-9);
    println!("{} rings rendered, {} detected", truth.len(), streamed.len());
    println!("streamed {:.3} s, slab {} bytes", t_stream, det.slab_bytes());
    println!("oracle   {:.3} s", t_oracle);
    println!("identical circles: {same}");
    Ok(())
}
