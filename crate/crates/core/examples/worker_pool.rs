//! Detect a frame sequence on a worker pool and compare worker counts.
//!
//!     cargo run --release --example worker_pool -- [frames] [workers...]

use ring_hough::batch;
use ring_hough::synth::{self, CorpusSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    let frames = args.first().copied().unwrap_or(16);
    let counts = if args.len() > 1 { args[1..].to_vec() } else { vec![1, 2, 4] };

    let spec = CorpusSpec::robustness(frames, 9);
    let images = synth::generate_corpus(&spec)?
        .iter()
        .map(|s| synth::render_scene(s).map(|r| r.0))
        .collect::<Result<Vec<_>, _>>()?;
    let rep = batch::benchmark(&images, &spec.detector_config(), &counts, 0)?;
    println!("{} frames {}x{}, {} detections", rep.frames, rep.width, rep.height, rep.detections);
    for run in &rep.runs {
        println!("{} workers: {:6.2} frames/s ({:.2}x)", run.workers, run.fps, run.speedup);
    }
    println!("outputs identical: {}", rep.identical);
    Ok(())
}
