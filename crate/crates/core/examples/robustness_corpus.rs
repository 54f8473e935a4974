//! Detection and false-detection rates on a cluttered synthetic corpus.
//!
//!     cargo run --release --example robustness_corpus -- [frames] [seed]

use ring_hough::synth::{self, CorpusSpec, MatchReport, DEFAULT_TOL_CENTER, DEFAULT_TOL_RADIUS};
use ring_hough::Detector;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let frames = args.first().map_or(Ok(60), |s| s.parse())?;
    let seed = args.get(1).map_or(Ok(2024), |s| s.parse())?;

    let spec = CorpusSpec::robustness(frames, seed);
    let scenes = synth::generate_corpus(&spec)?;
    let shape = synth::corpus_shape(&scenes);
    println!(
        "{} frames, {:.1} rings per frame, {:.1}% in clusters",
        shape.frames,
        shape.mean_rings,
        100.0 * shape.cluster_fraction
    );

    let mut detector = Detector::new(spec.detector_config());
    let mut reports = Vec::new();
    for scene in &scenes {
        let (img, truth) = synth::render_scene(scene)?;
        let found = detector.detect(&img)?;
        reports.push(synth::score_detections(&truth, &found, DEFAULT_TOL_CENTER, DEFAULT_TOL_RADIUS));
    }
    let total = MatchReport::aggregate(&reports);
    println!("detection rate         {:.2}%", 100.0 * total.detection_rate);
    println!("false detection rate   {:.2}%", 100.0 * total.false_rate);
    println!("cluster detection rate {:.2}%", 100.0 * total.cluster_detection_rate);
    Ok(())
}
