//! The streamed accumulator holds six image-sized planes whatever the
//! radius range; the full 3D array grows with it.
//!
//!     cargo run --release --example memory_footprint

use ring_hough::hough::VoteCodec;
use ring_hough::{Detector, DetectorConfig, GrayImage};

fn main() -> anyhow::Result<()> {
    let (w, h) = (968, 728);
    let img = GrayImage::filled(w, h, 0.1)?;
    println!("{:>12} {:>14} {:>16}", "radii", "slab bytes", "full array cells");
    for r_max in [20, 60, 200, 500] {
        let cfg = DetectorConfig::new(2.0, 10, r_max);
        let mut det = Detector::new(cfg.clone());
        det.detect(&img)?;
        // Raw counts plus normalized values for every (r, y, x).
        let full = 2 * VoteCodec::new(&cfg.hough, w, h).code_bound();
        println!("{:>12} {:>14} {:>16}", format!("10..{r_max}"), det.slab_bytes(), full);
    }
    Ok(())
}
