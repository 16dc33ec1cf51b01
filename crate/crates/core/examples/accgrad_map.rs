//! AccGrad map of a blob scene against its QP-40 version, with the top-c and
//! thresholded masks it induces.
//!
//! ```text
//! cargo run --release --example accgrad_map -- [seed]
//! ```

use accgrad::codec::degrade_frame;
use accgrad::engine::{compute_accgrad, PropagationCounter};
use accgrad::scene::{gen_images, SceneConfig};
use accgrad::{dilate_mask, fixture, threshold_mask, topc_mask};

fn main() -> accgrad::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let cfg = SceneConfig {
        width: 128,
        height: 96,
        blobs: 4,
        ..SceneConfig::default()
    };
    let scene = gen_images(&cfg, 1, seed);
    let hq = &scene.frames[0];
    let dnn = fixture::load_dnn(fixture::DETECTOR_A)?;
    let counter = PropagationCounter::new();
    let map = compute_accgrad(&dnn, hq, &degrade_frame(hq, 40)?, &counter)?;

    println!("blob centers: {:.1?}", scene.centers[0]);
    println!("passes (forward, backward): {:?}", counter.get());
    print!("{}", map.to_csv());
    let top = topc_mask(&map, 6);
    println!("top-6:\n{}", top.to_pbm());
    println!("alpha 0.2 of max:\n{}", threshold_mask(&map, 0.2, true).to_pbm());
    println!("top-6 dilated by 1:\n{}", dilate_mask(&top, 1).to_pbm());
    Ok(())
}
