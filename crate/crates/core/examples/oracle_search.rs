//! Compares the top-c AccGrad mask with the exhaustive best mask and the
//! idealized region-growing search on a 64x64 scene.

use accgrad::codec::degrade_frame;
use accgrad::engine::{compute_accgrad, PropagationCounter};
use accgrad::oracle::{composite_loss, exhaustive_best_mask, idealized_search};
use accgrad::scene::{gen_images, SceneConfig};
use accgrad::{fixture, topc_mask, QualityMask};

fn main() -> accgrad::Result<()> {
    let dnn = fixture::load_dnn(fixture::DETECTOR_A)?;
    for seed in 0..5 {
        let hq = gen_images(&SceneConfig::default(), 1, seed).frames.remove(0);
        let lq = degrade_frame(&hq, 40)?;
        let map = compute_accgrad(&dnn, &hq, &lq, &PropagationCounter::new())?;
        let (w, h) = map.dims();
        let none = composite_loss(&dnn, &hq, &lq, &QualityMask::empty(w, h))?;
        let top = composite_loss(&dnn, &hq, &lq, &topc_mask(&map, 4))?;
        let best = exhaustive_best_mask(&dnn, &hq, &lq, 4)?;
        let ideal = idealized_search(&dnn, &hq, 51, 1.0, 10)?;
        println!(
            "seed {seed}: all-low {none:.2e}  top-4 {top:.2e}  best {:.2e} ({} masks)  idealized {} blocks acc {:.2} in {} rounds",
            best.loss,
            best.masks_evaluated,
            ideal.mask.count(),
            ideal.accuracy,
            ideal.iterations
        );
    }
    Ok(())
}
