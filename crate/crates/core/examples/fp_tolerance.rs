//! Final training loss by selector width under plain and positive-weighted
//! cross-entropy, on the same AccGrad labels. Takes a few minutes.

use accgrad::accmodel::build_dataset;
use accgrad::engine::PropagationCounter;
use accgrad::fixture;
use accgrad::fptol::{fp_csv, fp_tolerance_experiment, relative_gaps, FpConfig, DEFAULT_WIDTHS};
use accgrad::scene::{gen_images, SceneConfig};

fn main() -> accgrad::Result<()> {
    let dnn = fixture::load_dnn(fixture::DETECTOR_A)?;
    let tcfg = fixture::fp_train_config();
    let images = gen_images(&SceneConfig::default(), fixture::FP_IMAGES, fixture::FP_IMAGE_SEED).frames;
    let samples = build_dataset(&images, &dnn, &tcfg, &PropagationCounter::new())?;
    let rows = fp_tolerance_experiment(&DEFAULT_WIDTHS, &samples, &FpConfig { train: tcfg, ..FpConfig::default() })?;
    print!("{}", fp_csv(&rows));
    if let Some((plain, weighted)) = relative_gaps(&rows, 4.0, 8.0) {
        println!("relative gap 4x -> 8x: plain {plain:.3}, weighted {weighted:.3}");
    }
    Ok(())
}
