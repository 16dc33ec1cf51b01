//! Labels scenes with AccGrad, trains a small selector and reports the
//! decoupling cost and held-out block F1.
//!
//! ```text
//! cargo run --release --example train_selector -- [images] [out.agp]
//! ```

use accgrad::accmodel::{block_f1, build_dataset, cost_report, train, AccModelNet, TrainConfig};
use accgrad::engine::PropagationCounter;
use accgrad::fixture;
use accgrad::scene::gen_images;

fn main() -> accgrad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(400);
    let dnn = fixture::load_dnn(fixture::DETECTOR_A)?;
    let scenes = fixture::selector_scenes();
    let cfg = fixture::selector_train_config();

    let counter = PropagationCounter::new();
    let samples = build_dataset(&gen_images(&scenes, n, 5).frames, &dnn, &cfg, &counter)?;
    let held = build_dataset(
        &gen_images(&scenes, 100, 6).frames,
        &dnn,
        &TrainConfig { downsample: 1, ..cfg.clone() },
        &PropagationCounter::new(),
    )?;
    let mut model = AccModelNet::new(3, 1.0, cfg.seed);
    let history = train(&mut model, &samples, &cfg)?;
    for (e, l) in history.iter().enumerate() {
        println!("epoch {:>2} loss {l:.4}", e + 1);
    }
    let report = cost_report(n, &cfg)?;
    println!("final-network passes {:?}; {}", counter.get(), report.to_json());
    println!("held-out block F1 at 0.5: {:.3}", block_f1(&model, &held, 0.5)?);
    if let Some(path) = args.get(1) {
        model.save(path)?;
    }
    Ok(())
}
