//! Trains the toy final networks and the quality selector shipped in
//! `fixtures/`. Existing network files are kept unless `--force` is given;
//! the selector is always retrained from the detector fixture.
//!
//! ```text
//! cargo run --release --example train_fixtures -- [--force] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use accgrad::accmodel::{block_f1, build_dataset, train, AccModelNet, TrainConfig};
use accgrad::dnn::{fit_to_scene, DnnArch, DnnKind, DnnTrainConfig, FinalDnn};
use accgrad::engine::PropagationCounter;
use accgrad::fixture;
use accgrad::metrics::{eval_f1, Detection, DEFAULT_DIST_THRESH};
use accgrad::scene::{gen_images, SceneConfig};

fn main() -> accgrad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let force = args.iter().any(|a| a == "--force");
    let out_dir = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(fixture::dir);
    std::fs::create_dir_all(&out_dir)?;

    let scenes = SceneConfig::default();
    let train_set = gen_images(&scenes, 240, 1001);
    let held_out = gen_images(&scenes, 40, 2002);
    let cfg = DnnTrainConfig::default();

    let jobs = [
        (fixture::DETECTOR_A, DnnKind::Detector, DnnArch::small(3), 1u64),
        (
            fixture::DETECTOR_B,
            DnnKind::Detector,
            DnnArch {
                in_channels: 3,
                layers: vec![(8, 3), (6, 3), (4, 3)],
            },
            2,
        ),
        (fixture::SEGMENTER, DnnKind::Segmenter, DnnArch::small(3), 3),
    ];
    for (file, kind, arch, seed) in jobs {
        let path = out_dir.join(file);
        if path.exists() && !force {
            println!("{file}: kept");
            continue;
        }
        let start = Instant::now();
        let mut net = FinalDnn::new(kind, arch, seed);
        let history = fit_to_scene(&mut net, &train_set, &cfg)?;
        println!(
            "{file}: loss {:.4} -> {:.4} in {:.1}s",
            history[0],
            history.last().unwrap(),
            start.elapsed().as_secs_f64()
        );
        let mut f1 = 0.0;
        for (frame, centers) in held_out.frames.iter().zip(&held_out.centers) {
            let truth: Vec<Detection> = centers.iter().map(|&(x, y)| Detection { x, y, score: 1.0 }).collect();
            f1 += eval_f1(&net.infer(frame)?.detections(), &truth, DEFAULT_DIST_THRESH);
        }
        println!("  held-out F1 against blob centers: {:.3}", f1 / held_out.len() as f64);
        net.save(&path)?;
    }

    let start = Instant::now();
    let dnn = FinalDnn::load(out_dir.join(fixture::DETECTOR_A))?;
    let sel_scenes = fixture::selector_scenes();
    let tcfg = fixture::selector_train_config();
    let counter = PropagationCounter::new();
    let images = gen_images(&sel_scenes, fixture::SELECTOR_IMAGES, fixture::SELECTOR_IMAGE_SEED).frames;
    let samples = build_dataset(&images, &dnn, &tcfg, &counter)?;
    let held = build_dataset(
        &gen_images(&sel_scenes, fixture::HELD_OUT_IMAGES, fixture::HELD_OUT_SEED).frames,
        &dnn,
        &TrainConfig {
            seed: tcfg.seed + 1,
            ..tcfg.clone()
        },
        &PropagationCounter::new(),
    )?;
    let mut model = AccModelNet::new(3, 1.0, tcfg.seed);
    let history = train(&mut model, &samples, &tcfg)?;
    println!(
        "{}: {} samples, passes {:?}, loss {:.4} -> {:.4} in {:.1}s",
        fixture::SELECTOR,
        samples.len(),
        counter.get(),
        history[0],
        history.last().unwrap(),
        start.elapsed().as_secs_f64()
    );
    println!("  held-out block F1 at 0.5: {:.3}", block_f1(&model, &held, 0.5)?);
    model.save(out_dir.join(fixture::SELECTOR))?;
    Ok(())
}
