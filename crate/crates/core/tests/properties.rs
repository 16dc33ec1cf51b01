use accgrad::accmodel::{build_dataset, predict_mask, train, AccModelNet, LabeledSample, TrainConfig};
use accgrad::codec::{self, degrade_frame, encode_frame, CodecConfig, QpMap};
use accgrad::engine::PropagationCounter;
use accgrad::fixture;
use accgrad::pipeline::{
    encode_fixed, encode_stream, evaluate_stream, reference_outputs, sweep, sweep_csv, StreamConfig,
};
use accgrad::scene::{gen_images, gen_video, SceneConfig};
use accgrad::{dilate_mask, Frame, QualityMask, MB};

fn recall(model: &AccModelNet, samples: &[LabeledSample]) -> f64 {
    let (mut hit, mut pos) = (0, 0);
    for s in samples {
        let (m, _) = predict_mask(model, &s.frame, 0.5).unwrap();
        for (&p, &l) in m.bits().iter().zip(s.label.bits()) {
            pos += usize::from(l);
            hit += usize::from(p && l);
        }
    }
    hit as f64 / pos.max(1) as f64
}

#[test]
fn positive_weight_raises_recall() {
    let dnn = fixture::load_dnn(fixture::DETECTOR_A).unwrap();
    let cfg = TrainConfig {
        downsample: 1,
        epochs: 10,
        ..fixture::selector_train_config()
    };
    let frames = gen_images(&fixture::selector_scenes(), 60, 40).frames;
    let samples = build_dataset(&frames, &dnn, &cfg, &PropagationCounter::new()).unwrap();
    let positives: usize = samples.iter().map(|s| s.label.count()).sum();
    let blocks: usize = samples.iter().map(|s| s.label.bits().len()).sum();
    assert!((positives as f64 / blocks as f64 - 0.1).abs() < 0.01, "9:1 imbalance");

    let mut weighted = AccModelNet::new(3, 0.5, 3);
    train(&mut weighted, &samples, &cfg).unwrap();
    let mut plain = AccModelNet::new(3, 0.5, 3);
    train(&mut plain, &samples, &TrainConfig { positive_weight: 1.0, ..cfg.clone() }).unwrap();
    let (rw, rp) = (recall(&weighted, &samples), recall(&plain, &samples));
    assert!(rw >= rp, "weighted recall {rw:.3} < unweighted {rp:.3}");
}

#[test]
fn labels_sit_near_blobs() {
    let dnn = fixture::load_dnn(fixture::DETECTOR_A).unwrap();
    let scenes = SceneConfig {
        width: 256,
        height: 256,
        blobs: 8,
        ..SceneConfig::default()
    };
    let scene = gen_images(&scenes, 20, 41);
    let cfg = TrainConfig {
        downsample: 1,
        ..fixture::selector_train_config()
    };
    let samples = build_dataset(&scene.frames, &dnn, &cfg, &PropagationCounter::new()).unwrap();
    let (mut near, mut total, mut zone_blocks, mut blocks) = (0, 0, 0, 0);
    for (s, centers) in samples.iter().zip(&scene.centers) {
        let (w, h) = s.label.dims();
        let mut blob_blocks = QualityMask::empty(w, h);
        for &(x, y) in centers {
            blob_blocks.set((x as usize / MB).min(w - 1), (y as usize / MB).min(h - 1), true);
        }
        let zone = dilate_mask(&blob_blocks, 5);
        zone_blocks += zone.count();
        blocks += w * h;
        for (&l, &z) in s.label.bits().iter().zip(zone.bits()) {
            total += usize::from(l);
            near += usize::from(l && z);
        }
    }
    let frac = near as f64 / total as f64;
    let coverage = zone_blocks as f64 / blocks as f64;
    assert!(frac >= 0.7, "{frac:.3} of positives near a blob");
    assert!(frac > coverage, "{frac:.3} no better than the zone's share {coverage:.3}");
}

#[test]
fn fixture_loss_falls_over_first_epochs() {
    let dnn = fixture::load_dnn(fixture::DETECTOR_A).unwrap();
    let cfg = TrainConfig {
        downsample: 1,
        epochs: 3,
        ..fixture::selector_train_config()
    };
    let frames = gen_images(&fixture::selector_scenes(), 200, fixture::SELECTOR_IMAGE_SEED).frames;
    let samples = build_dataset(&frames, &dnn, &cfg, &PropagationCounter::new()).unwrap();
    let mut model = AccModelNet::new(3, 1.0, cfg.seed);
    let h = train(&mut model, &samples, &cfg).unwrap();
    assert!(h[0] >= h[1] && h[1] >= h[2], "{h:?}");
}

/// Smallest uniform QP whose stream fits in `budget` bytes.
fn uniform_within(frames: &[Frame], budget: usize, cfg: &StreamConfig) -> Option<Vec<Vec<u8>>> {
    let (w, h) = frames[0].grid();
    (0..=codec::QP_MAX).find_map(|q| {
        let c = StreamConfig { qp_hi: q, qp_lo: q, ..cfg.clone() };
        let chunks = encode_fixed(frames, &QualityMask::full(w, h), &c).unwrap();
        (chunks.iter().map(Vec::len).sum::<usize>() <= budget).then_some(chunks)
    })
}

#[test]
fn selector_transfers_to_another_detector() {
    let model = fixture::load_selector().unwrap();
    let other = fixture::load_dnn(fixture::DETECTOR_B).unwrap();
    let cfg = fixture::reuse_stream();
    let mut wins = 0;
    for seed in fixture::REUSE_SEEDS {
        let frames = gen_video(&fixture::selector_scenes(), fixture::REUSE_FRAMES, seed).frames;
        let refs = reference_outputs(&other, &frames).unwrap();
        let (chunks, _) = encode_stream(&frames, &model, &cfg).unwrap();
        let bytes = chunks.iter().map(Vec::len).sum();
        let roi = evaluate_stream(&chunks, &other, &refs).unwrap().mean.unwrap();
        let uniform = match uniform_within(&frames, bytes, &cfg) {
            Some(c) => evaluate_stream(&c, &other, &refs).unwrap().mean.unwrap(),
            None => 0.0,
        };
        wins += usize::from(roi > uniform);
    }
    let n = fixture::REUSE_SEEDS.count();
    assert!(wins * 10 >= n * 7, "{wins}/{n} clips beat uniform QP at equal size");
}

#[test]
fn stream_accuracy_extremes() {
    let frames = gen_video(&fixture::selector_scenes(), 6, 42).frames;
    let dnn = fixture::load_dnn(fixture::DETECTOR_A).unwrap();
    let refs = reference_outputs(&dnn, &frames).unwrap();
    let (w, h) = frames[0].grid();
    let lossless = StreamConfig { qp_hi: 0, qp_lo: 51, chunk: 3, ..StreamConfig::default() };
    let all = encode_fixed(&frames, &QualityMask::full(w, h), &lossless).unwrap();
    let ev = evaluate_stream(&all, &dnn, &refs).unwrap();
    assert!(ev.per_frame.iter().all(|&a| a == 1.0), "{:?}", ev.per_frame);
    let none = encode_fixed(&frames, &QualityMask::empty(w, h), &lossless).unwrap();
    assert!(evaluate_stream(&none, &dnn, &refs).unwrap().mean.unwrap() < 1.0);
}

#[test]
fn per_frame_masks_match_predict_mask() {
    let frames = gen_video(&SceneConfig::default(), 5, 43).frames;
    let model = fixture::load_selector().unwrap();
    let cfg = StreamConfig { k: 1, chunk: 5, gamma: 1, ..StreamConfig::default() };
    let (_, results) = encode_stream(&frames, &model, &cfg).unwrap();
    for (j, m) in results[0].masks.iter().enumerate() {
        let (p, _) = predict_mask(&model, &frames[j], cfg.alpha).unwrap();
        assert_eq!(m, &dilate_mask(&p, cfg.gamma));
    }
}

#[test]
fn pipeline_is_deterministic() {
    let frames = gen_video(&SceneConfig::default(), 12, 44).frames;
    let model = fixture::load_selector().unwrap();
    let dnn = fixture::load_dnn(fixture::SEGMENTER).unwrap();
    let cfg = StreamConfig { chunk: 5, k: 3, ..StreamConfig::default() };
    assert_eq!(encode_stream(&frames, &model, &cfg).unwrap().0, encode_stream(&frames, &model, &cfg).unwrap().0);
    let a = sweep_csv(&sweep(&frames, &model, &dnn, &[0.1, 0.6], &cfg).unwrap());
    let b = sweep_csv(&sweep(&frames, &model, &dnn, &[0.1, 0.6], &cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn roi_block_quality_follows_mask() {
    let f = gen_images(&SceneConfig::default(), 1, 45).frames.remove(0);
    let mut mask = QualityMask::empty(4, 4);
    mask.set(2, 1, true);
    let q = codec::mask_to_qpmap(&mask, 10, 45).unwrap();
    let dec = codec::decode_frame(&encode_frame(&f, &q, &CodecConfig::default()).unwrap(), &CodecConfig::default()).unwrap();
    let hi = degrade_frame(&f, 10).unwrap();
    assert_eq!(f.block_mse(&dec, 2, 1), f.block_mse(&hi, 2, 1));
    assert!(f.block_mse(&dec, 0, 0) > f.block_mse(&hi, 0, 0));
    assert_eq!(QpMap::uniform(4, 4, 10).unwrap().dims(), (4, 4));
}
