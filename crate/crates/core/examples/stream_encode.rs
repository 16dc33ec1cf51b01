//! Streams a moving scene through the selector and RoI codec, then scores it
//! with the detector and prints the per-chunk delay model.

use accgrad::fixture;
use accgrad::pipeline::{encode_stream, evaluate_chunks, reference_outputs, StreamConfig};
use accgrad::scene::gen_video;

fn main() -> accgrad::Result<()> {
    let frames = gen_video(&fixture::selector_scenes(), 40, 21).frames;
    let model = fixture::load_selector()?;
    let dnn = fixture::load_dnn(fixture::DETECTOR_A)?;
    let cfg = StreamConfig {
        gamma: 1,
        qp_lo: 51,
        ..StreamConfig::default()
    };
    let (chunks, mut results) = encode_stream(&frames, &model, &cfg)?;
    let eval = evaluate_chunks(&chunks, &mut results, &dnn, &reference_outputs(&dnn, &frames)?)?;
    println!("chunk  bytes  selector  hq_blocks  delay_s  mean_acc");
    for r in &results {
        let hq: usize = r.masks.iter().map(|m| m.count()).sum();
        let acc = r.accuracy.iter().sum::<f64>() / r.accuracy.len() as f64;
        println!(
            "{:>5} {:>6} {:>9} {:>10} {:>8.3} {:>9.3}",
            r.index, r.bytes, r.selector_invocations, hq, r.streaming_delay, acc
        );
    }
    println!("stream mean accuracy {:.3}", eval.mean.unwrap_or(f64::NAN));
    Ok(())
}
