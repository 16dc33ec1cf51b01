//! Accuracy / bytes / delay across alpha on the tradeoff scene, with the
//! uniform-quality baselines. Writes sweep.csv and sweep.svg to the given
//! directory (default: current).

use std::path::PathBuf;

use accgrad::fixture;
use accgrad::pipeline::{sweep, sweep_csv, sweep_svg, uniform_point};
use accgrad::scene::gen_video;

fn main() -> accgrad::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| ".".into());
    let frames = gen_video(&fixture::tradeoff_scenes(), fixture::TRADEOFF_FRAMES, fixture::TRADEOFF_SEED).frames;
    let model = fixture::load_selector()?;
    let dnn = fixture::load_dnn(fixture::DETECTOR_A)?;
    let cfg = fixture::tradeoff_stream();
    let points = sweep(&frames, &model, &dnn, &fixture::TRADEOFF_ALPHAS, &cfg)?;
    print!("{}", sweep_csv(&points));
    for high in [true, false] {
        let p = uniform_point(&frames, &dnn, high, &cfg)?;
        println!("{}: acc {:.3} bytes {} delay {:.3}", p.label, p.mean_acc, p.total_bytes, p.mean_delay);
    }
    std::fs::write(dir.join("sweep.csv"), sweep_csv(&points))?;
    std::fs::write(dir.join("sweep.svg"), sweep_svg(&points))?;
    Ok(())
}
