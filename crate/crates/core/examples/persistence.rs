//! How long a selector mask stays valid on slow video.

use accgrad::fixture;
use accgrad::pipeline::persistence_curve;
use accgrad::scene::gen_video;

fn main() -> accgrad::Result<()> {
    let model = fixture::load_selector()?;
    for seed in fixture::PERSISTENCE_SEEDS {
        let frames = gen_video(&fixture::persistence_scenes(), fixture::PERSISTENCE_FRAMES, seed).frames;
        let curve = persistence_curve(&frames, &model, &fixture::persistence_stream(), 10)?;
        let row: Vec<String> = curve.iter().map(|(_, f)| format!("{f:.3}")).collect();
        println!("seed {seed}: {}", row.join(" "));
    }
    Ok(())
}
