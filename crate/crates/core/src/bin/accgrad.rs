use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use accgrad::accmodel::{build_dataset, cost_report, train, AccModelNet};
use accgrad::codec::{self, degrade_frame};
use accgrad::config::RunConfig;
use accgrad::dnn::FinalDnn;
use accgrad::engine::{compute_accgrad, PropagationCounter};
use accgrad::fptol::{fp_csv, fp_tolerance_experiment, FpConfig};
use accgrad::oracle::{composite_loss, exhaustive_best_mask, idealized_search};
use accgrad::pipeline::{encode_stream, evaluate_stream, persistence_curve, reference_outputs, sweep, sweep_csv, sweep_svg};
use accgrad::scene::{gen_images, gen_video, read_scene, write_scene, Scene};
use accgrad::{fixture, topc_mask, Error, Frame, Result};

/// Accuracy-gradient quality selection and RoI block coding experiments.
///
/// Every command reads an optional `key = value` config file; named flags
/// and `--set` override its keys, in that order.
#[derive(Parser)]
#[command(name = "accgrad", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(short, long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any config key (repeatable)
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Input file or directory
    #[arg(short, long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output directory
    #[arg(short, long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Selector checkpoint (AGP1)
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Final network checkpoint (AGP1)
    #[arg(long, value_name = "PATH")]
    dnn: Option<PathBuf>,
    /// Scene directory holding the original frames
    #[arg(long, value_name = "PATH")]
    reference: Option<PathBuf>,
    /// Worker threads
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded blob scene: frame_NNNN.ppm plus manifest.csv
    GenScenes(Common),
    /// Label scenes with AccGrad and train a selector
    Train(Common),
    /// Encode a scene directory into AGV1 chunk containers
    Encode(Common),
    /// Decode an AGV1 container (or a directory of them) into frames
    Decode(Common),
    /// Score decoded chunks against reference frames with the final network
    Eval(Common),
    /// Accuracy / size / delay for each alpha, as CSV and SVG
    Sweep(Common),
    /// Top-c AccGrad mask against the exhaustive and idealized oracles
    Oracle(Common),
    /// Fraction of unchanged mask bits against frame distance
    Persistence(Common),
    /// Final loss by selector width under plain and weighted cross-entropy
    FpTolerance(Common),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut flags = Vec::new();
    if let Some(s) = c.seed {
        flags.push(format!("seed={s}"));
    }
    for (key, v) in [
        ("input", &c.input),
        ("output", &c.output),
        ("model", &c.model),
        ("dnn", &c.dnn),
        ("reference", &c.reference),
    ] {
        if let Some(p) = v {
            flags.push(format!("{key}={}", p.display()));
        }
    }
    if let Some(t) = c.threads {
        flags.push(format!("threads={t}"));
    }
    flags.extend(c.set.iter().cloned());
    cfg.apply_overrides(flags.iter().map(String::as_str))?;
    if cfg.threads == 0 {
        return Err(Error::Invalid("threads must be at least 1".into()));
    }
    // A second global pool cannot be built; ignore that case.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    Ok(cfg)
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Invalid(format!("missing input: {what}")))
}

fn load_dnn(cfg: &RunConfig) -> Result<FinalDnn> {
    match &cfg.dnn {
        Some(p) => FinalDnn::load(p).map_err(|e| Error::Invalid(format!("final network {}: {e}", p.display()))),
        None => fixture::load_dnn(fixture::DETECTOR_A),
    }
}

fn load_model(cfg: &RunConfig) -> Result<AccModelNet> {
    match &cfg.model {
        Some(p) => AccModelNet::load(p).map_err(|e| Error::Invalid(format!("selector {}: {e}", p.display()))),
        None => fixture::load_selector(),
    }
}

/// The input scene directory, or a freshly generated scene.
fn scene(cfg: &RunConfig) -> Result<Scene> {
    match &cfg.input {
        Some(dir) => read_scene(dir),
        None => {
            let seed = cfg.seed.unwrap_or(0);
            Ok(if cfg.video {
                gen_video(&cfg.scene, cfg.frames, seed)
            } else {
                gen_images(&cfg.scene, cfg.frames, seed)
            })
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.output)?;
    Ok(&cfg.output)
}

fn write(dir: &Path, name: &str, data: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(dir.join(name), data)?;
    Ok(())
}

fn gen_scenes(cfg: &RunConfig) -> Result<()> {
    let s = scene(&RunConfig { input: None, ..cfg.clone() })?;
    write_scene(&s, &cfg.output)?;
    println!("{} frames -> {}", s.len(), cfg.output.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.require_seed()?;
    let frames = read_scene(need(&cfg.input, "scene directory (--input)")?)?.frames;
    let dnn = load_dnn(cfg)?;
    let counter = PropagationCounter::new();
    let samples = build_dataset(&frames, &dnn, &cfg.train, &counter)?;
    let labeled = counter.get();
    let mut model = AccModelNet::new(frames[0].channels(), cfg.width_mult, seed);
    let history = train(&mut model, &samples, &cfg.train)?;
    if counter.get() != labeled {
        return Err(Error::Invalid("training ran the final network".into()));
    }
    let dir = out_dir(cfg)?;
    model.save(dir.join("selector.agp"))?;
    let report = cost_report(frames.len(), &cfg.train)?;
    let json = serde_json::json!({
        "images": frames.len(),
        "samples": samples.len(),
        "forward": labeled.0,
        "backward": labeled.1,
        "decoupled_passes": report.decoupled_passes,
        "conventional_passes": report.conventional_passes,
        "ratio": report.ratio,
    });
    write(dir, "cost_report.json", serde_json::to_string_pretty(&json).unwrap() + "\n")?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        curve.push_str(&format!("{},{l:.8}\n", e + 1));
    }
    write(dir, "loss_curve.csv", curve)?;
    println!("{} samples, loss {:.4} -> {:.4}", samples.len(), history[0], history.last().unwrap());
    Ok(())
}

fn encode(cfg: &RunConfig) -> Result<()> {
    let frames = read_scene(need(&cfg.input, "scene directory (--input)")?)?.frames;
    let model = load_model(cfg)?;
    let (chunks, results) = encode_stream(&frames, &model, &cfg.stream)?;
    let dir = out_dir(cfg)?;
    let mut csv = String::from("chunk,first_frame,bytes,selector_invocations,mask_source,hq_blocks,encode_ops,streaming_delay\n");
    for (c, r) in chunks.iter().zip(&results) {
        write(dir, &format!("chunk_{:04}.agv", r.index), c)?;
        let src: Vec<String> = r.mask_source.iter().map(usize::to_string).collect();
        let hq: usize = r.masks.iter().map(|m| m.count()).sum();
        csv.push_str(&format!(
            "{},{},{},{},{},{hq},{},{:.6}\n",
            r.index,
            r.first_frame,
            r.bytes,
            r.selector_invocations,
            src.join(";"),
            r.encode_ops,
            r.streaming_delay
        ));
    }
    write(dir, "chunks.csv", csv)?;
    let secs: f64 = results.iter().map(|r| r.encode_seconds).sum();
    eprintln!("{} chunks, {} bytes, {secs:.2}s", chunks.len(), chunks.iter().map(Vec::len).sum::<usize>());
    Ok(())
}

fn chunk_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "agv"))
        .collect();
    v.sort();
    Ok(v)
}

fn read_chunks(cfg: &RunConfig) -> Result<Vec<Vec<u8>>> {
    let files = chunk_files(need(&cfg.input, "AGV1 container or directory (--input)")?)?;
    files.iter().map(|f| Ok(std::fs::read(f)?)).collect()
}

fn decode(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let mut n = 0;
    for c in read_chunks(cfg)? {
        for enc in codec::read_container(&c)? {
            let f = codec::decode_frame(&enc, &codec::CodecConfig::default()).map_err(|e| Error::Frame {
                index: n,
                source: Box::new(e.into()),
            })?;
            let ext = if f.channels() == 1 { "pgm" } else { "ppm" };
            f.write_pnm(dir.join(format!("frame_{n:04}.{ext}")))?;
            n += 1;
        }
    }
    println!("{n} frames -> {}", dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let chunks = read_chunks(cfg)?;
    let reference = read_scene(need(&cfg.reference, "reference scene directory (--reference)")?)?.frames;
    let dnn = load_dnn(cfg)?;
    let ev = evaluate_stream(&chunks, &dnn, &reference_outputs(&dnn, &reference)?)?;
    let mut csv = String::from("frame,accuracy\n");
    for (i, a) in ev.per_frame.iter().enumerate() {
        csv.push_str(&format!("{i},{a:.6}\n"));
    }
    write(out_dir(cfg)?, "eval.csv", csv)?;
    match ev.mean {
        Some(m) => println!("mean accuracy {m:.4} over {} frames", ev.per_frame.len()),
        None => println!("no frames"),
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    cfg.require_seed()?;
    let frames = scene(cfg)?.frames;
    let points = sweep(&frames, &load_model(cfg)?, &load_dnn(cfg)?, &cfg.alphas, &cfg.stream)?;
    let dir = out_dir(cfg)?;
    write(dir, "sweep.csv", sweep_csv(&points))?;
    write(dir, "sweep.svg", sweep_svg(&points))?;
    print!("{}", sweep_csv(&points));
    Ok(())
}

fn oracle(cfg: &RunConfig) -> Result<()> {
    let s = scene(&RunConfig { video: false, frames: 1, ..cfg.clone() })?;
    let hq: &Frame = s.frames.first().ok_or_else(|| Error::Invalid("scene has no frames".into()))?;
    let dnn = load_dnn(cfg)?;
    let lq = degrade_frame(hq, cfg.train.qp_low)?;
    let map = compute_accgrad(&dnn, hq, &lq, &PropagationCounter::new())?;
    let top = topc_mask(&map, cfg.c);
    let best = exhaustive_best_mask(&dnn, hq, &lq, cfg.c)?;
    let ideal = idealized_search(&dnn, hq, cfg.train.qp_low, cfg.target_acc, cfg.max_iters)?;
    let dir = out_dir(cfg)?;
    write(dir, "accgrad.csv", map.to_csv())?;
    write(dir, "topc.pbm", top.to_pbm())?;
    write(dir, "exhaustive.pbm", best.mask.to_pbm())?;
    write(dir, "idealized.pbm", ideal.mask.to_pbm())?;
    let mut csv = String::from("method,blocks,loss\n");
    for (name, m) in [("topc", &top), ("exhaustive", &best.mask), ("idealized", &ideal.mask)] {
        csv.push_str(&format!("{name},{},{:.8}\n", m.count(), composite_loss(&dnn, hq, &lq, m)?));
    }
    write(dir, "oracle.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

fn persistence(cfg: &RunConfig) -> Result<()> {
    let frames = scene(&RunConfig { video: true, ..cfg.clone() })?.frames;
    let curve = persistence_curve(&frames, &load_model(cfg)?, &cfg.stream, cfg.max_distance)?;
    let mut csv = String::from("distance,fraction_unchanged\n");
    for (d, f) in curve {
        csv.push_str(&format!("{d},{f:.6}\n"));
    }
    write(out_dir(cfg)?, "persistence.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

/// Labels every image (no downsampling) and fits all widths.
fn fp_tolerance(cfg: &RunConfig) -> Result<()> {
    let frames = scene(&RunConfig { video: false, ..cfg.clone() })?.frames;
    let tcfg = accgrad::accmodel::TrainConfig { downsample: 1, ..cfg.train.clone() };
    let samples = build_dataset(&frames, &load_dnn(cfg)?, &tcfg, &PropagationCounter::new())?;
    let fc = FpConfig {
        train: tcfg,
        seeds: cfg.fp_seeds.clone(),
        ..FpConfig::default()
    };
    let rows = fp_tolerance_experiment(&cfg.widths, &samples, &fc)?;
    write(out_dir(cfg)?, "fp_tolerance.csv", fp_csv(&rows))?;
    print!("{}", fp_csv(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenScenes(c) => gen_scenes(&resolve(&c)?),
        Cmd::Train(c) => cmd_train(&resolve(&c)?),
        Cmd::Encode(c) => encode(&resolve(&c)?),
        Cmd::Decode(c) => decode(&resolve(&c)?),
        Cmd::Eval(c) => eval(&resolve(&c)?),
        Cmd::Sweep(c) => cmd_sweep(&resolve(&c)?),
        Cmd::Oracle(c) => oracle(&resolve(&c)?),
        Cmd::Persistence(c) => persistence(&resolve(&c)?),
        Cmd::FpTolerance(c) => fp_tolerance(&resolve(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
