use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use accgrad::pipeline::{encode_stream, evaluate_stream, reference_outputs, StreamConfig};
use accgrad::scene::read_scene;
use accgrad::{fixture, QualityMask};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accgrad")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_scenes_is_reproducible_and_counts_blobs() {
    let t = tempfile::tempdir().unwrap();
    let (a, b, e) = (t.path().join("a"), t.path().join("b"), t.path().join("e"));
    for d in [&a, &b] {
        ok(&["gen-scenes", "--seed", "4", "-o", s(d), "-s", "frames=5", "-s", "blobs=3"]);
    }
    assert_eq!(files(&a), files(&b));
    let scene = read_scene(&a).unwrap();
    assert_eq!(scene.len(), 5);
    assert!(scene.centers.iter().all(|c| c.len() == 3));
    ok(&["gen-scenes", "-o", s(&e), "-s", "frames=0"]);
    assert_eq!(std::fs::read_to_string(e.join("manifest.csv")).unwrap(), "");
}

#[test]
fn train_writes_checkpoint_report_and_curve() {
    let t = tempfile::tempdir().unwrap();
    let sc = t.path().join("sc");
    ok(&["gen-scenes", "--seed", "1", "-o", s(&sc), "-s", "frames=8"]);
    let before = files(&sc);
    let mut runs = Vec::new();
    for name in ["r1", "r2"] {
        let out = t.path().join(name);
        ok(&["train", "--seed", "2", "-i", s(&sc), "-o", s(&out), "-s", "epochs=3", "-s", "downsample=2"]);
        runs.push(files(&out));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(files(&sc), before, "inputs untouched");
    let report: serde_json::Value = serde_json::from_slice(&runs[0]["cost_report.json"]).unwrap();
    assert_eq!(report["forward"], 8);
    assert_eq!(report["backward"], 4);
    assert_eq!(report["decoupled_passes"], 12);
    let curve = String::from_utf8(runs[0]["loss_curve.csv"].clone()).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
    assert!(runs[0]["selector.agp"].starts_with(b"AGP1"));
}

#[test]
fn train_and_sweep_need_a_seed() {
    let t = tempfile::tempdir().unwrap();
    for cmd in ["train", "sweep"] {
        let out = run(&[cmd, "-o", s(t.path())]);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    }
}

#[test]
fn config_errors_name_the_line() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 1\nframes = 3\nnope = 2\n").unwrap();
    let out = run(&["gen-scenes", "-c", s(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1);
    assert!(err.contains("run.cfg:3: unknown key `nope`"), "{err}");
}

#[test]
fn flags_override_config_keys() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, format!("seed = 1\nframes = 2\noutput = {}\n", s(&t.path().join("from_cfg")))).unwrap();
    ok(&["gen-scenes", "-c", s(&cfg), "-s", "frames=4", "-o", s(&t.path().join("flag"))]);
    assert_eq!(read_scene(&t.path().join("flag")).unwrap().len(), 4);
    assert!(!t.path().join("from_cfg").exists());
}

#[test]
fn encode_decode_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let [sc, enc, dec, ev] = ["sc", "enc", "dec", "ev"].map(|n| t.path().join(n));
    ok(&["gen-scenes", "--seed", "6", "-o", s(&sc), "-s", "frames=12"]);
    ok(&["encode", "-i", s(&sc), "-o", s(&enc), "-s", "k=5", "-s", "gamma=1"]);
    let out = ok(&["decode", "-i", s(&enc), "-o", s(&dec)]);
    assert!(out.starts_with("12 frames"));
    ok(&["eval", "-i", s(&enc), "--reference", s(&sc), "-o", s(&ev)]);

    let frames = read_scene(&sc).unwrap().frames;
    let cfg = StreamConfig { k: 5, gamma: 1, ..StreamConfig::default() };
    let (chunks, results) = encode_stream(&frames, &fixture::load_selector().unwrap(), &cfg).unwrap();
    let on_disk = files(&enc);
    for (i, c) in chunks.iter().enumerate() {
        assert_eq!(&on_disk[&format!("chunk_{i:04}.agv")], c);
    }
    let csv = String::from_utf8(on_disk["chunks.csv"].clone()).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",0;0;0;0;0;5;5;5;5;5,"));
    assert_eq!(results.len(), 2);
    let dnn = fixture::load_dnn(fixture::DETECTOR_A).unwrap();
    let expect = evaluate_stream(&chunks, &dnn, &reference_outputs(&dnn, &frames).unwrap()).unwrap();
    let got: Vec<f64> = std::fs::read_to_string(ev.join("eval.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(got.len(), expect.per_frame.len());
    for (g, e) in got.iter().zip(&expect.per_frame) {
        assert!((g - e).abs() < 1e-6);
    }
    let decoded = read_scene(&sc).unwrap().frames.len();
    assert_eq!(files(&dec).len(), decoded);
}

#[test]
fn oracle_writes_masks_and_losses() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("or");
    ok(&["oracle", "--seed", "3", "-o", s(&out), "-s", "c=3"]);
    let f = files(&out);
    for name in ["topc.pbm", "exhaustive.pbm", "idealized.pbm", "oracle.csv", "accgrad.csv"] {
        assert!(f.contains_key(name), "{name}");
    }
    let top = QualityMask::from_pbm(std::str::from_utf8(&f["topc.pbm"]).unwrap()).unwrap();
    assert_eq!((top.dims(), top.count()), ((4, 4), 3));
    let csv = String::from_utf8(f["oracle.csv"].clone()).unwrap();
    let loss = |m: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(m)).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(loss("exhaustive") <= loss("topc"));
}

#[test]
fn sweep_persistence_and_fp_outputs() {
    let t = tempfile::tempdir().unwrap();
    let sw = t.path().join("sw");
    ok(&["sweep", "--seed", "1", "-o", s(&sw), "-s", "frames=10", "-s", "alphas=0,0.5"]);
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "alpha,mean_acc,std_acc,total_bytes,mean_delay");
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_to_string(sw.join("sweep.svg")).unwrap().starts_with("<svg"));

    let pe = t.path().join("pe");
    ok(&["persistence", "--seed", "1", "-o", s(&pe), "-s", "frames=6", "-s", "max_distance=3"]);
    assert_eq!(std::fs::read_to_string(pe.join("persistence.csv")).unwrap().lines().count(), 4);

    let fp = t.path().join("fp");
    ok(&[
        "fp-tolerance", "--seed", "1", "-o", s(&fp), "-s", "frames=4", "-s", "widths=1,2", "-s", "epochs=2",
        "-s", "fp_seeds=0",
    ]);
    assert_eq!(std::fs::read_to_string(fp.join("fp_tolerance.csv")).unwrap().lines().count(), 3);
}

#[test]
fn help_lists_every_flag() {
    let top = ok(&["--help"]);
    for cmd in ["gen-scenes", "train", "encode", "decode", "eval", "sweep", "oracle", "persistence", "fp-tolerance"] {
        assert!(top.contains(cmd), "{cmd}");
        let h = ok(&[cmd, "--help"]);
        for flag in ["--config", "--set", "--seed", "--input", "--output", "--model", "--dnn", "--reference", "--threads"] {
            assert!(h.contains(flag), "{cmd} {flag}");
        }
    }
}

#[test]
fn missing_inputs_are_named() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["encode", "-o", s(t.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));
    let out = run(&["eval", "-i", s(t.path()), "-o", s(t.path())]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("reference"));
}
