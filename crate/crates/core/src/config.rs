//! Plain-text run configuration: one `key = value` per line, `#` comments.
//!
//! Every key and its default:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | seed | (none) | RNG seed; required by `train` and `sweep` |
//! | threads | 1 | worker threads |
//! | input | (none) | input file or directory |
//! | output | out | output file or directory |
//! | model | fixture selector | selector checkpoint |
//! | dnn | fixture detector_a | final network checkpoint |
//! | reference | (none) | scene directory with the original frames |
//! | frames | 30 | frames or images to generate |
//! | width, height | 64 | scene size in pixels |
//! | blobs | 2 | blobs per frame |
//! | speed | 1.0 | max blob speed, px/frame |
//! | video | true | moving video (true) or independent images (false) |
//! | chunk, k | 10 | chunk length, selector period |
//! | alpha | 0.2 | selector probability threshold |
//! | alphas | 0,0.1,0.2,0.3,0.5,0.7,0.9 | sweep thresholds |
//! | gamma | 5 | mask dilation in blocks |
//! | qp_hi, qp_lo | 30, 40 | stream QPs |
//! | bandwidth | 2500000 | link bits per second |
//! | streams | 5 | streams sharing the link |
//! | latency | 0.1 | one-way latency, seconds |
//! | fps | 30 | frame rate |
//! | epochs | 15 | selector epochs |
//! | lr | 0.01 | learning rate |
//! | optimizer | adam | adam or sgd |
//! | batch | 8 | mini-batch size |
//! | positive_weight | 4 | weight on positive blocks |
//! | downsample | 10 | keep 1 in n training images |
//! | budget | 0.1 | labeled fraction of blocks |
//! | qp_low | 40 | label degradation QP |
//! | width_mult | 1 | selector channel multiplier |
//! | c | 4 | oracle block budget |
//! | target_acc | 0.9 | idealized search target |
//! | max_iters | 10 | idealized search iterations |
//! | max_distance | 10 | persistence distance |
//! | widths | 1,2,4,6,8 | capacity experiment multipliers |
//! | fp_seeds | 0,1,2 | capacity experiment init seeds |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::accmodel::{Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::pipeline::StreamConfig;
use crate::scene::SceneConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: usize,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub model: Option<PathBuf>,
    pub dnn: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub frames: usize,
    pub video: bool,
    pub scene: SceneConfig,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub alphas: Vec<f64>,
    pub width_mult: f64,
    pub c: usize,
    pub target_acc: f64,
    pub max_iters: usize,
    pub max_distance: usize,
    pub widths: Vec<f64>,
    pub fp_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: 1,
            input: None,
            output: PathBuf::from("out"),
            model: None,
            dnn: None,
            reference: None,
            frames: 30,
            video: true,
            scene: SceneConfig::default(),
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            alphas: vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9],
            width_mult: 1.0,
            c: 4,
            target_acc: 0.9,
            max_iters: crate::oracle::DEFAULT_MAX_ITERS,
            max_distance: 10,
            widths: crate::fptol::DEFAULT_WIDTHS.to_vec(),
            fp_seeds: vec![0, 1, 2],
        }
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

impl RunConfig {
    /// Applies one key. Errors carry only the reason; callers add location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = Some(num(v)?),
            "threads" => self.threads = num(v)?,
            "input" => self.input = Some(v.into()),
            "output" => self.output = v.into(),
            "model" => self.model = Some(v.into()),
            "dnn" => self.dnn = Some(v.into()),
            "reference" => self.reference = Some(v.into()),
            "frames" => self.frames = num(v)?,
            "video" => self.video = num(v)?,
            "width" => self.scene.width = num(v)?,
            "height" => self.scene.height = num(v)?,
            "blobs" => self.scene.blobs = num(v)?,
            "speed" => self.scene.speed = num(v)?,
            "chunk" => self.stream.chunk = num(v)?,
            "k" => self.stream.k = num(v)?,
            "alpha" => self.stream.alpha = num(v)?,
            "alphas" => self.alphas = list(v)?,
            "gamma" => self.stream.gamma = num(v)?,
            "qp_hi" => self.stream.qp_hi = num(v)?,
            "qp_lo" => self.stream.qp_lo = num(v)?,
            "bandwidth" => self.stream.bandwidth = num(v)?,
            "streams" => self.stream.streams = num(v)?,
            "latency" => self.stream.latency = num(v)?,
            "fps" => self.stream.fps = num(v)?,
            "epochs" => self.train.epochs = num(v)?,
            "lr" => self.train.lr = num(v)?,
            "optimizer" => {
                self.train.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(format!("optimizer `{v}` is not adam or sgd")),
                }
            }
            "batch" => self.train.batch = num(v)?,
            "positive_weight" => self.train.positive_weight = num(v)?,
            "downsample" => self.train.downsample = num(v)?,
            "budget" => self.train.budget = num(v)?,
            "qp_low" => self.train.qp_low = num(v)?,
            "width_mult" => self.width_mult = num(v)?,
            "c" => self.c = num(v)?,
            "target_acc" => self.target_acc = num(v)?,
            "max_iters" => self.max_iters = num(v)?,
            "max_distance" => self.max_distance = num(v)?,
            "widths" => self.widths = list(v)?,
            "fp_seeds" => self.fp_seeds = list(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
        Ok(())
    }

    /// Parses config text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config {
                path: path.to_string(),
                line: i + 1,
                reason,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(k, v).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for (i, o) in overrides.into_iter().enumerate() {
            let err = |reason: String| Error::Config {
                path: "<command line>".into(),
                line: i + 1,
                reason,
            };
            let (k, v) = o.split_once('=').ok_or_else(|| err(format!("override `{o}` is not key=value")))?;
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Invalid("`seed` must be set in the config or with --seed".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = RunConfig::parse("# run\nseed = 7\nalpha=0.3 # inline\n\nalphas = 0.1, 0.5\noptimizer = sgd\n", "a.cfg").unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.stream.alpha, 0.3);
        assert_eq!(cfg.alphas, vec![0.1, 0.5]);
        assert_eq!(cfg.train.optimizer, Optimizer::Sgd);
        assert_eq!(cfg.stream.k, 10);
    }

    #[test]
    fn errors_name_file_and_line() {
        let e = RunConfig::parse("seed = 1\nbogus = 2\n", "run.cfg").unwrap_err();
        assert_eq!(e.to_string(), "run.cfg:2: unknown key `bogus`");
        let e = RunConfig::parse("\n\nk = ten\n", "x").unwrap_err();
        assert!(e.to_string().starts_with("x:3:"));
        assert!(RunConfig::parse("just words", "x").unwrap_err().to_string().starts_with("x:1:"));
    }

    #[test]
    fn overrides_win_and_seed_required() {
        let mut cfg = RunConfig::parse("k = 5\n", "x").unwrap();
        assert!(cfg.require_seed().is_err());
        cfg.apply_overrides(["k=3", "seed=9"]).unwrap();
        assert_eq!(cfg.stream.k, 3);
        assert_eq!(cfg.require_seed().unwrap(), 9);
        assert!(cfg.apply_overrides(["nokey"]).is_err());
    }
}
