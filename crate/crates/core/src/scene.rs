//! Seeded synthetic scenes: Gaussian blobs over a smooth textured background.
//!
//! Scenes stand in for real camera footage. The generator records the blob
//! centers of every frame, which serve as ground truth for the detector and
//! for label-placement checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Blobs per frame.
    pub blobs: usize,
    /// Range of the Gaussian blob standard deviation, in pixels.
    pub sigma: (f64, f64),
    /// Range of the blob peak brightness offset.
    pub contrast: (f64, f64),
    /// Maximum blob speed in pixels per frame along each axis.
    pub speed: f64,
    /// Amplitude of each background sinusoid.
    pub texture: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: 3,
            blobs: 2,
            sigma: (1.2, 2.2),
            contrast: (0.2, 0.45),
            speed: 1.0,
            texture: 0.06,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub contrast: f64,
    pub vx: f64,
    pub vy: f64,
}

/// A generated frame sequence with per-frame blob centers.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub centers: Vec<Vec<(f64, f64)>>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

/// Smooth textured background: per-channel base level plus a few random
/// plane waves and mild pixel noise.
pub fn background(cfg: &SceneConfig, rng: &mut impl Rng) -> Frame {
    let base: Vec<f64> = (0..cfg.channels).map(|_| rng.gen_range(0.3..0.5)).collect();
    let waves: Vec<Wave> = (0..6)
        .map(|_| {
            let f = rng.gen_range(0.04..0.3);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            Wave {
                fx: f * theta.cos(),
                fy: f * theta.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: [
                    cfg.texture * rng.gen_range(0.5..1.0),
                    cfg.texture * rng.gen_range(0.5..1.0),
                    cfg.texture * rng.gen_range(0.5..1.0),
                ],
            }
        })
        .collect();
    let mut data = Vec::with_capacity(cfg.width * cfg.height * cfg.channels);
    for (c, base) in base.iter().enumerate() {
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let mut v = *base;
                for w in &waves {
                    v += w.amp[c] * (std::f64::consts::TAU * (w.fx * x as f64 + w.fy * y as f64) + w.phase).sin();
                }
                v += rng.gen_range(-0.02..0.02);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Frame::new(cfg.width, cfg.height, cfg.channels, data)
        .expect("valid background")
        .quantize_8bit()
}

fn random_blob(cfg: &SceneConfig, rng: &mut impl Rng) -> Blob {
    let sigma = rng.gen_range(cfg.sigma.0..=cfg.sigma.1);
    let margin = (2.0 * sigma).min(cfg.width.min(cfg.height) as f64 / 4.0);
    Blob {
        x: rng.gen_range(margin..cfg.width as f64 - margin),
        y: rng.gen_range(margin..cfg.height as f64 - margin),
        sigma,
        contrast: rng.gen_range(cfg.contrast.0..=cfg.contrast.1),
        vx: if cfg.speed > 0.0 { rng.gen_range(-cfg.speed..=cfg.speed) } else { 0.0 },
        vy: if cfg.speed > 0.0 { rng.gen_range(-cfg.speed..=cfg.speed) } else { 0.0 },
    }
}

/// Adds the blobs to `bg` and quantizes to 8 bits.
pub fn render(bg: &Frame, blobs: &[Blob]) -> Frame {
    let mut f = bg.clone();
    for b in blobs {
        let reach = (4.0 * b.sigma).ceil() as isize;
        let (cx, cy) = (b.x.round() as isize, b.y.round() as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(bg.height() as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(bg.width() as isize) {
                let d2 = (x as f64 - b.x).powi(2) + (y as f64 - b.y).powi(2);
                let bump = b.contrast * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                for c in 0..bg.channels() {
                    let (x, y) = (x as usize, y as usize);
                    let v = f.get(c, y, x) + bump;
                    f.set(c, y, x, v);
                }
            }
        }
    }
    f.quantize_8bit()
}

/// `n` independent still images, each with its own background and blobs.
pub fn gen_images(cfg: &SceneConfig, n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene {
        frames: Vec::with_capacity(n),
        centers: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let bg = background(cfg, &mut rng);
        let blobs: Vec<Blob> = (0..cfg.blobs).map(|_| random_blob(cfg, &mut rng)).collect();
        scene.frames.push(render(&bg, &blobs));
        scene.centers.push(blobs.iter().map(|b| (b.x, b.y)).collect());
    }
    scene
}

/// A video of `n` frames over a fixed background; blobs move at constant
/// velocity (at most `cfg.speed` px/frame per axis) and bounce off the edges.
pub fn gen_video(cfg: &SceneConfig, n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(cfg, &mut rng);
    let mut blobs: Vec<Blob> = (0..cfg.blobs).map(|_| random_blob(cfg, &mut rng)).collect();
    let mut scene = Scene {
        frames: Vec::with_capacity(n),
        centers: Vec::with_capacity(n),
    };
    for _ in 0..n {
        scene.frames.push(render(&bg, &blobs));
        scene.centers.push(blobs.iter().map(|b| (b.x, b.y)).collect());
        for b in &mut blobs {
            b.x += b.vx;
            b.y += b.vy;
            let (w, h) = (cfg.width as f64 - 1.0, cfg.height as f64 - 1.0);
            if b.x < 0.0 || b.x > w {
                b.vx = -b.vx;
                b.x = b.x.clamp(0.0, w);
            }
            if b.y < 0.0 || b.y > h {
                b.vy = -b.vy;
                b.y = b.y.clamp(0.0, h);
            }
        }
    }
    scene
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `frame_NNNN.ppm` files and `manifest.csv` under `dir`. Each
/// manifest line is `file,x y;x y;...` with the blob centers of that frame.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (f, centers)) in scene.frames.iter().zip(&scene.centers).enumerate() {
        let name = format!("frame_{i:04}.{}", if f.channels() == 1 { "pgm" } else { "ppm" });
        f.write_pnm(dir.join(&name))?;
        let c: Vec<String> = centers.iter().map(|(x, y)| format!("{x:.4} {y:.4}")).collect();
        manifest.push_str(&format!("{name},{}\n", c.join(";")));
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut scene = Scene {
        frames: Vec::new(),
        centers: Vec::new(),
    };
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |reason: &str| Error::Config {
            path: path.display().to_string(),
            line: n + 1,
            reason: reason.into(),
        };
        let (name, rest) = line.split_once(',').ok_or_else(|| err("expected `file,centers`"))?;
        let mut centers = Vec::new();
        for c in rest.split(';').filter(|c| !c.trim().is_empty()) {
            let mut it = c.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => centers.push((x, y)),
                _ => return Err(err("bad blob center")),
            }
        }
        scene.frames.push(Frame::read_pnm(dir.join(name))?);
        scene.centers.push(centers);
    }
    Ok(scene)
}

/// Detector training target: per-pixel maximum of unit Gaussians of width
/// `sigma` around each center, shape `(1, H, W)`.
pub fn target_heatmap(centers: &[(f64, f64)], width: usize, height: usize, sigma: f64) -> Tensor {
    Tensor::from_fn(&[1, height, width], |i| {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        centers
            .iter()
            .map(|&(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
            .fold(0.0, f64::max)
    })
}

/// Segmentation target: class 1 within `radius` pixels of a center, else 0.
pub fn target_labels(centers: &[(f64, f64)], width: usize, height: usize, radius: f64) -> Vec<usize> {
    (0..width * height)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let hit = centers
                .iter()
                .any(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius);
            usize::from(hit)
        })
        .collect()
}
