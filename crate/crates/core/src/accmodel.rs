//! The cheap quality selector: a small strided conv net that emits one logit
//! per macroblock, trained on top-c AccGrad masks without touching the final
//! network again.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{compute_accgrad, PropagationCounter};
use crate::codec::{degrade_frame, DEFAULT_QP_LO};
use crate::dnn::{batch_gradient, FinalDnn, FRAME_INPUT};
use crate::error::{Error, GraphError, Result};
use crate::frame::Frame;
use crate::graph::{CompGraph, Feed, NodeId};
use crate::masks::{topc_mask, QualityMask};
use crate::params::{sgd_step, Adam, ParamStore};
use crate::tensor::Tensor;

/// Channel widths of the four stride-2 encoder stages at width multiplier 1.
pub const ENCODER_WIDTHS: [usize; 4] = [8, 16, 32, 32];
const HEAD_WIDTH: usize = 16;

fn enc_names(i: usize) -> (String, String) {
    (format!("enc{i}.w"), format!("enc{i}.b"))
}

fn head_names(i: usize) -> (String, String) {
    (format!("head{i}.w"), format!("head{i}.b"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccModelNet {
    params: ParamStore,
}

impl AccModelNet {
    /// He-initialized selector for `channels`-channel frames with all hidden
    /// widths scaled by `width_mult`.
    pub fn new(channels: usize, width_mult: f64, seed: u64) -> Self {
        assert!(width_mult > 0.0, "width multiplier must be positive");
        let scale = |c: usize| ((c as f64 * width_mult).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut conv = |params: &mut ParamStore, (wn, bn): (String, String), o: usize, i: usize, k: usize| {
            let std = (2.0 / (i * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let w = Tensor::from_fn(&[o, i, k, k], |_| normal.sample(&mut rng));
            params.insert(&wn, w).unwrap();
            params.insert(&bn, Tensor::zeros(&[o])).unwrap();
        };
        let mut cin = channels;
        for (i, &c) in ENCODER_WIDTHS.iter().enumerate() {
            conv(&mut params, enc_names(i), scale(c), cin, 3);
            cin = scale(c);
        }
        let hw = scale(HEAD_WIDTH);
        conv(&mut params, head_names(0), hw, cin, 3);
        conv(&mut params, head_names(1), hw, hw, 1);
        conv(&mut params, head_names(2), 1, hw, 1);
        Self { params }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let mut names: Vec<(String, String)> = (0..4).map(enc_names).collect();
        names.extend((0..3).map(head_names));
        let mut cin = None;
        for (wn, bn) in &names {
            let (w, b) = match (params.get(wn), params.get(bn)) {
                (Some(w), Some(b)) => (w, b),
                _ => return Err(Error::Invalid(format!("selector checkpoint lacks `{wn}` or `{bn}`"))),
            };
            if w.rank() != 4 || b.shape() != [w.shape()[0]] || cin.is_some_and(|c| c != w.shape()[1]) {
                return Err(Error::Invalid(format!("selector parameter `{wn}` has shape {:?}", w.shape())));
            }
            cin = Some(w.shape()[0]);
        }
        if cin != Some(1) || params.len() != names.len() * 2 {
            return Err(Error::Invalid("selector checkpoint has unexpected parameters".into()));
        }
        Ok(Self { params })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn in_channels(&self) -> usize {
        self.params.get("enc0.w").unwrap().shape()[1]
    }

    /// Multiply-accumulates of one forward pass on a `width x height` frame.
    pub fn macs(&self, width: usize, height: usize) -> usize {
        let (mut w, mut h) = (width, height);
        let mut total = 0;
        for i in 0..4 {
            (w, h) = (w.div_ceil(2), h.div_ceil(2));
            total += w * h * self.params.get(&enc_names(i).0).unwrap().numel();
        }
        for i in 0..3 {
            total += w * h * self.params.get(&head_names(i).0).unwrap().numel();
        }
        total
    }

    /// Per-block logits node of shape `(1, H/16, W/16)`.
    pub fn build(&self, g: &mut CompGraph, input: NodeId, trainable: bool) -> Result<NodeId> {
        let offset = g.constant(Tensor::full(g.shape(input), -0.5));
        let mut x = g.add(input, offset)?;
        let layer = |g: &mut CompGraph, x: NodeId, (wn, bn): (String, String), stride: usize, relu: bool| -> Result<NodeId> {
            let wt = self.params.get(&wn).unwrap();
            let pad = wt.shape()[2] / 2;
            let w = g.input(&wn, wt.shape(), trainable)?;
            let b = g.input(&bn, self.params.get(&bn).unwrap().shape(), trainable)?;
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            Ok(if relu { g.relu(y)? } else { y })
        };
        for i in 0..4 {
            x = layer(g, x, enc_names(i), 2, true)?;
        }
        x = layer(g, x, head_names(0), 1, true)?;
        x = layer(g, x, head_names(1), 1, true)?;
        layer(g, x, head_names(2), 1, false)
    }

    /// Per-block high-quality probabilities, row-major over the block grid.
    pub fn probabilities(&self, frame: &Frame) -> Result<Vec<f64>> {
        if !frame.is_padded() {
            return Err(Error::Invalid(format!(
                "{}x{} frame is not padded to whole macroblocks",
                frame.width(),
                frame.height()
            )));
        }
        if frame.channels() != self.in_channels() {
            return Err(Error::Invalid(format!(
                "selector expects {} channels, frame has {}",
                self.in_channels(),
                frame.channels()
            )));
        }
        let mut g = CompGraph::new();
        let x = g.input(FRAME_INPUT, &[frame.channels(), frame.height(), frame.width()], false)?;
        let logits = self.build(&mut g, x, false)?;
        let p = g.sigmoid(logits)?;
        g.mark_output("p", p);
        let t = frame.to_tensor();
        let out = g.evaluate(&Feed::new().with_params(&self.params).with(FRAME_INPUT, &t))?;
        let p = out["p"].data().to_vec();
        debug_assert_eq!(p.len(), frame.grid().0 * frame.grid().1);
        Ok(p)
    }
}

/// Block mask of probabilities `>= alpha`, plus the probabilities.
pub fn predict_mask(model: &AccModelNet, frame: &Frame, alpha: f64) -> Result<(QualityMask, Vec<f64>)> {
    let probs = model.probabilities(frame)?;
    let (w, h) = frame.grid();
    let mask = QualityMask::new(w, h, probs.iter().map(|&p| p >= alpha).collect())?;
    Ok((mask, probs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub lr: f64,
    pub positive_weight: f64,
    pub downsample: usize,
    /// Fraction of blocks labeled high quality per frame.
    pub budget: f64,
    pub qp_low: u8,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            epochs: 15,
            lr: 0.01,
            positive_weight: 4.0,
            downsample: 10,
            budget: 0.10,
            qp_low: DEFAULT_QP_LO,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        if !(self.positive_weight > 0.0) {
            return Err(Error::Invalid(format!("positive weight {} must be > 0", self.positive_weight)));
        }
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(Error::Invalid(format!("budget {} outside (0, 1]", self.budget)));
        }
        if self.downsample == 0 || self.batch == 0 {
            return Err(Error::Invalid("downsample and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be > 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub frame: Frame,
    pub label: QualityMask,
}

/// Indices kept by seeded 1-in-`downsample` sampling, ascending.
pub fn downsample_indices(n: usize, downsample: usize, seed: u64) -> Vec<usize> {
    let keep = n.div_ceil(downsample.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Ground-truth masks: top `round(budget * blocks)` AccGrad blocks of each
/// kept image.
pub fn build_dataset(images: &[Frame], dnn: &FinalDnn, cfg: &TrainConfig, counter: &PropagationCounter) -> Result<Vec<LabeledSample>> {
    use rayon::prelude::*;
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Invalid("no images to label".into()));
    }
    downsample_indices(images.len(), cfg.downsample, cfg.seed)
        .into_par_iter()
        .map(|i| {
            let hq = &images[i];
            let lq = degrade_frame(hq, cfg.qp_low).map_err(|e| Error::Frame {
                index: i,
                source: Box::new(e.into()),
            })?;
            let map = compute_accgrad(dnn, hq, &lq, counter)?;
            let (w, h) = map.dims();
            let c = (cfg.budget * (w * h) as f64).round() as usize;
            Ok(LabeledSample {
                frame: hq.clone(),
                label: topc_mask(&map, c),
            })
        })
        .collect()
}

fn sample_tensors(s: &LabeledSample, positive_weight: f64) -> (Tensor, Tensor, Tensor) {
    let (w, h) = s.label.dims();
    let t = Tensor::from_fn(&[1, h, w], |i| f64::from(u8::from(s.label.bits()[i])));
    let wt = t.map(|v| 1.0 + (positive_weight - 1.0) * v);
    (s.frame.to_tensor(), t, wt)
}

/// Weighted binary cross-entropy of `model` on `samples`, plus its gradient.
fn loss_and_grad(model: &AccModelNet, batch: &[(Tensor, Tensor, Tensor)]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    batch_gradient(batch, |(x, t, wt)| {
        let mut g = CompGraph::new();
        let xi = g.input(FRAME_INPUT, x.shape(), false)?;
        let logits = model.build(&mut g, xi, true)?;
        let ti = g.constant(t.clone());
        let wi = g.constant(wt.clone());
        let loss = g.weighted_bce(logits, ti, wi)?;
        g.evaluate(&Feed::new().with_params(&model.params).with(FRAME_INPUT, x))?;
        let v = g.value(loss).unwrap().data()[0];
        Ok((v, g.backward(loss)?))
    })
}

/// Mean weighted BCE over `samples`.
pub fn eval_loss(model: &AccModelNet, samples: &[LabeledSample], positive_weight: f64) -> Result<f64> {
    let data: Vec<_> = samples.iter().map(|s| sample_tensors(s, positive_weight)).collect();
    Ok(loss_and_grad(model, &data)?.0)
}

/// Gradient descent over seeded mini-batches; returns the mean training loss of each
/// epoch. Never runs the final network.
pub fn train(model: &mut AccModelNet, samples: &[LabeledSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let data: Vec<_> = samples.iter().map(|s| sample_tensors(s, cfg.positive_weight)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0);
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<_> = idx.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = match loss_and_grad(model, &batch) {
                Err(Error::Graph(GraphError::NonFinite { .. })) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                r => r?,
            };
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            match cfg.optimizer {
                Optimizer::Sgd => sgd_step(&mut model.params, &grads, cfg.lr)?,
                Optimizer::Adam => adam.step(&mut model.params, &grads)?,
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        history.push(total / seen as f64);
    }
    Ok(history)
}

/// Block-level F1 of predicted masks against the labels.
pub fn block_f1(model: &AccModelNet, samples: &[LabeledSample], alpha: f64) -> Result<f64> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for s in samples {
        let (m, _) = predict_mask(model, &s.frame, alpha)?;
        for (&p, &l) in m.bits().iter().zip(s.label.bits()) {
            tp += usize::from(p && l);
            fp += usize::from(p && !l);
            fneg += usize::from(!p && l);
        }
    }
    Ok(if tp == 0 {
        if fp == 0 && fneg == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    })
}

/// Final-network passes needed to build training labels, with and without
/// decoupling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub decoupled_passes: u64,
    pub conventional_passes: u64,
    pub ratio: f64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "decoupled_passes": self.decoupled_passes,
            "conventional_passes": self.conventional_passes,
            "ratio": self.ratio,
        })
        .to_string()
    }
}

/// Decoupled: 3 passes (2 forward, 1 backward) per kept image, once.
/// Conventional: 3 passes per image per epoch.
pub fn cost_report(n_images: usize, cfg: &TrainConfig) -> Result<CostReport> {
    if n_images == 0 {
        return Err(Error::Invalid("cost report needs at least one image".into()));
    }
    cfg.validate()?;
    let decoupled = 3 * n_images.div_ceil(cfg.downsample) as u64;
    let conventional = 3 * (n_images * cfg.epochs) as u64;
    Ok(CostReport {
        decoupled_passes: decoupled,
        conventional_passes: conventional,
        ratio: conventional as f64 / decoupled as f64,
    })
}

/// Writes each sample as `frame_NNNN.ppm` / `mask_NNNN.pbm` under `dir` and
/// returns the manifest text, one `frame_path,mask_path` line per sample.
pub fn write_dataset(samples: &[LabeledSample], dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let fp = dir.join(format!("frame_{i:04}.{}", if s.frame.channels() == 1 { "pgm" } else { "ppm" }));
        let mp = dir.join(format!("mask_{i:04}.pbm"));
        s.frame.write_pnm(&fp)?;
        std::fs::write(&mp, s.label.to_pbm())?;
        manifest.push_str(&format!("{},{}\n", fp.display(), mp.display()));
    }
    std::fs::write(dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

/// Reads a manifest written by [`write_dataset`].
pub fn read_dataset(manifest: &Path) -> Result<Vec<LabeledSample>> {
    let text = std::fs::read_to_string(manifest)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (f, m) = line.split_once(',').ok_or_else(|| Error::Config {
            path: manifest.display().to_string(),
            line: n + 1,
            reason: "expected `frame_path,mask_path`".into(),
        })?;
        let frame = Frame::read_pnm(f.trim())?;
        let label = QualityMask::from_pbm(&std::fs::read_to_string(m.trim())?)?;
        if label.dims() != frame.grid() {
            return Err(Error::Config {
                path: manifest.display().to_string(),
                line: n + 1,
                reason: format!("mask {:?} does not match frame grid {:?}", label.dims(), frame.grid()),
            });
        }
        out.push(LabeledSample { frame, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::{DnnArch, DnnKind};
    use crate::frame::MB;
    use crate::scene::{gen_images, SceneConfig};

    #[test]
    fn output_grid_matches_blocks() {
        let m = AccModelNet::new(3, 1.0, 1);
        for (w, h) in [(16, 16), (64, 32), (48, 80)] {
            let p = m.probabilities(&Frame::filled(w, h, 3, 0.3)).unwrap();
            assert_eq!(p.len(), (w / MB) * (h / MB));
            assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        assert!(m.probabilities(&Frame::filled(20, 16, 3, 0.3)).is_err());
    }

    #[test]
    fn predict_mask_thresholds() {
        let m = AccModelNet::new(3, 1.0, 2);
        let f = gen_images(&SceneConfig::default(), 1, 3).frames.remove(0);
        let (all, probs) = predict_mask(&m, &f, 0.0).unwrap();
        assert_eq!(all.count(), 16);
        let max = probs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(predict_mask(&m, &f, max + 1e-9).unwrap().0.count(), 0);
        assert_eq!(predict_mask(&m, &f, 0.3).unwrap(), predict_mask(&m, &f, 0.3).unwrap());
    }

    #[test]
    fn cost_report_arithmetic() {
        let cfg = TrainConfig::default();
        let r = cost_report(1000, &cfg).unwrap();
        assert_eq!((r.decoupled_passes, r.conventional_passes, r.ratio), (300, 45000, 150.0));
        let one = TrainConfig {
            epochs: 1,
            downsample: 1,
            ..cfg.clone()
        };
        assert_eq!(cost_report(7, &one).unwrap().ratio, 1.0);
        let ds1 = TrainConfig { downsample: 1, ..cfg };
        assert_eq!(cost_report(100, &ds1).unwrap().ratio, 15.0);
        assert!(cost_report(0, &ds1).is_err());
    }

    #[test]
    fn downsampling_keeps_ceil() {
        assert_eq!(downsample_indices(100, 10, 1).len(), 10);
        assert_eq!(downsample_indices(101, 10, 1).len(), 11);
        assert_eq!(downsample_indices(5, 1, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(downsample_indices(100, 10, 7), downsample_indices(100, 10, 7));
    }

    #[test]
    fn dataset_counts_passes() {
        let dnn = FinalDnn::new(DnnKind::Detector, DnnArch::small(3), 1);
        let frames = gen_images(&SceneConfig::default(), 30, 4).frames;
        let counter = PropagationCounter::new();
        let cfg = TrainConfig::default();
        let ds = build_dataset(&frames, &dnn, &cfg, &counter).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(counter.get(), (6, 3));
        assert!(ds.iter().all(|s| s.label.count() == 2));
    }

    #[test]
    fn flat_frame_labels_first_blocks() {
        let dnn = FinalDnn::new(DnnKind::Detector, DnnArch::small(3), 1);
        let flat = vec![Frame::filled(64, 64, 3, 128.0 / 255.0)];
        assert_eq!(degrade_frame(&flat[0], 0).unwrap(), flat[0]);
        let cfg = TrainConfig {
            downsample: 1,
            qp_low: 0,
            budget: 0.25,
            ..TrainConfig::default()
        };
        let ds = build_dataset(&flat, &dnn, &cfg, &PropagationCounter::new()).unwrap();
        let expected: Vec<bool> = (0..16).map(|i| i < 4).collect();
        assert_eq!(ds[0].label.bits(), &expected[..]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = AccModelNet::new(3, 0.5, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sel.agp");
        m.save(&p).unwrap();
        assert_eq!(AccModelNet::load(&p).unwrap(), m);
        let mut bad = m.params().clone();
        bad.insert("extra", Tensor::zeros(&[1])).unwrap();
        assert!(AccModelNet::from_params(bad).is_err());
    }

    #[test]
    fn dataset_manifest_round_trip() {
        let frames = gen_images(&SceneConfig::default(), 2, 5).frames;
        let samples: Vec<LabeledSample> = frames
            .into_iter()
            .map(|f| {
                let mut label = QualityMask::empty(4, 4);
                label.set(1, 2, true);
                LabeledSample { frame: f, label }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&samples, dir.path()).unwrap();
        assert_eq!(manifest.lines().count(), 2);
        let back = read_dataset(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn all_negative_labels_drive_probabilities_down() {
        let frames = gen_images(&SceneConfig::default(), 5, 6).frames;
        let samples: Vec<LabeledSample> = frames
            .into_iter()
            .map(|frame| LabeledSample {
                frame,
                label: QualityMask::empty(4, 4),
            })
            .collect();
        let mut m = AccModelNet::new(3, 1.0, 3);
        let cfg = TrainConfig::default();
        train(&mut m, &samples, &cfg).unwrap();
        let mean: f64 = samples
            .iter()
            .map(|s| m.probabilities(&s.frame).unwrap().iter().sum::<f64>() / 16.0)
            .sum::<f64>()
            / 5.0;
        assert!(mean < 0.1, "mean probability {mean}");
    }

    #[test]
    fn divergence_names_epoch() {
        let frames = gen_images(&SceneConfig::default(), 2, 6).frames;
        let samples: Vec<LabeledSample> = frames
            .into_iter()
            .map(|frame| LabeledSample {
                frame,
                label: QualityMask::full(4, 4),
            })
            .collect();
        let mut m = AccModelNet::new(3, 1.0, 3);
        let cfg = TrainConfig {
            lr: 1e200,
            ..TrainConfig::default()
        };
        match train(&mut m, &samples, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < cfg.epochs),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
