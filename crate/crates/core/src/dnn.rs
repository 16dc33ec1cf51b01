//! Toy per-pixel "final DNNs" and their differentiable accuracy proxies.
//!
//! Two heads are supported: a heatmap detector (one sigmoid channel, peaks
//! are detections) and a two-class segmenter (per-pixel logits). Both are a
//! short stack of same-padded `conv + relu` layers followed by a 1x1 head,
//! so the output has the spatial size of the input and the receptive field
//! is small and exactly known.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::graph::{CompGraph, Feed, NodeId};
use crate::metrics::{self, Detection};
use crate::params::{Adam, ParamStore};
use crate::scene::{self, Scene};
use crate::tensor::Tensor;

pub const FRAME_INPUT: &str = "frame";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DnnKind {
    Detector,
    Segmenter,
}

impl DnnKind {
    pub fn classes(self) -> usize {
        match self {
            DnnKind::Detector => 1,
            DnnKind::Segmenter => 2,
        }
    }
}

/// Hidden layers as `(width, kernel)` pairs; kernels are odd.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DnnArch {
    pub in_channels: usize,
    pub layers: Vec<(usize, usize)>,
}

impl DnnArch {
    pub fn small(in_channels: usize) -> Self {
        Self {
            in_channels,
            layers: vec![(6, 5), (6, 3)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalDnn {
    kind: DnnKind,
    arch: DnnArch,
    params: ParamStore,
}

fn layer_names(i: usize) -> (String, String) {
    (format!("l{i}.w"), format!("l{i}.b"))
}

impl FinalDnn {
    /// He-initialized network.
    pub fn new(kind: DnnKind, arch: DnnArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = arch.in_channels;
        for (i, &(width, k)) in arch.layers.iter().enumerate() {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let (wn, bn) = layer_names(i);
            params
                .insert(&wn, Tensor::from_fn(&[width, cin, k, k], |_| normal.sample(&mut rng)))
                .unwrap();
            params.insert(&bn, Tensor::zeros(&[width])).unwrap();
            cin = width;
        }
        let std = (1.0 / cin as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        params
            .insert("head.w", Tensor::from_fn(&[kind.classes(), cin, 1, 1], |_| normal.sample(&mut rng)))
            .unwrap();
        params.insert("head.b", Tensor::zeros(&[kind.classes()])).unwrap();
        Self { kind, arch, params }
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(kind: DnnKind, arch: DnnArch) -> Self {
        let mut net = Self::new(kind, arch, 0);
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        for n in names {
            let shape = net.params.get(&n).unwrap().shape().to_vec();
            net.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        net
    }

    /// Rebuilds a network from checkpoint parameters, inferring the layer
    /// stack from the tensor shapes and the kind from the head width.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let bad = |m: String| Error::Invalid(format!("not a final-DNN checkpoint: {m}"));
        let mut layers = Vec::new();
        let mut in_channels = None;
        let mut cin = 0;
        for i in 0.. {
            let (wn, bn) = layer_names(i);
            let Some(w) = params.get(&wn) else { break };
            let s = w.shape();
            if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
                return Err(bad(format!("{wn} has shape {s:?}")));
            }
            if i == 0 {
                in_channels = Some(s[1]);
            } else if s[1] != cin {
                return Err(bad(format!("{wn} expects {} inputs, previous layer has {cin}", s[1])));
            }
            if params.get(&bn).map(Tensor::shape) != Some(&[s[0]][..]) {
                return Err(bad(format!("{bn} missing or mis-shaped")));
            }
            layers.push((s[0], s[2]));
            cin = s[0];
        }
        let in_channels = in_channels.ok_or_else(|| bad("no l0.w".into()))?;
        let head = params.get("head.w").ok_or_else(|| bad("no head.w".into()))?;
        let kind = match head.shape() {
            [1, c, 1, 1] if *c == cin => DnnKind::Detector,
            [2, c, 1, 1] if *c == cin => DnnKind::Segmenter,
            s => return Err(bad(format!("head.w has shape {s:?}"))),
        };
        if params.get("head.b").map(Tensor::shape) != Some(&[kind.classes()][..]) {
            return Err(bad("head.b missing or mis-shaped".into()));
        }
        let expected = 2 * layers.len() + 2;
        if params.len() != expected {
            return Err(bad(format!("{} tensors, expected {expected}", params.len())));
        }
        Ok(Self {
            kind,
            arch: DnnArch { in_channels, layers },
            params,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.params.save(path)?)
    }

    pub fn kind(&self) -> DnnKind {
        self.kind
    }

    pub fn arch(&self) -> &DnnArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Pixels of context on each side that influence one output pixel.
    pub fn receptive_radius(&self) -> usize {
        self.arch.layers.iter().map(|&(_, k)| k / 2).sum()
    }

    /// Adds the network to `g` on top of `input` (shape `(C,H,W)`) and returns
    /// the pre-activation logits node. Parameters become graph inputs named
    /// after their store keys.
    pub fn build_logits(&self, g: &mut CompGraph, input: NodeId, trainable: bool) -> Result<NodeId> {
        let mut x = input;
        for (i, &(_, k)) in self.arch.layers.iter().enumerate() {
            let (wn, bn) = layer_names(i);
            let w = g.input(&wn, self.params.get(&wn).unwrap().shape(), trainable)?;
            let b = g.input(&bn, self.params.get(&bn).unwrap().shape(), trainable)?;
            let y = g.conv2d(x, w, Some(b), 1, k / 2)?;
            x = g.relu(y)?;
        }
        let w = g.input("head.w", self.params.get("head.w").unwrap().shape(), trainable)?;
        let b = g.input("head.b", self.params.get("head.b").unwrap().shape(), trainable)?;
        Ok(g.conv2d(x, w, Some(b), 1, 0)?)
    }

    /// Like [`FinalDnn::build_logits`], with the detector's sigmoid applied.
    pub fn build(&self, g: &mut CompGraph, input: NodeId, trainable: bool) -> Result<NodeId> {
        let logits = self.build_logits(g, input, trainable)?;
        Ok(match self.kind {
            DnnKind::Detector => g.sigmoid(logits)?,
            DnnKind::Segmenter => logits,
        })
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.channels() != self.arch.in_channels {
            return Err(Error::Invalid(format!(
                "network expects {} channels, frame has {}",
                self.arch.in_channels,
                frame.channels()
            )));
        }
        Ok(())
    }

    pub fn infer(&self, frame: &Frame) -> Result<DnnOutput> {
        self.check_frame(frame)?;
        let mut g = CompGraph::new();
        let x = g.input(FRAME_INPUT, &[frame.channels(), frame.height(), frame.width()], false)?;
        let out = self.build(&mut g, x, false)?;
        g.mark_output("out", out);
        let t = frame.to_tensor();
        let mut outs = g.evaluate(&Feed::new().with_params(&self.params).with(FRAME_INPUT, &t))?;
        Ok(DnnOutput {
            kind: self.kind,
            tensor: outs.remove("out").unwrap(),
        })
    }
}

/// Per-pixel network output: a `(1,H,W)` heatmap in `[0,1]` for the detector,
/// `(2,H,W)` logits for the segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct DnnOutput {
    pub kind: DnnKind,
    pub tensor: Tensor,
}

impl DnnOutput {
    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.detections_with(metrics::DEFAULT_SCORE_THRESH, metrics::DEFAULT_NMS_RADIUS)
    }

    pub fn detections_with(&self, score_thresh: f64, nms_radius: usize) -> Vec<Detection> {
        let plane = self.width() * self.height();
        let heat: Vec<f64> = match self.kind {
            DnnKind::Detector => self.tensor.data().to_vec(),
            // foreground probability
            DnnKind::Segmenter => {
                let d = self.tensor.data();
                (0..plane).map(|i| 1.0 / (1.0 + (d[i] - d[plane + i]).exp())).collect()
            }
        };
        metrics::extract_peaks(&heat, self.width(), self.height(), score_thresh, nms_radius)
    }

    /// Argmax class per pixel (detector: heatmap >= 0.5).
    pub fn labels(&self) -> Vec<usize> {
        let plane = self.width() * self.height();
        let d = self.tensor.data();
        match self.kind {
            DnnKind::Detector => d.iter().map(|&v| usize::from(v >= 0.5)).collect(),
            DnnKind::Segmenter => (0..plane).map(|i| usize::from(d[plane + i] > d[i])).collect(),
        }
    }

    /// Task accuracy against a reference output: peak F1 for the detector,
    /// mean IoU for the segmenter.
    pub fn accuracy_against(&self, reference: &DnnOutput) -> Result<f64> {
        match self.kind {
            DnnKind::Detector => Ok(metrics::eval_f1(
                &self.detections(),
                &reference.detections(),
                metrics::DEFAULT_DIST_THRESH,
            )),
            DnnKind::Segmenter => metrics::eval_iou(&self.labels(), &reference.labels()),
        }
    }
}

fn softmax_channels(t: &Tensor) -> Tensor {
    let classes = t.shape()[0];
    let plane = t.numel() / classes;
    let d = t.data();
    let mut out = t.clone();
    let od = out.data_mut();
    for p in 0..plane {
        let max = (0..classes).map(|c| d[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..classes).map(|c| (d[c * plane + p] - max).exp()).sum();
        for c in 0..classes {
            od[c * plane + p] = (d[c * plane + p] - max).exp() / denom;
        }
    }
    out
}

/// Adds the differentiable accuracy loss between the network output node
/// `out` and a fixed reference output. Lower is better and the loss is zero
/// when the two outputs agree.
///
/// Detector: mean squared heatmap difference. Segmenter: mean per-pixel
/// cross-entropy against the reference's softmax minus the reference's own
/// entropy (the KL divergence), so identical logits give exactly zero.
pub fn acc_diff(g: &mut CompGraph, out: NodeId, reference: &DnnOutput) -> Result<NodeId> {
    if g.shape(out) != reference.tensor.shape() {
        return Err(Error::Invalid(format!(
            "output shape {:?} differs from reference {:?}",
            g.shape(out),
            reference.tensor.shape()
        )));
    }
    match reference.kind {
        DnnKind::Detector => {
            let r = g.constant(reference.tensor.clone());
            let d = g.sub(out, r)?;
            let sq = g.square(d)?;
            Ok(g.mean(sq)?)
        }
        DnnKind::Segmenter => {
            let p = softmax_channels(&reference.tensor);
            let classes = p.shape()[0];
            let plane = p.numel() / classes;
            let entropy: f64 = p
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -v * v.ln())
                .sum::<f64>()
                / plane as f64;
            let t = g.constant(p);
            let ce = g.softmax_ce(out, t)?;
            let h = g.constant(Tensor::scalar(entropy));
            Ok(g.sub(ce, h)?)
        }
    }
}

/// Per-pixel terms of [`acc_diff`]; their mean is the loss.
pub fn acc_diff_pixels(out: &DnnOutput, reference: &DnnOutput) -> Result<Vec<f64>> {
    if out.tensor.shape() != reference.tensor.shape() || out.kind != reference.kind {
        return Err(Error::Invalid(format!(
            "output shape {:?} differs from reference {:?}",
            out.tensor.shape(),
            reference.tensor.shape()
        )));
    }
    let (o, r) = (out.tensor.data(), reference.tensor.data());
    Ok(match reference.kind {
        DnnKind::Detector => o.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).collect(),
        DnnKind::Segmenter => {
            let classes = reference.tensor.shape()[0];
            let plane = r.len() / classes;
            let p = softmax_channels(&reference.tensor);
            let q = softmax_channels(&out.tensor);
            let (p, q) = (p.data(), q.data());
            (0..plane)
                .map(|i| {
                    (0..classes)
                        .map(|c| {
                            let pc = p[c * plane + i];
                            if pc > 0.0 {
                                pc * (pc.ln() - q[c * plane + i].max(f64::MIN_POSITIVE).ln())
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect()
        }
    })
}

/// Value of [`acc_diff`] between two concrete outputs.
pub fn acc_diff_value(out: &DnnOutput, reference: &DnnOutput) -> Result<f64> {
    let mut g = CompGraph::new();
    let o = g.constant(out.tensor.clone());
    let l = acc_diff(&mut g, o, reference)?;
    g.mark_output("loss", l);
    Ok(g.evaluate(&Feed::new())?["loss"].data()[0].max(0.0))
}

/// Mean loss and mean gradient over `samples`, evaluated per sample (in
/// parallel) and reduced in sample order so the result is deterministic.
pub fn batch_gradient<S: Sync>(
    samples: &[S],
    per_sample: impl Fn(&S) -> Result<(f64, BTreeMap<String, Tensor>)> + Sync,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let results: Vec<(f64, BTreeMap<String, Tensor>)> = samples.par_iter().map(&per_sample).collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, grads) in results {
        loss += l;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&g)?,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok((loss / n, acc))
}

/// Settings for fitting a fixture network to generated scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct DnnTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Width of the Gaussian detector target.
    pub target_sigma: f64,
    /// Extra weight on target pixels for the detector loss.
    pub positive_weight: f64,
    /// Foreground radius, in units of the target sigma, for segmentation labels.
    pub seg_radius: f64,
}

impl Default for DnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 0.01,
            target_sigma: 1.5,
            positive_weight: 10.0,
            seg_radius: 2.5,
        }
    }
}

/// Fits `dnn` to the ground truth of `scene` with Adam; returns per-epoch
/// mean loss.
pub fn fit_to_scene(dnn: &mut FinalDnn, scene: &Scene, cfg: &DnnTrainConfig) -> Result<Vec<f64>> {
    let targets: Vec<(Tensor, Tensor, Tensor)> = scene
        .frames
        .iter()
        .zip(&scene.centers)
        .map(|(f, centers)| {
            let (w, h) = (f.width(), f.height());
            match dnn.kind {
                DnnKind::Detector => {
                    let t = scene::target_heatmap(centers, w, h, cfg.target_sigma);
                    let wt = t.map(|v| 1.0 + (cfg.positive_weight - 1.0) * v);
                    (f.to_tensor(), t, wt)
                }
                DnnKind::Segmenter => {
                    let labels = scene::target_labels(centers, w, h, cfg.seg_radius);
                    let onehot = Tensor::from_fn(&[2, h, w], |i| {
                        let (c, p) = (i / (w * h), i % (w * h));
                        f64::from(u8::from(labels[p] == c))
                    });
                    (f.to_tensor(), onehot, Tensor::zeros(&[1]))
                }
            }
        })
        .collect();

    let mut opt = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in targets.chunks(cfg.batch.max(1)) {
            let params = dnn.params.clone();
            let (loss, grads) = batch_gradient(chunk, |(x, t, wt)| {
                let mut g = CompGraph::new();
                let xi = g.input(FRAME_INPUT, x.shape(), false)?;
                let logits = dnn.build_logits(&mut g, xi, true)?;
                let ti = g.constant(t.clone());
                let loss = match dnn.kind {
                    DnnKind::Detector => {
                        let wi = g.constant(wt.clone());
                        g.weighted_bce(logits, ti, wi)?
                    }
                    DnnKind::Segmenter => g.softmax_ce(logits, ti)?,
                };
                let feed = Feed::new().with_params(&params).with(FRAME_INPUT, x);
                g.evaluate(&feed)?;
                let v = g.value(loss).unwrap().data()[0];
                Ok((v, g.backward(loss)?))
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            opt.step(&mut dnn.params, &grads)?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: u64, w: usize, h: usize) -> Frame {
        let s = scene::gen_images(
            &scene::SceneConfig {
                width: w,
                height: h,
                ..Default::default()
            },
            1,
            seed,
        );
        s.frames[0].clone()
    }

    #[test]
    fn zero_net_gives_half_heatmap() {
        let net = FinalDnn::zeroed(DnnKind::Detector, DnnArch::small(3));
        let out = net.infer(&Frame::filled(16, 16, 3, 0.0)).unwrap();
        assert_eq!(out.tensor.shape(), &[1, 16, 16]);
        assert!(out.tensor.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inference_is_deterministic_and_shape_preserving() {
        let net = FinalDnn::new(DnnKind::Segmenter, DnnArch::small(3), 4);
        let f = frame(1, 32, 16);
        let a = net.infer(&f).unwrap();
        let b = net.infer(&f.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tensor.shape(), &[2, 16, 32]);
        assert!(net.infer(&Frame::filled(16, 16, 1, 0.5)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_infers_arch() {
        let net = FinalDnn::new(DnnKind::Segmenter, DnnArch::small(3), 2);
        let back = FinalDnn::from_params(ParamStore::from_bytes(&net.params().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.receptive_radius(), 3);
        let mut broken = net.params().clone();
        broken.insert("extra", Tensor::zeros(&[1])).unwrap();
        assert!(FinalDnn::from_params(broken).is_err());
    }

    #[test]
    fn detector_acc_diff_values() {
        let zeros = DnnOutput {
            kind: DnnKind::Detector,
            tensor: Tensor::zeros(&[1, 4, 4]),
        };
        let ones = DnnOutput {
            kind: DnnKind::Detector,
            tensor: Tensor::ones(&[1, 4, 4]),
        };
        assert_eq!(acc_diff_value(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(acc_diff_value(&zeros, &ones).unwrap(), 1.0);
        let bad = DnnOutput {
            kind: DnnKind::Detector,
            tensor: Tensor::zeros(&[1, 4, 2]),
        };
        assert!(acc_diff_value(&bad, &zeros).is_err());
    }

    #[test]
    fn segmenter_acc_diff_hand_computed() {
        // 2x2 pixels, 2 classes. Reference logits give p_ref(fg) per pixel:
        //   px0: (0, 0)      -> (1/2, 1/2)
        //   px1: (0, ln 3)   -> (1/4, 3/4)
        //   px2: (ln 3, 0)   -> (3/4, 1/4)
        //   px3: (0, 0)      -> (1/2, 1/2)
        // Output logits all zero -> q = (1/2, 1/2) everywhere.
        // KL(p || q) per pixel = sum p ln(p / q):
        //   px0, px3: 0
        //   px1, px2: 1/4 ln(1/2) + 3/4 ln(3/2)
        let l3 = 3f64.ln();
        let reference = DnnOutput {
            kind: DnnKind::Segmenter,
            tensor: Tensor::new(&[2, 2, 2], vec![0.0, 0.0, l3, 0.0, 0.0, l3, 0.0, 0.0]).unwrap(),
        };
        let out = DnnOutput {
            kind: DnnKind::Segmenter,
            tensor: Tensor::zeros(&[2, 2, 2]),
        };
        let kl_px = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        let expected = 2.0 * kl_px / 4.0;
        assert!((acc_diff_value(&out, &reference).unwrap() - expected).abs() < 1e-12);
        assert!(acc_diff_value(&reference, &reference).unwrap().abs() < 1e-12);
    }

    #[test]
    fn acc_diff_gradient_matches_finite_differences() {
        use crate::graph::{grad_check, GraphObjective};
        for kind in [DnnKind::Detector, DnnKind::Segmenter] {
            let net = FinalDnn::new(kind, DnnArch { in_channels: 3, layers: vec![(3, 3), (3, 3)] }, 11);
            let h = frame(5, 16, 16);
            let reference = net.infer(&h).unwrap();
            let mut g = CompGraph::new();
            let x = g.input(FRAME_INPUT, &[3, 16, 16], true).unwrap();
            let out = net.build(&mut g, x, false).unwrap();
            let loss = acc_diff(&mut g, out, &reference).unwrap();
            let mut point = ParamStore::new();
            let l = crate::codec::degrade_frame(&h, 40).unwrap();
            point.insert(FRAME_INPUT, l.to_tensor()).unwrap();
            let fixed: BTreeMap<String, Tensor> = net.params().iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            let mut obj = GraphObjective {
                graph: &mut g,
                loss,
                fixed: &fixed,
            };
            let err = grad_check(&mut obj, &point, 1e-5).unwrap();
            assert!(err < 1e-3, "{kind:?}: {err}");
        }
    }
}
