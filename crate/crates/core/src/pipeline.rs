//! Camera-side streaming: sample the selector every `k` frames, dilate its
//! mask, RoI-encode chunk by chunk, then model delay and score accuracy.

use std::time::Instant;

use crate::accmodel::{predict_mask, AccModelNet};
use crate::codec::{self, bitstream, mask_to_qpmap, CodecConfig, EncodedFrame, DEFAULT_QP_HI, DEFAULT_QP_LO};
use crate::dnn::{DnnOutput, FinalDnn};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::masks::{dilate_mask, QualityMask};

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    /// Frames per chunk.
    pub chunk: usize,
    /// Selector sampling period in frames.
    pub k: usize,
    pub alpha: f64,
    pub gamma: usize,
    pub qp_hi: u8,
    pub qp_lo: u8,
    /// Link bandwidth in bits per second, shared by `streams` streams.
    pub bandwidth: f64,
    pub streams: usize,
    /// One-way latency in seconds.
    pub latency: f64,
    pub fps: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk: 10,
            k: 10,
            alpha: 0.2,
            gamma: 5,
            qp_hi: DEFAULT_QP_HI,
            qp_lo: DEFAULT_QP_LO,
            bandwidth: 2.5e6,
            streams: 5,
            latency: 0.1,
            fps: 30.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.chunk == 0 || self.streams == 0 {
            return Err(Error::Invalid("chunk, k and streams must be at least 1".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Invalid(format!("bandwidth {} must be > 0", self.bandwidth)));
        }
        if !(self.alpha >= 0.0) || !(self.latency >= 0.0) || !(self.fps > 0.0) {
            return Err(Error::Invalid("alpha and latency must be >= 0, fps > 0".into()));
        }
        if self.qp_hi > self.qp_lo || self.qp_lo > codec::QP_MAX {
            return Err(Error::Invalid(format!("bad qp pair {}/{}", self.qp_hi, self.qp_lo)));
        }
        Ok(())
    }
}

/// Seconds to ship `bytes` over the fair share of the link, plus latency.
pub fn delay_model(bytes: usize, cfg: &StreamConfig) -> f64 {
    8.0 * bytes as f64 / (cfg.bandwidth / cfg.streams as f64) + cfg.latency
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkResult {
    pub index: usize,
    /// Global index of the first frame.
    pub first_frame: usize,
    pub bytes: usize,
    pub selector_invocations: usize,
    /// For each frame, the global index of the frame whose mask it reuses.
    pub mask_source: Vec<usize>,
    pub masks: Vec<QualityMask>,
    /// Selector multiply-accumulates plus coded coefficients.
    pub encode_ops: u64,
    pub encode_seconds: f64,
    pub streaming_delay: f64,
    /// Filled in by [`evaluate_chunks`].
    pub accuracy: Vec<f64>,
}

/// Selector masks for every frame, sampling at `0, k, 2k, ...`.
/// Returns `(mask, source index)` per frame.
fn stream_masks(frames: &[Frame], model: &AccModelNet, cfg: &StreamConfig) -> Result<Vec<(QualityMask, usize)>> {
    let mut out: Vec<(QualityMask, usize)> = Vec::with_capacity(frames.len());
    for (j, f) in frames.iter().enumerate() {
        if j % cfg.k == 0 {
            let (m, _) = predict_mask(model, f, cfg.alpha).map_err(|e| Error::Frame {
                index: j,
                source: Box::new(e),
            })?;
            out.push((dilate_mask(&m, cfg.gamma), j));
        } else {
            let prev = out[j - 1].clone();
            out.push(prev);
        }
    }
    Ok(out)
}

fn coded_pairs(enc: &EncodedFrame, grid: (usize, usize), channels: usize) -> u64 {
    let blocks = grid.0 * grid.1;
    let sub_blocks = blocks * channels * 4;
    let payload = enc.size() - bitstream::HEADER_LEN - blocks - 4;
    ((payload - sub_blocks) / 3) as u64
}

/// Encodes `frames` into independent chunk containers.
pub fn encode_stream(frames: &[Frame], model: &AccModelNet, cfg: &StreamConfig) -> Result<(Vec<Vec<u8>>, Vec<ChunkResult>)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Invalid("no frames to encode".into()));
    }
    let selector_macs = model.macs(frames[0].width(), frames[0].height()) as u64;
    let codec_cfg = CodecConfig::default();
    let start = Instant::now();
    let masks = stream_masks(frames, model, cfg)?;
    let mask_seconds = start.elapsed().as_secs_f64();

    let mut chunks = Vec::new();
    let mut results = Vec::new();
    for (ci, range) in (0..frames.len()).step_by(cfg.chunk).map(|s| s..(s + cfg.chunk).min(frames.len())).enumerate() {
        let t = Instant::now();
        let mut encoded = Vec::with_capacity(range.len());
        let mut ops = 0;
        for j in range.clone() {
            let qpmap = mask_to_qpmap(&masks[j].0, cfg.qp_hi, cfg.qp_lo)?;
            let enc = codec::encode_frame(&frames[j], &qpmap, &codec_cfg).map_err(|e| Error::Frame {
                index: j,
                source: Box::new(e.into()),
            })?;
            ops += coded_pairs(&enc, frames[j].grid(), frames[j].channels());
            encoded.push(enc);
        }
        let invocations = range.clone().filter(|j| j % cfg.k == 0).count();
        ops += invocations as u64 * selector_macs;
        let bytes = codec::write_container(&encoded);
        let share = mask_seconds * invocations as f64 / frames.len().div_ceil(cfg.k) as f64;
        results.push(ChunkResult {
            index: ci,
            first_frame: range.start,
            bytes: bytes.len(),
            selector_invocations: invocations,
            mask_source: range.clone().map(|j| masks[j].1).collect(),
            masks: range.clone().map(|j| masks[j].0.clone()).collect(),
            encode_ops: ops,
            encode_seconds: t.elapsed().as_secs_f64() + share,
            streaming_delay: delay_model(bytes.len(), cfg),
            accuracy: Vec::new(),
        });
        chunks.push(bytes);
    }
    Ok((chunks, results))
}

/// Encodes every frame with the same fixed mask, chunked like
/// [`encode_stream`]. Useful for all-high / all-low baselines.
pub fn encode_fixed(frames: &[Frame], mask: &QualityMask, cfg: &StreamConfig) -> Result<Vec<Vec<u8>>> {
    cfg.validate()?;
    let qpmap = mask_to_qpmap(mask, cfg.qp_hi, cfg.qp_lo)?;
    let codec_cfg = CodecConfig::default();
    frames
        .chunks(cfg.chunk)
        .map(|chunk| {
            let enc = chunk
                .iter()
                .map(|f| codec::encode_frame(f, &qpmap, &codec_cfg))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(codec::write_container(&enc))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamEval {
    pub per_frame: Vec<f64>,
    /// `None` for an empty stream.
    pub mean: Option<f64>,
}

/// Reference outputs of the final network on the high-quality frames.
pub fn reference_outputs(dnn: &FinalDnn, frames: &[Frame]) -> Result<Vec<DnnOutput>> {
    use rayon::prelude::*;
    frames.par_iter().map(|f| dnn.infer(f)).collect()
}

/// Decodes every chunk and scores each frame against the cached reference
/// outputs.
pub fn evaluate_stream(chunks: &[Vec<u8>], dnn: &FinalDnn, references: &[DnnOutput]) -> Result<StreamEval> {
    use rayon::prelude::*;
    let mut encoded = Vec::new();
    for (ci, c) in chunks.iter().enumerate() {
        let frames = codec::read_container(c).map_err(|e| Error::Invalid(format!("chunk {ci}: {e}")))?;
        encoded.extend(frames);
    }
    if encoded.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} decoded frames for {} references",
            encoded.len(),
            references.len()
        )));
    }
    let cfg = CodecConfig::default();
    let per_frame: Vec<f64> = encoded
        .par_iter()
        .zip(references)
        .enumerate()
        .map(|(i, (enc, r))| {
            let wrap = |e: Error| Error::Frame {
                index: i,
                source: Box::new(e),
            };
            let frame = codec::decode_frame(enc, &cfg).map_err(|e| wrap(e.into()))?;
            dnn.infer(&frame).and_then(|o| o.accuracy_against(r)).map_err(wrap)
        })
        .collect::<Result<_>>()?;
    let mean = (!per_frame.is_empty()).then(|| per_frame.iter().sum::<f64>() / per_frame.len() as f64);
    Ok(StreamEval { per_frame, mean })
}

/// Runs [`evaluate_stream`] and stores each frame's accuracy in its chunk.
pub fn evaluate_chunks(chunks: &[Vec<u8>], results: &mut [ChunkResult], dnn: &FinalDnn, references: &[DnnOutput]) -> Result<StreamEval> {
    let eval = evaluate_stream(chunks, dnn, references)?;
    for r in results.iter_mut() {
        let n = r.mask_source.len();
        r.accuracy = eval.per_frame[r.first_frame..r.first_frame + n].to_vec();
    }
    Ok(eval)
}

/// Fraction of block decisions unchanged `d` frames later, for
/// `d = 1..=max_distance`, averaged over all frame pairs at that distance.
pub fn persistence_from_masks(masks: &[QualityMask], max_distance: usize) -> Vec<(usize, f64)> {
    (1..=max_distance)
        .filter(|&d| d < masks.len())
        .map(|d| {
            let total: f64 = (0..masks.len() - d)
                .map(|i| {
                    let (a, b) = (masks[i].bits(), masks[i + d].bits());
                    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
                })
                .sum();
            (d, total / (masks.len() - d) as f64)
        })
        .collect()
}

/// Persistence of the dilated selector masks computed on every frame.
pub fn persistence_curve(frames: &[Frame], model: &AccModelNet, cfg: &StreamConfig, max_distance: usize) -> Result<Vec<(usize, f64)>> {
    if frames.len() < 2 {
        return Err(Error::Invalid("persistence needs at least two frames".into()));
    }
    let every = StreamConfig { k: 1, ..cfg.clone() };
    let masks: Vec<QualityMask> = stream_masks(frames, model, &every)?.into_iter().map(|(m, _)| m).collect();
    Ok(persistence_from_masks(&masks, max_distance))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub label: String,
    pub alpha: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub total_bytes: usize,
    pub mean_delay: f64,
    /// High-quality blocks summed over frames.
    pub hq_blocks: usize,
    /// Bytes of each frame.
    pub frame_bytes: Vec<usize>,
}

fn frame_sizes(chunks: &[Vec<u8>]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for c in chunks {
        out.extend(codec::read_container(c)?.iter().map(EncodedFrame::size));
    }
    Ok(out)
}

fn point(label: String, alpha: f64, chunks: &[Vec<u8>], eval: &StreamEval, hq_blocks: usize, cfg: &StreamConfig) -> Result<TradeoffPoint> {
    let n = eval.per_frame.len().max(1) as f64;
    let mean = eval.mean.unwrap_or(0.0);
    let var = eval.per_frame.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(TradeoffPoint {
        label,
        alpha,
        mean_acc: mean,
        std_acc: var.sqrt(),
        total_bytes: chunks.iter().map(Vec::len).sum(),
        mean_delay: chunks.iter().map(|c| delay_model(c.len(), cfg)).sum::<f64>() / chunks.len().max(1) as f64,
        hq_blocks,
        frame_bytes: frame_sizes(chunks)?,
    })
}

/// One tradeoff point per `alpha`, everything else from `cfg`.
pub fn sweep(frames: &[Frame], model: &AccModelNet, dnn: &FinalDnn, alphas: &[f64], cfg: &StreamConfig) -> Result<Vec<TradeoffPoint>> {
    if alphas.is_empty() {
        return Err(Error::Invalid("no alpha values to sweep".into()));
    }
    let refs = reference_outputs(dnn, frames)?;
    alphas
        .iter()
        .map(|&alpha| {
            let c = StreamConfig { alpha, ..cfg.clone() };
            let (chunks, results) = encode_stream(frames, model, &c)?;
            let eval = evaluate_stream(&chunks, dnn, &refs)?;
            let hq = results.iter().flat_map(|r| &r.masks).map(QualityMask::count).sum();
            point(format!("alpha={alpha}"), alpha, &chunks, &eval, hq, &c)
        })
        .collect()
}

/// Uniform-quality baseline at `qp_hi` (`high`) or `qp_lo`.
pub fn uniform_point(frames: &[Frame], dnn: &FinalDnn, high: bool, cfg: &StreamConfig) -> Result<TradeoffPoint> {
    let (w, h) = frames.first().ok_or_else(|| Error::Invalid("no frames".into()))?.grid();
    let mask = if high { QualityMask::full(w, h) } else { QualityMask::empty(w, h) };
    let chunks = encode_fixed(frames, &mask, cfg)?;
    let eval = evaluate_stream(&chunks, dnn, &reference_outputs(dnn, frames)?)?;
    let label = if high { "all-high" } else { "all-low" };
    point(label.into(), f64::NAN, &chunks, &eval, mask.count() * frames.len(), cfg)
}

pub const SWEEP_CSV_HEADER: &str = "alpha,mean_acc,std_acc,total_bytes,mean_delay";

pub fn sweep_csv(points: &[TradeoffPoint]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!(
            "{},{:.6},{:.6},{},{:.6}\n",
            p.alpha, p.mean_acc, p.std_acc, p.total_bytes, p.mean_delay
        ));
    }
    s
}

/// Plain SVG line chart of accuracy against mean streaming delay.
pub fn sweep_svg(points: &[TradeoffPoint]) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let xs: Vec<f64> = points.iter().map(|p| p.mean_delay).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| m + (x - x0) / span * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut order: Vec<&TradeoffPoint> = points.iter().collect();
    order.sort_by(|a, b| a.mean_delay.total_cmp(&b.mean_delay));
    let path: Vec<String> = order.iter().map(|p| format!("{:.1},{:.1}", px(p.mean_delay), py(p.mean_acc))).collect();
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - m,
        w - m
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">mean streaming delay (s): {x0:.3} to {x1:.3}</text>\n",
        w / 2.0,
        h - 15.0
    ));
    s.push_str(&format!(
        "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {0})\" text-anchor=\"middle\">accuracy</text>\n",
        h / 2.0
    ));
    s.push_str(&format!("<polyline fill=\"none\" stroke=\"steelblue\" points=\"{}\"/>\n", path.join(" ")));
    for p in &order {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\"><title>{}</title></circle>\n",
            px(p.mean_delay),
            py(p.mean_acc),
            p.label
        ));
    }
    s.push_str("</svg>\n");
    s
}
