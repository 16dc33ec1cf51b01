//! Intra-only block codec with a per-macroblock quantization parameter.
//!
//! Each 16x16 macroblock is split into four 8x8 sub-blocks per channel.
//! Sub-blocks go through an orthonormal DCT on the 0..255 sample scale, are
//! divided by the macroblock's quantizer step and rounded half away from
//! zero, then run-length coded in zigzag order (see [`bitstream`]).

pub mod bitstream;
pub mod dct;

use std::fmt::Write as _;

use crate::error::CodecError;
use crate::frame::{Frame, MB};
use crate::masks::QualityMask;

use bitstream::{FrameHeader, Levels};

pub const QP_MAX: u8 = 51;
pub const DEFAULT_QP_HI: u8 = 30;
pub const DEFAULT_QP_LO: u8 = 40;

/// Quantizer step for `qp`: `max(1, 2^((qp - 4) / 6))` rounded to the
/// nearest 1/16. Doubles every 6 QP.
pub fn quant_step(qp: u8) -> f64 {
    let raw = 2f64.powf((qp as f64 - 4.0) / 6.0);
    ((raw * 16.0).round() / 16.0).max(1.0)
}

/// Per-macroblock QP assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QpMap {
    w: usize,
    h: usize,
    qps: Vec<u8>,
}

impl QpMap {
    pub fn new(w: usize, h: usize, qps: Vec<u8>) -> Result<Self, CodecError> {
        if qps.len() != w * h {
            return Err(CodecError::QpMapDims {
                got_w: qps.len(),
                got_h: 1,
                want_w: w,
                want_h: h,
            });
        }
        if let Some(&q) = qps.iter().find(|&&q| q > QP_MAX) {
            return Err(CodecError::QpRange(q as i32));
        }
        Ok(Self { w, h, qps })
    }

    pub fn uniform(w: usize, h: usize, qp: u8) -> Result<Self, CodecError> {
        Self::new(w, h, vec![qp; w * h])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w, self.h)
    }

    pub fn get(&self, bx: usize, by: usize) -> u8 {
        self.qps[by * self.w + bx]
    }

    pub fn set(&mut self, bx: usize, by: usize, qp: u8) -> Result<(), CodecError> {
        if qp > QP_MAX {
            return Err(CodecError::QpRange(qp as i32));
        }
        self.qps[by * self.w + bx] = qp;
        Ok(())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.qps
    }

    /// Sidecar text for external encoders: one `bx by qp` line per block.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for by in 0..self.h {
            for bx in 0..self.w {
                writeln!(out, "{bx} {by} {}", self.get(bx, by)).unwrap();
            }
        }
        out
    }
}

/// Maps high-quality blocks to `qp_hi` and the rest to `qp_lo`.
pub fn mask_to_qpmap(mask: &QualityMask, qp_hi: u8, qp_lo: u8) -> Result<QpMap, CodecError> {
    for qp in [qp_hi, qp_lo] {
        if qp > QP_MAX {
            return Err(CodecError::QpRange(qp as i32));
        }
    }
    if qp_hi > qp_lo {
        return Err(CodecError::QpOrder { hi: qp_hi, lo: qp_lo });
    }
    let (w, h) = mask.dims();
    QpMap::new(w, h, mask.bits().iter().map(|&b| if b { qp_hi } else { qp_lo }).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Per-channel background color in `[0, 1]` for background replacement.
    pub background: [f64; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            background: [123.675 / 255.0, 116.28 / 255.0, 103.53 / 255.0],
        }
    }
}

impl CodecConfig {
    fn background_for(&self, channels: usize, c: usize) -> f64 {
        if channels == 1 {
            self.background.iter().sum::<f64>() / 3.0
        } else {
            self.background[c]
        }
    }
}

/// A serialized `AGV1` frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedFrame {
    bytes: Vec<u8>,
}

impl EncodedFrame {
    /// Wraps bytes after checking that they hold exactly one well-formed frame.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CodecError> {
        let parsed = bitstream::read_frame(&bytes)?;
        if parsed.consumed != bytes.len() {
            return Err(CodecError::Parse {
                reason: "trailing bytes after frame".into(),
                offset: parsed.consumed,
            });
        }
        Ok(Self { bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Exact serialized length in bytes.
    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn qp_map(&self) -> Result<QpMap, CodecError> {
        let parsed = bitstream::read_frame(&self.bytes)?;
        let (w, h) = parsed.header.grid();
        QpMap::new(w, h, parsed.qps)
    }
}

pub fn frame_size(enc: &EncodedFrame) -> usize {
    enc.size()
}

fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds half away from zero
    v.round()
}

/// Quantized zigzag levels for one 8x8 region of `frame`.
fn quantize_sub_block(frame: &Frame, c: usize, x0: usize, y0: usize, step: f64) -> Levels {
    let mut block = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = frame.get(c, y0 + y, x0 + x) * 255.0;
        }
    }
    let coeffs = dct::forward(&block);
    let mut levels = [0i16; 64];
    for (k, &pos) in dct::zigzag().iter().enumerate() {
        let q = round_half_away(coeffs[pos] / step);
        levels[k] = q.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
    }
    levels
}

fn check_dims(frame: &Frame, qpmap: &QpMap) -> Result<FrameHeader, CodecError> {
    if !frame.is_padded() {
        return Err(CodecError::Unpadded {
            width: frame.width(),
            height: frame.height(),
        });
    }
    let (w, h) = frame.grid();
    if qpmap.dims() != (w, h) {
        return Err(CodecError::QpMapDims {
            got_w: qpmap.w,
            got_h: qpmap.h,
            want_w: w,
            want_h: h,
        });
    }
    let to_u16 = |v: usize| u16::try_from(v).map_err(|_| CodecError::TooLarge(v));
    Ok(FrameHeader {
        width: to_u16(frame.width())?,
        height: to_u16(frame.height())?,
        channels: frame.channels() as u8,
    })
}

/// Quantized levels of every sub-block, in bitstream order.
pub fn frame_levels(frame: &Frame, qpmap: &QpMap) -> Result<Vec<Levels>, CodecError> {
    check_dims(frame, qpmap)?;
    let (w, h) = frame.grid();
    let mut blocks = Vec::with_capacity(w * h * frame.channels() * 4);
    for by in 0..h {
        for bx in 0..w {
            let step = quant_step(qpmap.get(bx, by));
            for c in 0..frame.channels() {
                for sub in 0..4 {
                    let x0 = bx * MB + (sub % 2) * 8;
                    let y0 = by * MB + (sub / 2) * 8;
                    blocks.push(quantize_sub_block(frame, c, x0, y0, step));
                }
            }
        }
    }
    Ok(blocks)
}

pub fn encode_frame(frame: &Frame, qpmap: &QpMap, _cfg: &CodecConfig) -> Result<EncodedFrame, CodecError> {
    let header = check_dims(frame, qpmap)?;
    let blocks = frame_levels(frame, qpmap)?;
    Ok(EncodedFrame {
        bytes: bitstream::write_frame(&header, qpmap.as_bytes(), &blocks),
    })
}

/// Parses the stream and reconstructs the frame as 8-bit samples scaled to `[0, 1]`.
pub fn decode_frame(enc: &EncodedFrame, _cfg: &CodecConfig) -> Result<Frame, CodecError> {
    decode_bytes(enc.as_bytes()).map(|(f, _)| f)
}

/// Decodes one frame from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_bytes(bytes: &[u8]) -> Result<(Frame, usize), CodecError> {
    let parsed = bitstream::read_frame(bytes)?;
    let hdr = &parsed.header;
    let (width, height, channels) = (hdr.width as usize, hdr.height as usize, hdr.channels as usize);
    let (w, _) = hdr.grid();
    let mut data = vec![0.0; width * height * channels];
    let zz = dct::zigzag();
    for (i, levels) in parsed.blocks.iter().enumerate() {
        let mb = i / (channels * 4);
        let c = (i / 4) % channels;
        let sub = i % 4;
        let (bx, by) = (mb % w, mb / w);
        let step = quant_step(parsed.qps[mb]);
        let mut coeffs = [0.0; 64];
        for (k, &pos) in zz.iter().enumerate() {
            coeffs[pos] = levels[k] as f64 * step;
        }
        let pixels = dct::inverse(&coeffs);
        let x0 = bx * MB + (sub % 2) * 8;
        let y0 = by * MB + (sub / 2) * 8;
        for y in 0..8 {
            for x in 0..8 {
                data[(c * height + y0 + y) * width + x0 + x] = pixels[y * 8 + x].round().clamp(0.0, 255.0) / 255.0;
            }
        }
    }
    let frame = Frame::new(width, height, channels, data).map_err(|e| CodecError::Parse {
        reason: e.to_string(),
        offset: 0,
    })?;
    Ok((frame, parsed.consumed))
}

/// Replaces every low-quality macroblock with the configured background
/// color and encodes the whole frame at `qp_hi`.
pub fn encode_uniform_background(
    frame: &Frame,
    mask: &QualityMask,
    qp_hi: u8,
    cfg: &CodecConfig,
) -> Result<EncodedFrame, CodecError> {
    let qpmap = QpMap::uniform(mask.dims().0, mask.dims().1, qp_hi)?;
    check_dims(frame, &qpmap)?;
    let mut composed = frame.clone();
    let (w, h) = frame.grid();
    for by in 0..h {
        for bx in 0..w {
            if mask.get(bx, by) {
                continue;
            }
            for c in 0..frame.channels() {
                let color = cfg.background_for(frame.channels(), c);
                for y in by * MB..(by + 1) * MB {
                    for x in bx * MB..(bx + 1) * MB {
                        composed.set(c, y, x, color);
                    }
                }
            }
        }
    }
    encode_frame(&composed, &qpmap, cfg)
}

/// Shorthand for encoding then decoding at a single QP.
pub fn degrade_frame(frame: &Frame, qp: u8) -> Result<Frame, CodecError> {
    let (w, h) = frame.grid();
    let cfg = CodecConfig::default();
    let enc = encode_frame(frame, &QpMap::uniform(w, h, qp)?, &cfg)?;
    decode_frame(&enc, &cfg)
}

/// Chunk container: `u32` frame count followed by the frames back to back.
pub fn write_container(frames: &[EncodedFrame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + frames.iter().map(EncodedFrame::size).sum::<usize>());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        out.extend_from_slice(f.as_bytes());
    }
    out
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<EncodedFrame>, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Parse {
            reason: "truncated frame count".into(),
            offset: 0,
        });
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let mut pos = 4;
    let mut frames = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let parsed = bitstream::read_frame(&bytes[pos..]).map_err(|e| match e {
            CodecError::Parse { reason, offset } => CodecError::Parse {
                reason,
                offset: offset + pos,
            },
            other => other,
        })?;
        frames.push(EncodedFrame {
            bytes: bytes[pos..pos + parsed.consumed].to_vec(),
        });
        pos += parsed.consumed;
    }
    if pos != bytes.len() {
        return Err(CodecError::Parse {
            reason: "trailing bytes after last frame".into(),
            offset: pos,
        });
    }
    Ok(frames)
}
