//! Planar image frames with values in `[0, 1]`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Macroblock edge length in pixels.
pub const MB: usize = 16;

/// Planar (channel-major) image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("frames have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Invalid(format!(
                "{width}x{height}x{channels} frame needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value.clamp(0.0, 1.0); width * height * channels])
            .expect("valid constant frame")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_padded(&self) -> bool {
        self.width.is_multiple_of(MB) && self.height.is_multiple_of(MB)
    }

    /// Macroblock grid dimensions `(w, h)`; partial blocks are not counted.
    pub fn grid(&self) -> (usize, usize) {
        (self.width / MB, self.height / MB)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    /// Pads right and bottom edges up to a multiple of 16 by replicating the
    /// last row and column.
    pub fn pad_to_macroblocks(&self) -> Frame {
        if self.is_padded() {
            return self.clone();
        }
        let w = self.width.div_ceil(MB) * MB;
        let h = self.height.div_ceil(MB) * MB;
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            for y in 0..h {
                let sy = y.min(self.height.saturating_sub(1));
                for x in 0..w {
                    let sx = x.min(self.width.saturating_sub(1));
                    data.push(if self.width == 0 || self.height == 0 {
                        0.0
                    } else {
                        self.get(c, sy, sx)
                    });
                }
            }
        }
        Frame {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone())
            .expect("frame dimensions are positive")
    }

    /// Builds a frame from a `(C,H,W)` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Frame> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Invalid(format!("expected (C,H,W) tensor, got {s:?}")));
        }
        Frame::new(s[2], s[1], s[0], t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn mse(&self, other: &Frame) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "frame sizes differ");
        if self.data.is_empty() {
            return 0.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Mean squared error restricted to one macroblock.
    pub fn block_mse(&self, other: &Frame, bx: usize, by: usize) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.channels {
            for y in by * MB..(by + 1) * MB {
                for x in bx * MB..(bx + 1) * MB {
                    let d = self.get(c, y, x) - other.get(c, y, x);
                    acc += d * d;
                }
            }
        }
        acc / (MB * MB * self.channels) as f64
    }

    /// Copies macroblock `(bx, by)` from `src` into `self`.
    pub fn copy_block_from(&mut self, src: &Frame, bx: usize, by: usize) {
        for c in 0..self.channels {
            for y in by * MB..(by + 1) * MB {
                let start = self.idx(c, y, bx * MB);
                self.data[start..start + MB].copy_from_slice(&src.data[start..start + MB]);
            }
        }
    }

    /// Rounds every value to the nearest multiple of 1/255.
    pub fn quantize_8bit(&self) -> Frame {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (*v * 255.0).round() / 255.0;
        }
        out
    }

    /// Writes a binary PGM (1 channel) or PPM (3 channels), 8 bits per sample.
    pub fn write_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(f, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.width * self.height * self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    buf.push((self.get(c, y, x) * 255.0).round() as u8);
                }
            }
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pnm(path: impl AsRef<Path>) -> Result<Frame> {
        let path = path.as_ref();
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let bad = |msg: &str| Error::Invalid(format!("{}: {msg}", path.display()));
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_string));
        }
        let channels = match header[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(bad("not a binary PGM/PPM")),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit samples are supported"));
        }
        let mut buf = vec![0u8; w * h * channels];
        r.read_exact(&mut buf).map_err(|_| bad("truncated pixel data"))?;
        let mut data = vec![0.0; w * h * channels];
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    data[(c * h + y) * w + x] = buf[(y * w + x) * channels + c] as f64 / 255.0;
                }
            }
        }
        Frame::new(w, h, channels, data)
    }
}
