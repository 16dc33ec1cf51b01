//! `AGV1` frame bitstream.
//!
//! ```text
//! "AGV1" | width u16 | height u16 | channels u8 | block size u8 (16)
//! qp map: one byte per macroblock, row-major
//! payload length u32
//! payload: for each macroblock (row-major), for each channel, for each of
//!          the four 8x8 sub-blocks (raster order): zigzag run-length pairs
//!          (run u8, level i16) followed by the end-of-block byte 0xFF
//! ```
//!
//! All multi-byte fields are little-endian.

use crate::error::CodecError;

pub const MAGIC: &[u8; 4] = b"AGV1";
pub const HEADER_LEN: usize = 10;
pub const EOB: u8 = 0xFF;
pub const BLOCK_SIZE: u8 = 16;

/// Quantized levels of one 8x8 sub-block in zigzag order.
pub type Levels = [i16; 64];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub width: u16,
    pub height: u16,
    pub channels: u8,
}

impl FrameHeader {
    pub fn grid(&self) -> (usize, usize) {
        (self.width as usize / 16, self.height as usize / 16)
    }

    pub fn sub_blocks(&self) -> usize {
        let (w, h) = self.grid();
        w * h * self.channels as usize * 4
    }
}

/// Appends the run-length code of one sub-block.
pub fn write_levels(out: &mut Vec<u8>, levels: &Levels) {
    let mut run = 0u8;
    for &level in levels {
        if level == 0 {
            run += 1;
        } else {
            out.push(run);
            out.extend_from_slice(&level.to_le_bytes());
            run = 0;
        }
    }
    out.push(EOB);
}

/// Serializes a complete frame.
pub fn write_frame(header: &FrameHeader, qps: &[u8], blocks: &[Levels]) -> Vec<u8> {
    let mut payload = Vec::new();
    for levels in blocks {
        write_levels(&mut payload, levels);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + qps.len() + 4 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.push(header.channels);
    out.push(BLOCK_SIZE);
    out.extend_from_slice(qps);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

#[derive(Debug)]
pub struct ParsedFrame {
    pub header: FrameHeader,
    pub qps: Vec<u8>,
    pub blocks: Vec<Levels>,
    /// Bytes consumed from the input.
    pub consumed: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> CodecError {
        CodecError::Parse {
            reason: reason.into(),
            offset: self.pos,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CodecError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses one frame from the front of `bytes`.
pub fn read_frame(bytes: &[u8]) -> Result<ParsedFrame, CodecError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(CodecError::Parse {
            reason: "bad magic".into(),
            offset: 0,
        });
    }
    let width = u16::from_le_bytes(c.take(2, "header")?.try_into().unwrap());
    let height = u16::from_le_bytes(c.take(2, "header")?.try_into().unwrap());
    let channels = c.take(1, "header")?[0];
    if channels != 1 && channels != 3 {
        return Err(CodecError::Parse {
            reason: format!("unsupported channel count {channels}"),
            offset: 8,
        });
    }
    let bs = c.take(1, "header")?[0];
    if bs != BLOCK_SIZE {
        return Err(CodecError::Parse {
            reason: format!("block size {bs}, expected {BLOCK_SIZE}"),
            offset: 9,
        });
    }
    if width % 16 != 0 || height % 16 != 0 {
        return Err(CodecError::Parse {
            reason: format!("dimensions {width}x{height} are not macroblock aligned"),
            offset: 4,
        });
    }
    let header = FrameHeader {
        width,
        height,
        channels,
    };
    let (gw, gh) = header.grid();
    let qp_start = c.pos;
    let qps = c.take(gw * gh, "qp map")?.to_vec();
    if let Some(i) = qps.iter().position(|&q| q > 51) {
        return Err(CodecError::Parse {
            reason: format!("qp {} out of range", qps[i]),
            offset: qp_start + i,
        });
    }
    let payload_len = u32::from_le_bytes(c.take(4, "payload length")?.try_into().unwrap()) as usize;
    let payload_start = c.pos;
    if bytes.len() - payload_start < payload_len {
        return Err(c.err(format!(
            "truncated payload: {} of {payload_len} bytes present",
            bytes.len() - payload_start
        )));
    }
    let end = payload_start + payload_len;
    let mut blocks = Vec::with_capacity(header.sub_blocks());
    for _ in 0..header.sub_blocks() {
        let mut levels = [0i16; 64];
        let mut k = 0usize;
        loop {
            if c.pos >= end {
                return Err(c.err("payload ended inside a sub-block"));
            }
            let run = c.bytes[c.pos];
            c.pos += 1;
            if run == EOB {
                break;
            }
            k += run as usize;
            if k >= 64 {
                return Err(CodecError::Parse {
                    reason: format!("run overflows the sub-block (position {k})"),
                    offset: c.pos - 1,
                });
            }
            if end - c.pos < 2 {
                return Err(c.err("payload ended inside a level"));
            }
            levels[k] = i16::from_le_bytes([c.bytes[c.pos], c.bytes[c.pos + 1]]);
            c.pos += 2;
            k += 1;
        }
        blocks.push(levels);
    }
    if c.pos != end {
        return Err(c.err(format!("{} unread payload bytes", end - c.pos)));
    }
    Ok(ParsedFrame {
        header,
        qps,
        blocks,
        consumed: end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_coding() {
        let mut levels = [0i16; 64];
        levels[0] = 300;
        levels[3] = -2;
        let mut out = Vec::new();
        write_levels(&mut out, &levels);
        assert_eq!(out, vec![0, 0x2c, 0x01, 2, 0xfe, 0xff, EOB]);
        let mut out = Vec::new();
        write_levels(&mut out, &[0; 64]);
        assert_eq!(out, vec![EOB]);
    }

    #[test]
    fn header_only_frame() {
        let h = FrameHeader {
            width: 0,
            height: 0,
            channels: 1,
        };
        let bytes = write_frame(&h, &[], &[]);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        let parsed = read_frame(&bytes).unwrap();
        assert_eq!(parsed.header, h);
        assert!(parsed.blocks.is_empty());
    }

    #[test]
    fn corrupt_streams_report_offsets() {
        let h = FrameHeader {
            width: 16,
            height: 16,
            channels: 1,
        };
        let mut levels = [0i16; 64];
        levels[0] = 7;
        let bytes = write_frame(&h, &[30], &[levels; 4]);
        assert!(read_frame(&bytes).is_ok());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_frame(&bad), Err(CodecError::Parse { offset: 0, .. })));

        for cut in [3, 9, 11, 13, bytes.len() - 1] {
            let err = read_frame(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CodecError::Parse { .. }), "cut {cut}: {err:?}");
        }

        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 60;
        assert!(matches!(read_frame(&bad), Err(CodecError::Parse { offset: 10, .. })));
    }
}
