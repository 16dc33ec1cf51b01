//! Per-macroblock importance maps and binary quality masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Nonnegative importance score per macroblock, row-major `h` rows of `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccGradMap {
    w: usize,
    h: usize,
    values: Vec<f64>,
}

impl AccGradMap {
    pub fn new(w: usize, h: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != w * h {
            return Err(Error::Invalid(format!("{w}x{h} map needs {} values, got {}", w * h, values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("importance value {v} is not finite and nonnegative")));
        }
        Ok(Self { w, h, values })
    }

    pub fn zeros(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            values: vec![0.0; w * h],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w, self.h)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bx: usize, by: usize) -> f64 {
        self.values[by * self.w + bx]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// CSV dump with header `bx,by,accgrad`, one row per block in row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bx,by,accgrad\n");
        for by in 0..self.h {
            for bx in 0..self.w {
                writeln!(out, "{bx},{by},{}", self.get(bx, by)).unwrap();
            }
        }
        out
    }
}

/// Binary per-macroblock quality assignment; `true` means high quality.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QualityMask {
    w: usize,
    h: usize,
    bits: Vec<bool>,
}

impl QualityMask {
    pub fn new(w: usize, h: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != w * h {
            return Err(Error::Invalid(format!("{w}x{h} mask needs {} bits, got {}", w * h, bits.len())));
        }
        Ok(Self { w, h, bits })
    }

    pub fn empty(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            bits: vec![false; w * h],
        }
    }

    pub fn full(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            bits: vec![true; w * h],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w, self.h)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, bx: usize, by: usize) -> bool {
        self.bits[by * self.w + bx]
    }

    pub fn set(&mut self, bx: usize, by: usize, v: bool) {
        self.bits[by * self.w + bx] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_subset_of(&self, other: &QualityMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    pub fn union(&self, other: &QualityMask) -> QualityMask {
        assert_eq!(self.dims(), other.dims(), "mask dims differ");
        QualityMask {
            w: self.w,
            h: self.h,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn invert(&self) -> QualityMask {
        QualityMask {
            w: self.w,
            h: self.h,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Plain PBM (`P1`) text: magic, dims, then one row of 0/1 per block row.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.w, self.h);
        for by in 0..self.h {
            let row: Vec<&str> = (0..self.w).map(|bx| if self.get(bx, by) { "1" } else { "0" }).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_pbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P1") {
            return Err(Error::Invalid("mask is not a P1 bitmap".into()));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Invalid("bad P1 dimensions".into()))
        };
        let (w, h) = (dim()?, dim()?);
        let bits: Vec<bool> = tokens
            .flat_map(|t| t.chars())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Invalid(format!("unexpected character `{c}` in P1 body"))),
            })
            .collect::<Result<_>>()?;
        QualityMask::new(w, h, bits)
    }
}

/// Selects the `c` largest blocks. Ties go to the smaller row-major index.
pub fn topc_mask(map: &AccGradMap, c: usize) -> QualityMask {
    let (w, h) = map.dims();
    let mut order: Vec<usize> = (0..w * h).collect();
    // stable sort keeps row-major order among equal values
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]));
    let mut mask = QualityMask::empty(w, h);
    for &i in order.iter().take(c.min(w * h)) {
        mask.bits[i] = true;
    }
    mask
}

/// Sets every block whose value is at least `alpha`. With `normalize`, values
/// are divided by the map maximum first, and an all-zero map yields an empty
/// mask.
pub fn threshold_mask(map: &AccGradMap, alpha: f64, normalize: bool) -> QualityMask {
    let (w, h) = map.dims();
    let scale = if normalize {
        let max = map.max();
        if max <= 0.0 {
            return QualityMask::empty(w, h);
        }
        1.0 / max
    } else {
        1.0
    };
    QualityMask {
        w,
        h,
        bits: map.values.iter().map(|v| v * scale >= alpha).collect(),
    }
}

/// Chebyshev dilation by `gamma` blocks, clipped at the grid border.
pub fn dilate_mask(mask: &QualityMask, gamma: usize) -> QualityMask {
    if gamma == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    // separable: rows, then columns
    let mut horiz = QualityMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                for xx in x.saturating_sub(gamma)..(x + gamma + 1).min(w) {
                    horiz.set(xx, y, true);
                }
            }
        }
    }
    let mut out = QualityMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if horiz.get(x, y) {
                for yy in y.saturating_sub(gamma)..(y + gamma + 1).min(h) {
                    out.set(x, yy, true);
                }
            }
        }
    }
    out
}
