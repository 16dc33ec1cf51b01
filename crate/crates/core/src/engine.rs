//! Accuracy gradients: per-macroblock importance derived from one backward
//! pass of the final network.
//!
//! For each macroblock `B`,
//!
//! ```text
//! AccGrad(B) = sum over pixels i in B of
//!              || d loss(D(X), D(H)) / d X_i at X = L ||_1  *  || H_i - L_i ||_1
//! ```
//!
//! where `H` is the high-quality frame, `L` the low-quality one, `D` the
//! final network and `loss` its accuracy proxy. Norms run over channels.
//! Computing it takes two forward passes (`D(H)`, `D(L)`) and one backward.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::dnn::{acc_diff, FinalDnn, FRAME_INPUT};
use crate::error::{Error, Result};
use crate::frame::{Frame, MB};
use crate::graph::{CompGraph, Feed};
use crate::masks::{AccGradMap, QualityMask};

/// Counts final-network propagations. Safe to share between threads.
#[derive(Debug, Default)]
pub struct PropagationCounter {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl PropagationCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, forward: u64, backward: u64) {
        self.forward.fetch_add(forward, Ordering::SeqCst);
        self.backward.fetch_add(backward, Ordering::SeqCst);
    }

    /// `(forward, backward)` totals so far.
    pub fn get(&self) -> (u64, u64) {
        (self.forward.load(Ordering::SeqCst), self.backward.load(Ordering::SeqCst))
    }
}

fn check_pair(hq: &Frame, lq: &Frame) -> Result<()> {
    if (hq.width(), hq.height(), hq.channels()) != (lq.width(), lq.height(), lq.channels()) {
        return Err(Error::Invalid(format!(
            "frame shapes differ: {}x{}x{} vs {}x{}x{}",
            hq.width(),
            hq.height(),
            hq.channels(),
            lq.width(),
            lq.height(),
            lq.channels()
        )));
    }
    if !hq.is_padded() {
        return Err(Error::Invalid(format!(
            "{}x{} frame is not padded to whole macroblocks",
            hq.width(),
            hq.height()
        )));
    }
    Ok(())
}

/// Accuracy-gradient map of `lq` relative to `hq`. Adds exactly two forward
/// and one backward pass to `counter`.
pub fn compute_accgrad(dnn: &FinalDnn, hq: &Frame, lq: &Frame, counter: &PropagationCounter) -> Result<AccGradMap> {
    check_pair(hq, lq)?;
    let reference = dnn.infer(hq)?;

    let mut g = CompGraph::new();
    let x = g.input(FRAME_INPUT, &[lq.channels(), lq.height(), lq.width()], true)?;
    let out = dnn.build(&mut g, x, false)?;
    let loss = acc_diff(&mut g, out, &reference)?;
    let lt = lq.to_tensor();
    g.evaluate(&Feed::new().with_params(dnn.params()).with(FRAME_INPUT, &lt))?;
    let grads = g.backward(loss)?;
    counter.record(2, 1);

    let grad = &grads[FRAME_INPUT];
    if !grad.is_finite() {
        return Err(Error::Invalid("input gradient is not finite".into()));
    }
    let (w, h) = hq.grid();
    let (gd, hd, ld) = (grad.data(), hq.data(), lq.data());
    let plane = hq.width() * hq.height();
    let mut values = vec![0.0; w * h];
    for y in 0..hq.height() {
        for x in 0..hq.width() {
            let p = y * hq.width() + x;
            let (mut gnorm, mut dnorm) = (0.0, 0.0);
            for c in 0..hq.channels() {
                gnorm += gd[c * plane + p].abs();
                dnorm += (hd[c * plane + p] - ld[c * plane + p]).abs();
            }
            values[(y / MB) * w + x / MB] += gnorm * dnorm;
        }
    }
    AccGradMap::new(w, h, values)
}

/// Block-wise composite: high-quality pixels where the mask is set,
/// low-quality pixels elsewhere.
pub fn composite(hq: &Frame, lq: &Frame, mask: &QualityMask) -> Result<Frame> {
    check_pair(hq, lq)?;
    if mask.dims() != hq.grid() {
        return Err(Error::Invalid(format!(
            "mask is {:?}, frame grid is {:?}",
            mask.dims(),
            hq.grid()
        )));
    }
    let mut out = lq.clone();
    let (w, h) = mask.dims();
    for by in 0..h {
        for bx in 0..w {
            if mask.get(bx, by) {
                out.copy_block_from(hq, bx, by);
            }
        }
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}
