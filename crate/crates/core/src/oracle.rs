//! Reference mask searches used to judge the AccGrad selection: an iterative
//! region-growing search and an exhaustive search over small block grids.

use crate::engine::composite;
use crate::codec::degrade_frame;
use crate::dnn::{acc_diff_pixels, acc_diff_value, DnnKind, DnnOutput, FinalDnn};
use crate::error::{Error, Result};
use crate::frame::{Frame, MB};
use crate::masks::QualityMask;
use crate::metrics::{greedy_pairs, Detection, DEFAULT_DIST_THRESH};

/// Largest grid `exhaustive_best_mask` accepts.
pub const MAX_EXHAUSTIVE_BLOCKS: usize = 20;
pub const DEFAULT_MAX_ITERS: usize = 10;

#[derive(Clone, Debug)]
pub struct IdealizedResult {
    pub mask: QualityMask,
    pub converged: bool,
    /// Expansion rounds actually run.
    pub iterations: usize,
    pub accuracy: f64,
    /// Mask after each round, starting with the seed mask.
    pub history: Vec<QualityMask>,
}

#[derive(Clone, Debug)]
enum Element {
    /// Index of a reference detection the degraded output leaves unmatched.
    Missed(usize, Detection),
    /// An unmatched detection of the degraded output.
    Spurious(Detection),
    /// A misclassified pixel `(x, y)`.
    Pixel(usize, usize),
}

/// Unmatched predictions and unmatched reference indices under the same
/// one-to-one matching F1 uses.
fn unmatched(dets: &[Detection], ref_dets: &[Detection]) -> (Vec<Detection>, Vec<usize>) {
    let pairs = greedy_pairs(dets, ref_dets, DEFAULT_DIST_THRESH);
    let extra = (0..dets.len()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).map(|i| dets[i]).collect();
    let missed = (0..ref_dets.len()).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
    (extra, missed)
}

impl Element {
    fn position(&self) -> (usize, usize) {
        match *self {
            Element::Missed(_, d) | Element::Spurious(d) => (d.x as usize, d.y as usize),
            Element::Pixel(x, y) => (x, y),
        }
    }

    fn recovered(&self, out: &DnnOutput, reference: &DnnOutput, extra: &[Detection], missed: &[usize]) -> bool {
        match self {
            Element::Missed(j, _) => !missed.contains(j),
            Element::Spurious(s) => !extra
                .iter()
                .any(|d| (d.x - s.x).hypot(d.y - s.y) <= DEFAULT_DIST_THRESH),
            &Element::Pixel(x, y) => {
                let i = y * out.width() + x;
                out.labels()[i] == reference.labels()[i]
            }
        }
    }
}

fn elements(out: &DnnOutput, reference: &DnnOutput) -> Vec<Element> {
    match reference.kind {
        DnnKind::Detector => {
            let ref_dets = reference.detections();
            let (extra, missed) = unmatched(&out.detections(), &ref_dets);
            let mut v: Vec<Element> = missed.into_iter().map(|j| Element::Missed(j, ref_dets[j])).collect();
            v.extend(extra.into_iter().map(Element::Spurious));
            v
        }
        DnnKind::Segmenter => {
            let (a, b) = (out.labels(), reference.labels());
            (0..a.len())
                .filter(|&i| a[i] != b[i])
                .map(|i| Element::Pixel(i % out.width(), i / out.width()))
                .collect()
        }
    }
}

/// Grows the mask by one block up, down, left and right.
fn expand4(m: &QualityMask) -> QualityMask {
    let (w, h) = m.dims();
    let mut out = m.clone();
    for by in 0..h {
        for bx in 0..w {
            if m.get(bx, by) {
                if bx > 0 {
                    out.set(bx - 1, by, true);
                }
                if bx + 1 < w {
                    out.set(bx + 1, by, true);
                }
                if by > 0 {
                    out.set(bx, by - 1, true);
                }
                if by + 1 < h {
                    out.set(bx, by + 1, true);
                }
            }
        }
    }
    out
}

/// Region-growing search for a mask that restores the high-quality output:
/// every element the low-quality output gets wrong seeds its own block, and
/// regions of still-unrecovered elements grow by one block per round.
pub fn idealized_search(dnn: &FinalDnn, hq: &Frame, qp_low: u8, target_acc: f64, max_iters: usize) -> Result<IdealizedResult> {
    if !(target_acc > 0.0 && target_acc <= 1.0) {
        return Err(Error::Invalid(format!("target accuracy {target_acc} outside (0, 1]")));
    }
    if max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    let lq = degrade_frame(hq, qp_low)?;
    let (w, h) = hq.grid();
    let reference = dnn.infer(hq)?;
    let ref_dets = reference.detections();
    let low = dnn.infer(&lq)?;
    let accuracy = low.accuracy_against(&reference)?;
    let elems = elements(&low, &reference);
    let empty = QualityMask::empty(w, h);
    if elems.is_empty() || accuracy >= target_acc {
        return Ok(IdealizedResult {
            mask: empty.clone(),
            converged: true,
            iterations: 0,
            accuracy,
            history: vec![empty],
        });
    }

    let mut regions: Vec<QualityMask> = elems
        .iter()
        .map(|e| {
            let (x, y) = e.position();
            let mut m = empty.clone();
            m.set((x / MB).min(w - 1), (y / MB).min(h - 1), true);
            m
        })
        .collect();
    let mut pending: Vec<usize> = (0..elems.len()).collect();
    let mut mask = empty;
    let mut history = Vec::new();
    let mut accuracy = accuracy;
    for iter in 1..=max_iters {
        for r in &regions {
            mask = mask.union(r);
        }
        history.push(mask.clone());
        let out = dnn.infer(&composite(hq, &lq, &mask)?)?;
        let (extra, missed) = unmatched(&out.detections(), &ref_dets);
        accuracy = out.accuracy_against(&reference)?;
        pending.retain(|&i| !elems[i].recovered(&out, &reference, &extra, &missed));
        if pending.is_empty() || accuracy >= target_acc {
            return Ok(IdealizedResult {
                mask,
                converged: true,
                iterations: iter,
                accuracy,
                history,
            });
        }
        for &i in &pending {
            regions[i] = expand4(&regions[i]);
        }
    }
    Ok(IdealizedResult {
        mask,
        converged: false,
        iterations: max_iters,
        accuracy,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct ExhaustiveResult {
    pub mask: QualityMask,
    /// `acc_diff(D(X), D(H))` of the best composite `X`.
    pub loss: f64,
    pub masks_evaluated: usize,
}

fn mask_from_code(code: u32, w: usize, h: usize) -> QualityMask {
    // bit (n-1-i) is block i, so numeric order is lexicographic order
    let n = w * h;
    let bits = (0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect();
    QualityMask::new(w, h, bits).expect("dims")
}

fn check_exhaustive(hq: &Frame, c: usize) -> Result<(usize, usize)> {
    let (w, h) = hq.grid();
    if w * h > MAX_EXHAUSTIVE_BLOCKS {
        return Err(Error::Invalid(format!(
            "{w}x{h} grid has more than {MAX_EXHAUSTIVE_BLOCKS} blocks"
        )));
    }
    if c > w * h {
        return Err(Error::Invalid(format!("c = {c} exceeds {} blocks", w * h)));
    }
    Ok((w, h))
}

/// Minimum-loss mask among all masks with at most `c` blocks set. Ties go to
/// the lexicographically smallest bit sequence in row-major order.
///
/// When the network's receptive radius is at most half a macroblock each
/// output pixel sees at most a 2x2 group of blocks, so the loss of any mask
/// is a sum of per-window terms. Those terms are tabulated with one forward
/// pass per window configuration and the enumeration becomes table lookups.
/// Larger receptive fields fall back to [`exhaustive_best_mask_direct`].
pub fn exhaustive_best_mask(dnn: &FinalDnn, hq: &Frame, lq: &Frame, c: usize) -> Result<ExhaustiveResult> {
    let (w, h) = check_exhaustive(hq, c)?;
    if dnn.receptive_radius() > MB / 2 {
        return exhaustive_best_mask_direct(dnn, hq, lq, c);
    }
    let reference = dnn.infer(hq)?;
    let (ww, wh) = (w.min(2), h.min(2));
    let (nwx, nwy) = (w - ww + 1, h - wh + 1);
    let configs = 1usize << (ww * wh);
    let r = dnn.receptive_radius();
    let (fw, fh) = (hq.width(), hq.height());

    // window that contains the receptive field of each output pixel
    let anchor = |p: usize, blocks: usize, span: usize| (p.saturating_sub(r) / MB).min(blocks - span);
    let mut owner = vec![0usize; fw * fh];
    for y in 0..fh {
        for x in 0..fw {
            owner[y * fw + x] = anchor(y, h, wh) * nwx + anchor(x, w, ww);
        }
    }

    let mut table = vec![0.0; nwx * nwy * configs];
    for wy in 0..nwy {
        for wx in 0..nwx {
            let win = wy * nwx + wx;
            for cfg in 0..configs {
                let mut m = QualityMask::empty(w, h);
                for k in 0..ww * wh {
                    if cfg >> k & 1 == 1 {
                        m.set(wx + k % ww, wy + k / ww, true);
                    }
                }
                let out = dnn.infer(&composite(hq, lq, &m)?)?;
                let terms = acc_diff_pixels(&out, &reference)?;
                table[win * configs + cfg] = terms
                    .iter()
                    .zip(&owner)
                    .filter(|(_, &o)| o == win)
                    .map(|(t, _)| t)
                    .sum();
            }
        }
    }

    let n = w * h;
    let pixels = (fw * fh) as f64;
    let mut best: Option<(f64, u32)> = None;
    let mut evaluated = 0;
    for code in 0u32..(1u32 << n) {
        if code.count_ones() as usize > c {
            continue;
        }
        evaluated += 1;
        let bit = |bx: usize, by: usize| (code >> (n - 1 - (by * w + bx)) & 1) as usize;
        let mut total = 0.0;
        for wy in 0..nwy {
            for wx in 0..nwx {
                let mut cfg = 0;
                for k in 0..ww * wh {
                    cfg |= bit(wx + k % ww, wy + k / ww) << k;
                }
                total += table[(wy * nwx + wx) * configs + cfg];
            }
        }
        let loss = total / pixels;
        if best.is_none_or(|(b, _)| loss < b) {
            best = Some((loss, code));
        }
    }
    let (_, code) = best.expect("the empty mask is always a candidate");
    let mask = mask_from_code(code, w, h);
    let out = dnn.infer(&composite(hq, lq, &mask)?)?;
    Ok(ExhaustiveResult {
        loss: acc_diff_value(&out, &reference)?,
        mask,
        masks_evaluated: evaluated,
    })
}

/// [`exhaustive_best_mask`] by running the network on every candidate
/// composite.
pub fn exhaustive_best_mask_direct(dnn: &FinalDnn, hq: &Frame, lq: &Frame, c: usize) -> Result<ExhaustiveResult> {
    let (w, h) = check_exhaustive(hq, c)?;
    let reference = dnn.infer(hq)?;
    let n = w * h;
    let mut best: Option<(f64, QualityMask)> = None;
    let mut evaluated = 0;
    for code in 0u32..(1u32 << n) {
        if code.count_ones() as usize > c {
            continue;
        }
        evaluated += 1;
        let mask = mask_from_code(code, w, h);
        let loss = acc_diff_value(&dnn.infer(&composite(hq, lq, &mask)?)?, &reference)?;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, mask));
        }
    }
    let (loss, mask) = best.expect("the empty mask is always a candidate");
    Ok(ExhaustiveResult {
        mask,
        loss,
        masks_evaluated: evaluated,
    })
}

/// Loss of the composite built from `mask`.
pub fn composite_loss(dnn: &FinalDnn, hq: &Frame, lq: &Frame, mask: &QualityMask) -> Result<f64> {
    let reference = dnn.infer(hq)?;
    acc_diff_value(&dnn.infer(&composite(hq, lq, mask)?)?, &reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::DnnArch;
    use crate::scene::{gen_images, SceneConfig};

    fn scene(w: usize, h: usize, seed: u64) -> Frame {
        let cfg = SceneConfig {
            width: w,
            height: h,
            ..SceneConfig::default()
        };
        gen_images(&cfg, 1, seed).frames.remove(0)
    }

    #[test]
    fn windowed_matches_direct() {
        for (kind, seed) in [(DnnKind::Detector, 3), (DnnKind::Segmenter, 4)] {
            let dnn = FinalDnn::new(kind, DnnArch::small(3), seed);
            for (w, h) in [(48, 32), (32, 32), (16, 48)] {
                let hq = scene(w, h, seed);
                let lq = degrade_frame(&hq, 45).unwrap();
                for c in [0, 1, 2, 6].map(|c: usize| c.min(w / 16 * (h / 16))) {
                    let a = exhaustive_best_mask(&dnn, &hq, &lq, c).unwrap();
                    let b = exhaustive_best_mask_direct(&dnn, &hq, &lq, c).unwrap();
                    assert_eq!(a.mask, b.mask, "{kind:?} {w}x{h} c={c}");
                    assert!((a.loss - b.loss).abs() < 1e-12);
                    assert_eq!(a.masks_evaluated, b.masks_evaluated);
                }
            }
        }
    }

    #[test]
    fn exhaustive_extremes() {
        let dnn = FinalDnn::new(DnnKind::Detector, DnnArch::small(3), 5);
        let hq = scene(32, 32, 9);
        let lq = degrade_frame(&hq, 45).unwrap();
        let all = exhaustive_best_mask(&dnn, &hq, &lq, 4).unwrap();
        assert_eq!(all.mask, QualityMask::full(2, 2));
        assert_eq!(all.loss, 0.0);
        let none = exhaustive_best_mask(&dnn, &hq, &lq, 0).unwrap();
        assert_eq!(none.mask, QualityMask::empty(2, 2));
        let expected = composite_loss(&dnn, &hq, &lq, &QualityMask::empty(2, 2)).unwrap();
        assert_eq!(none.loss, expected);
        assert_eq!(none.masks_evaluated, 1);
    }

    #[test]
    fn exhaustive_rejects_large_grids() {
        let dnn = FinalDnn::new(DnnKind::Detector, DnnArch::small(3), 5);
        let hq = Frame::filled(80, 80, 3, 0.5);
        assert!(exhaustive_best_mask(&dnn, &hq, &hq, 1).is_err());
        let small = Frame::filled(32, 32, 3, 0.5);
        assert!(exhaustive_best_mask(&dnn, &small, &small, 5).is_err());
    }

    #[test]
    fn mask_codes_are_lexicographic() {
        let m = mask_from_code(0b0001, 2, 2);
        assert_eq!(m.bits(), &[false, false, false, true]);
        assert!(mask_from_code(0b1000, 2, 2).get(0, 0));
    }

    #[test]
    fn expand4_is_a_cross() {
        let mut m = QualityMask::empty(3, 3);
        m.set(1, 1, true);
        let e = expand4(&m);
        assert_eq!(e.count(), 5);
        assert!(!e.get(0, 0) && e.get(0, 1) && e.get(1, 0));
    }

    #[test]
    fn idealized_identical_quality_needs_nothing() {
        let dnn = FinalDnn::new(DnnKind::Detector, DnnArch::small(3), 5);
        let hq = Frame::filled(32, 32, 3, 0.4);
        let res = idealized_search(&dnn, &hq, 0, 1.0, 10).unwrap();
        assert_eq!(res.mask.count(), 0);
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
    }

    #[test]
    fn idealized_never_stops_short_without_cause() {
        let dnn = crate::fixture::load_dnn(crate::fixture::DETECTOR_A).unwrap();
        for seed in 0..6 {
            let hq = scene(64, 64, seed);
            let res = idealized_search(&dnn, &hq, 51, 1.0, 10).unwrap();
            if res.iterations == 0 {
                assert_eq!(res.accuracy, 1.0, "seed {seed}");
            }
            if res.converged {
                assert!(res.accuracy >= 1.0 || res.mask.count() > 0, "seed {seed}");
            }
        }
    }

    #[test]
    fn idealized_history_grows() {
        let dnn = FinalDnn::new(DnnKind::Segmenter, DnnArch::small(3), 8);
        let hq = scene(64, 64, 2);
        let res = idealized_search(&dnn, &hq, 51, 1.0, 4).unwrap();
        for pair in res.history.windows(2) {
            assert!(pair[0].is_subset_of(&pair[1]));
        }
        assert!(idealized_search(&dnn, &hq, 51, 0.0, 4).is_err());
        assert!(idealized_search(&dnn, &hq, 51, 0.5, 0).is_err());
    }
}
