//! Non-differentiable accuracy metrics: heatmap peaks, detection F1, and
//! segmentation IoU.

use crate::error::{Error, Result};

pub const DEFAULT_SCORE_THRESH: f64 = 0.5;
pub const DEFAULT_NMS_RADIUS: usize = 3;
pub const DEFAULT_DIST_THRESH: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Strict local maxima (over the 8-neighborhood) above `score_thresh`,
/// greedily suppressed so that kept peaks are more than `nms_radius` apart.
/// Higher scores win; equal scores go to the earlier row-major position.
pub fn extract_peaks(heatmap: &[f64], width: usize, height: usize, score_thresh: f64, nms_radius: usize) -> Vec<Detection> {
    assert_eq!(heatmap.len(), width * height, "heatmap size");
    let mut cands: Vec<(usize, f64)> = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let v = heatmap[y * width + x];
            if v <= score_thresh {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    if heatmap[ny as usize * width + nx as usize] >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push((y * width + x, v));
            }
        }
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let r2 = (nms_radius * nms_radius) as f64;
    let mut kept: Vec<Detection> = Vec::new();
    for (i, score) in cands {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        if kept.iter().all(|d| (d.x - x).powi(2) + (d.y - y).powi(2) > r2) {
            kept.push(Detection { x, y, score });
        }
    }
    kept
}

/// One-to-one `(pred, reference)` index pairs within `dist_thresh`, matched
/// greedily in ascending distance order.
pub fn greedy_pairs(pred: &[Detection], reference: &[Detection], dist_thresh: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            let d = ((p.x - r.x).powi(2) + (p.y - r.y).powi(2)).sqrt();
            if d <= dist_thresh {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_r = vec![false; reference.len()];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_r[j] {
            used_p[i] = true;
            used_r[j] = true;
            matches.push((i, j));
        }
    }
    matches
}

pub fn greedy_matches(pred: &[Detection], reference: &[Detection], dist_thresh: f64) -> usize {
    greedy_pairs(pred, reference, dist_thresh).len()
}

/// F1 of `pred` against `reference`; 1.0 when both are empty.
pub fn eval_f1(pred: &[Detection], reference: &[Detection], dist_thresh: f64) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let tp = greedy_matches(pred, reference, dist_thresh) as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / pred.len() as f64;
    let r = tp / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Intersection over union for one class; `None` when the class appears in
/// neither map.
pub fn class_iou(pred: &[usize], reference: &[usize], class: usize) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        let (a, b) = (p == class, r == class);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU over the classes present in `reference`. Two empty maps score 1.
pub fn eval_iou(pred: &[usize], reference: &[usize]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "label maps differ in size: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    let mut classes: Vec<usize> = reference.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = classes
        .iter()
        .map(|&c| class_iou(pred, reference, c).unwrap_or(0.0))
        .sum();
    Ok(total / classes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64) -> Detection {
        Detection { x, y, score: 1.0 }
    }

    #[test]
    fn peaks_basic() {
        assert!(extract_peaks(&[0.0; 100], 10, 10, 0.5, 3).is_empty());
        let mut hm = vec![0.0; 100];
        hm[5 * 10 + 5] = 0.9;
        let peaks = extract_peaks(&hm, 10, 10, 0.5, 3);
        assert_eq!(peaks, vec![Detection { x: 5.0, y: 5.0, score: 0.9 }]);
    }

    #[test]
    fn peaks_suppress_close_neighbors() {
        // candidates (2,4)=0.8 and (5,4)=0.9 are 3 px apart; radius 5 keeps the higher only
        let mut hm = vec![0.0; 100];
        hm[4 * 10 + 2] = 0.8;
        hm[4 * 10 + 5] = 0.9;
        let peaks = extract_peaks(&hm, 10, 10, 0.5, 5);
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].x, peaks[0].y), (5.0, 4.0));
        // radius 2 keeps both, ordered by score
        let peaks = extract_peaks(&hm, 10, 10, 0.5, 2);
        assert_eq!(peaks.len(), 2);
        assert_eq!(peaks[1].x, 2.0);
    }

    #[test]
    fn plateau_is_not_a_strict_peak() {
        let mut hm = vec![0.0; 25];
        hm[12] = 0.9;
        hm[13] = 0.9;
        assert!(extract_peaks(&hm, 5, 5, 0.5, 1).is_empty());
    }

    #[test]
    fn f1_cases() {
        let a = vec![det(1.0, 1.0), det(10.0, 10.0)];
        assert_eq!(eval_f1(&a, &a, 4.0), 1.0);
        assert_eq!(eval_f1(&[], &a, 4.0), 0.0);
        assert_eq!(eval_f1(&[], &[], 4.0), 1.0);
        let b = vec![det(1.5, 1.0), det(30.0, 30.0)];
        assert_eq!(eval_f1(&b, &a, 4.0), 0.5);
        assert_eq!(eval_f1(&a, &b, 4.0), 0.5);
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        let pred = vec![det(0.0, 0.0), det(1.0, 0.0)];
        let reference = vec![det(0.5, 0.0)];
        assert_eq!(greedy_matches(&pred, &reference, 4.0), 1);
        assert!((eval_f1(&pred, &reference, 4.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_cases() {
        let a = vec![0, 1, 1, 0];
        assert_eq!(eval_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(class_iou(&[1, 1, 0, 0], &[0, 0, 1, 1], 1), Some(0.0));
        assert!(eval_iou(&a, &[0, 1]).is_err());

        // 4x4: pred class 1 on columns 0..2 (8 cells), ref on columns 0..3 (12 cells)
        let pred: Vec<usize> = (0..16).map(|i| usize::from(i % 4 < 2)).collect();
        let reference: Vec<usize> = (0..16).map(|i| usize::from(i % 4 < 3)).collect();
        assert!((class_iou(&pred, &reference, 1).unwrap() - 8.0 / 12.0).abs() < 1e-12);
        // background: intersection 4 (column 3), union 8 (columns 2 and 3)
        assert!((eval_iou(&pred, &reference).unwrap() - (8.0 / 12.0 + 0.5) / 2.0).abs() < 1e-12);
    }
}
