//! Pixel- and box-level evaluation of change maps.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::change_render::ChangeMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PixelMetrics {
    /// Scores from raw counts. Empty denominators count as perfect agreement
    /// (nothing predicted and nothing to find).
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // harmonic mean of precision and recall, as one rounding
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self {
            precision,
            recall,
            f1,
            iou: ratio(tp, tp + fp + fn_),
            tp,
            fp,
            fn_,
        }
    }
}

pub fn pixel_metrics(pred: &ChangeMap, gt: &ChangeMap) -> Result<PixelMetrics> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Data(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(PixelMetrics::from_counts(tp, fp, fn_))
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl PixelBox {
    pub fn new(min_x: u32, min_y: u32, max_x: u32, max_y: u32) -> Self {
        assert!(min_x <= max_x && min_y <= max_y);
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
            confidence: None,
        }
    }

    pub fn area(&self) -> u64 {
        (self.max_x - self.min_x + 1) as u64 * (self.max_y - self.min_y + 1) as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix0 = self.min_x.max(other.min_x);
        let iy0 = self.min_y.max(other.min_y);
        let ix1 = self.max_x.min(other.max_x);
        let iy1 = self.max_y.min(other.max_y);
        if ix0 > ix1 || iy0 > iy1 {
            return 0.0;
        }
        let inter = (ix1 - ix0 + 1) as u64 * (iy1 - iy0 + 1) as u64;
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    fn score(&self) -> f64 {
        self.confidence.unwrap_or(self.area() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<PixelBox>,
}

/// Tightest boxes around 8-connected components with at least `min_area`
/// pixels, in raster order of each component's first pixel. Each box's
/// confidence is its component's pixel count.
pub fn extract_boxes(map: &ChangeMap, min_area: usize) -> BoxSet {
    let (w, h) = (map.width as usize, map.height as usize);
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !map.values[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut count = 0usize;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            count += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if map.values[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if count >= min_area {
            let mut b = PixelBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32);
            b.confidence = Some(count as f64);
            boxes.push(b);
        }
    }
    BoxSet { boxes }
}

/// Average precision of `pred` against `gt` at one IoU threshold.
///
/// Predictions are matched greedily in descending confidence (input order
/// breaks ties), each to the unmatched ground-truth box of highest IoU at or
/// above the threshold. Precision/recall points are taken after each group
/// of equal confidence, and AP is the area under the interpolated
/// (monotone non-increasing) precision curve. With no ground truth the score
/// is 1 for no predictions and 0 otherwise.
pub fn map_score(pred: &BoxSet, gt: &BoxSet, iou_threshold: f64) -> f64 {
    let n_gt = gt.boxes.len();
    if n_gt == 0 {
        return if pred.boxes.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..pred.boxes.len()).collect();
    order.sort_by(|&i, &j| pred.boxes[j].score().total_cmp(&pred.boxes[i].score()));

    let mut taken = vec![false; n_gt];
    let mut tp = 0usize;
    // (recall, precision) at each confidence boundary
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let p = &pred.boxes[i];
        let best = gt
            .boxes
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, b)| (g, p.iou(b)))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        let last_of_group = order
            .get(rank + 1)
            .is_none_or(|&next| pred.boxes[next].score() != p.score());
        if last_of_group {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
        }
    }

    // interpolated precision: best precision at this recall or beyond
    let mut interp = vec![0.0f64; points.len()];
    let mut best = 0.0f64;
    for (slot, &(_, precision)) in interp.iter_mut().zip(&points).rev() {
        best = best.max(precision);
        *slot = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), &p) in points.iter().zip(&interp) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    ap
}
