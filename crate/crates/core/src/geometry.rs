//! Axis-aligned boxes in normalized scene coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with `x1 < x2`, `y1 < y2`, all corners in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let fail = |reason| Error::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(fail("non-finite coordinate"));
        }
        if [x1, y1, x2, y2].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(fail("coordinate outside [0, 1]"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(fail("zero or negative extent"));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Half-open containment: points on the lower edges are inside, points on
    /// the upper edges are not, so adjacent boxes never both claim a point.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, and exactly 1 for
/// identical boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Boxes with a parallel list of confidence scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredBoxSet {
    boxes: Vec<BBox>,
    scores: Vec<f64>,
}

impl ScoredBoxSet {
    pub fn new(boxes: Vec<BBox>, scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} boxes but {} scores",
                boxes.len(),
                scores.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidScores(format!("non-finite score {s}")));
        }
        Ok(ScoredBoxSet { boxes, scores })
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Restricts the set to `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ScoredBoxSet {
        ScoredBoxSet {
            boxes: indices.iter().map(|&i| self.boxes[i]).collect(),
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Indices sorted by descending score; equal scores keep the lower index first.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score and keeps a box unless it overlaps an
/// already-kept box with IoU strictly above `overlap_threshold`. Returns at
/// most `max_keep` indices into `set`, in the order they were kept.
pub fn nms(set: &ScoredBoxSet, overlap_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in descending_order(&set.scores) {
        if kept.len() >= max_keep {
            break;
        }
        let b = &set.boxes[i];
        if kept
            .iter()
            .all(|&k| iou(&set.boxes[k], b) <= overlap_threshold)
        {
            kept.push(i);
        }
    }
    kept
}
