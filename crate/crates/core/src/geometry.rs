//! Axis-aligned boxes in normalized coordinates, IoU, and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, coordinates normalized to a reference frame (image or crop).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox { xmin, ymin, xmax, ymax };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from a coordinate quadruple, reordering each axis if needed.
    pub fn from_corners_sorted(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]))
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub const fn unit() -> Self {
        BBox { xmin: 0.0, ymin: 0.0, xmax: 1.0, ymax: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        let c = self.coords();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {c:?}")));
        }
        if self.xmin > self.xmax || self.ymin > self.ymax {
            return Err(Error::InvalidBox(format!("inverted extent in {c:?}")));
        }
        Ok(())
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    /// Clips to the unit square. A box entirely outside collapses onto the border.
    pub fn clip_unit(&self) -> BBox {
        let xmin = self.xmin.clamp(0.0, 1.0);
        let ymin = self.ymin.clamp(0.0, 1.0);
        BBox {
            xmin,
            ymin,
            xmax: self.xmax.clamp(xmin, 1.0).max(xmin),
            ymax: self.ymax.clamp(ymin, 1.0).max(ymin),
        }
    }

    /// True when `other` lies entirely inside `self` (boundaries inclusive).
    pub fn contains(&self, other: &BBox) -> bool {
        other.xmin >= self.xmin
            && other.ymin >= self.ymin
            && other.xmax <= self.xmax
            && other.ymax <= self.ymax
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Maps a box expressed in the frame of `window` back to the frame `window` lives in.
    pub fn from_window_frame(&self, window: &BBox) -> BBox {
        let (w, h) = (window.width(), window.height());
        BBox {
            xmin: window.xmin + self.xmin * w,
            ymin: window.ymin + self.ymin * h,
            xmax: window.xmin + self.xmax * w,
            ymax: window.ymin + self.ymax * h,
        }
    }

    /// Maps a box into the frame of `window` (inverse of [`BBox::from_window_frame`]).
    pub fn to_window_frame(&self, window: &BBox) -> BBox {
        let (w, h) = (window.width(), window.height());
        BBox {
            xmin: (self.xmin - window.xmin) / w,
            ymin: (self.ymin - window.ymin) / h,
            xmax: (self.xmax - window.xmin) / w,
            ymax: (self.ymax - window.ymin) / h,
        }
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            xmin: f64,
            ymin: f64,
            xmax: f64,
            ymax: f64,
        }
        let r = Raw::deserialize(d)?;
        BBox::new(r.xmin, r.ymin, r.xmax, r.ymax).map_err(serde::de::Error::custom)
    }
}

/// A box together with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Self {
        debug_assert!(score.is_finite());
        ScoredBox { bbox, score }
    }
}

/// Intersection over union. Zero whenever the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `scores` sorted by descending score, ties kept in input order.
pub fn rank_by_score(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.into_iter().collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy non-maximum suppression, returning survivor indices in output order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let order = rank_by_score(scores.iter().copied());
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) < threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Greedy NMS: boxes visited by descending score (stable on ties); a box is
/// suppressed once its IoU with an already kept box reaches `threshold`, so
/// surviving pairs always overlap strictly less than `threshold`.
pub fn nms(boxes: &[ScoredBox], threshold: f64) -> Vec<ScoredBox> {
    let bbs: Vec<BBox> = boxes.iter().map(|b| b.bbox).collect();
    let scores: Vec<f64> = boxes.iter().map(|b| b.score).collect();
    nms_indices(&bbs, &scores, threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}
