//! Proposal and detection quality: recall tables over score cutoffs and IoU
//! thresholds, average precision, and the top-K budget sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_by_score, BBox, ScoredBox};
use crate::inference::{select_topk, Detection};
use crate::loss::sigmoid;
use crate::synth::GtBox;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];

/// 15 pre-sigmoid cutoffs evenly spaced from 2 down to -12.
pub fn default_cutoffs() -> Vec<f64> {
    (0..15).map(|i| 2.0 - i as f64).collect()
}

/// Greedy one-to-one matching in descending score order: each proposal takes the
/// unmatched ground truth it overlaps most, provided IoU > `t`.
/// Returns, per ground truth, whether it was matched.
pub fn greedy_recall(proposals: &[ScoredBox], gts: &[BBox], t: f64) -> Vec<bool> {
    let mut matched = vec![false; gts.len()];
    for i in rank_by_score(proposals.iter().map(|p| p.score)) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let o = iou(&proposals[i].bbox, g);
            if o > t && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
        }
    }
    matched
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub cutoff: f64,
    /// Mean number of kept proposals per image.
    pub budget: f64,
    /// Per IoU threshold: recall of each class (`None` when the class has no boxes).
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Per IoU threshold: mean of the per-class recalls.
    pub class_average: Vec<f64>,
    /// Per IoU threshold: recalled boxes over all boxes, ignoring class.
    pub agnostic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub thresholds: Vec<f64>,
    pub classes: Vec<usize>,
    /// Sorted by budget ascending.
    pub rows: Vec<RecallRow>,
}

fn classes_of(gts: &[Vec<GtBox>]) -> Vec<usize> {
    let mut c: Vec<usize> = gts.iter().flatten().map(|g| g.class).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Recall at each (score cutoff, IoU threshold) cell. Proposals are kept when their
/// logit exceeds the cutoff (equivalently, their score exceeds `sigmoid(cutoff)`).
pub fn recall_table(proposals: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], thresholds: &[f64], cutoffs: &[f64]) -> Result<RecallTable> {
    if proposals.len() != gts.len() {
        return Err(Error::Shape(format!("{} proposal lists for {} images", proposals.len(), gts.len())));
    }
    if gts.iter().all(Vec::is_empty) {
        return Err(Error::EmptyGroundTruth);
    }
    let classes = classes_of(gts);
    let mut rows: Vec<RecallRow> = cutoffs
        .par_iter()
        .map(|&cutoff| {
            let floor = sigmoid(cutoff);
            let kept: Vec<Vec<ScoredBox>> = proposals.iter().map(|p| p.iter().filter(|b| b.score > floor).copied().collect()).collect();
            let budget = kept.iter().map(Vec::len).sum::<usize>() as f64 / kept.len().max(1) as f64;
            let mut per_class = Vec::with_capacity(thresholds.len());
            let mut class_average = Vec::with_capacity(thresholds.len());
            let mut agnostic = Vec::with_capacity(thresholds.len());
            for &t in thresholds {
                // (recalled, total) per class, summed over images in order
                let mut counts = vec![(0usize, 0usize); classes.len()];
                for (k, g) in kept.iter().zip(gts) {
                    let boxes: Vec<BBox> = g.iter().map(|b| b.bbox).collect();
                    for (hit, gt) in greedy_recall(k, &boxes, t).into_iter().zip(g) {
                        let c = classes.binary_search(&gt.class).unwrap();
                        counts[c].0 += usize::from(hit);
                        counts[c].1 += 1;
                    }
                }
                let recalls: Vec<Option<f64>> = counts.iter().map(|&(r, n)| (n > 0).then(|| r as f64 / n as f64)).collect();
                let present: Vec<f64> = recalls.iter().flatten().copied().collect();
                class_average.push(present.iter().sum::<f64>() / present.len() as f64);
                let (r, n) = counts.iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
                agnostic.push(r as f64 / n as f64);
                per_class.push(recalls);
            }
            RecallRow { cutoff, budget, per_class, class_average, agnostic }
        })
        .collect();
    rows.sort_by(|a, b| a.budget.total_cmp(&b.budget));
    Ok(RecallTable { thresholds: thresholds.to_vec(), classes, rows })
}

/// Writes one row per (cutoff, class) plus an `all` row (class average) and an
/// `agnostic` row per cutoff.
pub fn write_recall_csv<W: std::io::Write>(out: W, table: &RecallTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cutoff".to_string(), "budget".to_string(), "class".to_string()];
    header.extend(table.thresholds.iter().map(|t| format!("recall@{t}")));
    w.write_record(&header)?;
    for row in &table.rows {
        let lead = [row.cutoff.to_string(), row.budget.to_string()];
        for (ci, c) in table.classes.iter().enumerate() {
            let mut rec = lead.to_vec();
            rec.push(c.to_string());
            rec.extend(row.per_class.iter().map(|pc| pc[ci].map_or(String::new(), |v| v.to_string())));
            w.write_record(&rec)?;
        }
        for (name, vals) in [("all", &row.class_average), ("agnostic", &row.agnostic)] {
            let mut rec = lead.to_vec();
            rec.push(name.to_string());
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// All-points interpolated average precision over a set of images. Detections are
/// ranked globally by score (ties by image, then position); a detection is a true
/// positive when it overlaps an unmatched ground truth of its image with IoU > `t`.
/// `None` when there are no ground truths.
pub fn average_precision(dets: &[Vec<ScoredBox>], gts: &[Vec<BBox>], t: f64) -> Option<f64> {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let flat: Vec<(usize, &ScoredBox)> = dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |b| (i, b))).collect();
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(flat.len());
    for k in rank_by_score(flat.iter().map(|(_, b)| b.score)) {
        let (img, d) = flat[k];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            let o = iou(&d.bbox, g);
            if !matched[img][j] && o > t && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            matched[img][j] = true;
        }
        tp.push(best.is_some());
    }
    Some(ap_from_hits(&tp, total))
}

/// Area under the precision envelope for a ranked hit list.
fn ap_from_hits(hits: &[bool], total: usize) -> f64 {
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / total as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: RecallTable,
    /// `(class, AP)`; AP is `None` for classes without ground truths.
    pub ap: Vec<(usize, Option<f64>)>,
    /// Mean over classes with ground truths.
    pub map: Option<f64>,
    /// Class-agnostic AP of the detection confidences.
    pub agnostic_ap: Option<f64>,
    pub fingerprint: String,
}

/// Per-class AP of class-scored detections at IoU `t`.
pub fn class_aps(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize, t: f64) -> Vec<(usize, Option<f64>)> {
    (1..=num_classes)
        .map(|k| {
            let d: Vec<Vec<ScoredBox>> = dets
                .iter()
                .map(|ds| {
                    ds.iter()
                        .filter(|d| d.label.map_or(true, |l| l == k))
                        .map(|d| ScoredBox::new(d.bbox, d.class_scores.get(k).copied().unwrap_or(0.0)))
                        .collect()
                })
                .collect();
            let g: Vec<Vec<BBox>> = gts.iter().map(|gs| gs.iter().filter(|b| b.class == k).map(|b| b.bbox).collect()).collect();
            let ap = average_precision(&d, &g, t);
            if ap.is_none() {
                log::warn!("class {k} has no ground truth; excluded from mAP");
            }
            (k, ap)
        })
        .collect()
}

pub fn mean_ap(aps: &[(usize, Option<f64>)]) -> Option<f64> {
    let v: Vec<f64> = aps.iter().filter_map(|a| a.1).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full report over detections: recall table on the confidences, per-class AP and mAP.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize, fingerprint: String) -> Result<EvalReport> {
    let props: Vec<Vec<ScoredBox>> = dets.iter().map(|d| d.iter().map(|x| ScoredBox::new(x.bbox, x.confidence)).collect()).collect();
    let recall = recall_table(&props, gts, &DEFAULT_THRESHOLDS, &default_cutoffs())?;
    let ap = class_aps(dets, gts, num_classes, 0.5);
    let map = mean_ap(&ap);
    let boxes: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|b| b.bbox).collect()).collect();
    let agnostic_ap = average_precision(&props, &boxes, 0.5);
    Ok(EvalReport { recall, ap, map, agnostic_ap, fingerprint })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub recall: f64,
    /// Class-agnostic AP of the top-K proposals.
    pub ap: f64,
}

/// Recall and class-agnostic AP at IoU `t` of the top-K proposals per image, per K.
pub fn sweep_budget(proposals: &[Vec<ScoredBox>], gts: &[Vec<BBox>], ks: &[usize], t: f64) -> Result<Vec<SweepPoint>> {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    if proposals.len() != gts.len() {
        return Err(Error::Shape(format!("{} proposal lists for {} images", proposals.len(), gts.len())));
    }
    Ok(ks
        .par_iter()
        .map(|&k| {
            let top: Vec<Vec<ScoredBox>> = proposals.iter().map(|p| select_topk(p, k)).collect();
            let hits: usize = top.iter().zip(gts).map(|(p, g)| greedy_recall(p, g, t).into_iter().filter(|&h| h).count()).sum();
            SweepPoint { k, recall: hits as f64 / total as f64, ap: average_precision(&top, gts, t).unwrap_or(0.0) }
        })
        .collect())
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// A minimal SVG line plot of recall and AP against K (log-scaled K axis).
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let kmax = points.iter().map(|p| p.k.max(1)).max().unwrap_or(1) as f64;
    let x = |k: usize| pad + (w - 2.0 * pad) * ((k.max(1) as f64).ln() / kmax.ln().max(1e-9));
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let line = |f: &dyn Fn(&SweepPoint) -> f64| points.iter().map(|p| format!("{:.1},{:.1}", x(p.k), y(f(p)))).collect::<Vec<_>>().join(" ");
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{rec}\"/>\n",
            "<polyline fill=\"none\" stroke=\"darkorange\" stroke-width=\"2\" points=\"{ap}\"/>\n",
            "<text x=\"{p}\" y=\"20\">recall (blue), AP (orange) vs top-K</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        p = pad,
        b = h - pad,
        r = w - pad,
        rec = line(&|p| p.recall),
        ap = line(&|p| p.ap)
    )
}
