//! From slot outputs to proposals and detections: decoding, top-K budgeting,
//! multi-crop tiling with containment filtering, post-classification with context
//! crops, and multi-model ensembling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, nms_indices, rank_by_score, BBox, ScoredBox};
use crate::nn::{ContextNet, PostClassifierNet, ProposerNet, SlotPredictions, Tensor3};
use crate::priors::PriorSet;

/// Adds each residual to its prior and clips to the unit square; score is the sigmoid
/// of the slot logit.
pub fn decode_slots(preds: &SlotPredictions, priors: &PriorSet) -> Result<Vec<ScoredBox>> {
    if preds.len() != priors.len() {
        return Err(Error::Shape(format!("{} slots vs {} priors", preds.len(), priors.len())));
    }
    preds
        .residuals
        .iter()
        .zip(&priors.priors)
        .zip(preds.confidences())
        .map(|((r, p), c)| {
            let pc = p.coords();
            let b = BBox::from_corners_sorted([r[0] + pc[0], r[1] + pc[1], r[2] + pc[2], r[3] + pc[3]])?;
            Ok(ScoredBox::new(b.clip_unit(), c))
        })
        .collect()
}

/// The `k` highest-scoring proposals, in descending score order (ties by input order).
pub fn select_topk(proposals: &[ScoredBox], k: usize) -> Vec<ScoredBox> {
    rank_by_score(proposals.iter().map(|p| p.score)).into_iter().take(k).map(|i| proposals[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    /// Window in whole-image normalized coordinates.
    pub window: BBox,
    /// Window side relative to the smaller image side; 0 tags the whole-image crop.
    pub scale: f64,
}

fn axis_positions(extent: f64, side: f64, min_overlap: f64) -> Vec<f64> {
    if side >= extent - 1e-12 {
        return vec![0.0];
    }
    let stride = side * (1.0 - min_overlap);
    let n = ((extent - side) / stride - 1e-9).ceil() as usize + 1;
    (0..n).map(|i| (extent - side) * i as f64 / (n - 1) as f64).collect()
}

/// Square windows of side `crop_scale` (in units of the smaller image side) tiling an
/// image whose sides measure `extent_x` by `extent_y` in those units. Per axis the
/// first window starts at 0, the last ends at the extent, and the stride is uniform
/// and at most `crop_scale * (1 - min_overlap)` with the fewest windows.
pub fn tile_crops(extent_x: f64, extent_y: f64, crop_scale: f64, min_overlap: f64) -> Result<Vec<CropWindow>> {
    if !(crop_scale > 0.0 && crop_scale <= 1.0) || !(0.0..1.0).contains(&min_overlap) {
        return Err(Error::InvalidConfig(format!("crop scale {crop_scale} / overlap {min_overlap} out of range")));
    }
    let xs = axis_positions(extent_x, crop_scale, min_overlap);
    let ys = axis_positions(extent_y, crop_scale, min_overlap);
    let (sx, sy) = (crop_scale.min(extent_x), crop_scale.min(extent_y));
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let window = BBox { xmin: x / extent_x, ymin: y / extent_y, xmax: ((x + sx) / extent_x).min(1.0), ymax: ((y + sy) / extent_y).min(1.0) };
            out.push(CropWindow { window, scale: crop_scale });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Sliding-window scales relative to the smaller image side.
    pub scales: Vec<f64>,
    pub min_overlap: f64,
    /// Sliding-window proposals must lie inside `[margin, 1 - margin]^2` of their crop.
    pub margin: f64,
    pub nms: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { scales: vec![1.0, 0.62], min_overlap: 0.5, margin: 0.1, nms: 0.85 }
    }
}

/// Whole-image crop followed by the sliding windows of every configured scale.
/// Windows identical to the whole image are dropped (they add nothing).
pub fn crop_windows(image: &Tensor3, cfg: &CropConfig) -> Result<Vec<CropWindow>> {
    let short = image.h.min(image.w) as f64;
    let (ex, ey) = (image.w as f64 / short, image.h as f64 / short);
    let mut out = vec![CropWindow { window: BBox::unit(), scale: 0.0 }];
    for &s in &cfg.scales {
        out.extend(tile_crops(ex, ey, s, cfg.min_overlap)?.into_iter().filter(|c| c.window != BBox::unit()));
    }
    Ok(out)
}

fn run_proposer(net: &ProposerNet, priors: &PriorSet, crop: &Tensor3) -> Result<Vec<ScoredBox>> {
    decode_slots(&net.forward(crop)?, priors)
}

fn resample_for(net: &ProposerNet, image: &Tensor3, window: &BBox) -> Tensor3 {
    let (h, w, _) = net.input_dims();
    if *window == BBox::unit() && image.h == h && image.w == w {
        image.clone()
    } else {
        image.crop_resize(window, h, w)
    }
}

/// Decoded whole-image proposals after NMS.
pub fn single_crop_propose(net: &ProposerNet, priors: &PriorSet, image: &Tensor3, nms_threshold: f64) -> Result<Vec<ScoredBox>> {
    let crop = resample_for(net, image, &BBox::unit());
    Ok(nms(&run_proposer(net, priors, &crop)?, nms_threshold))
}

/// Runs the proposer on the whole image and on sliding windows, keeps window
/// proposals fully inside the window's central region, maps everything to image
/// coordinates and merges with NMS. Merge order is crop index, then slot index.
pub fn multi_crop_propose(net: &ProposerNet, priors: &PriorSet, image: &Tensor3, cfg: &CropConfig) -> Result<Vec<ScoredBox>> {
    let windows = crop_windows(image, cfg)?;
    let inner = BBox { xmin: cfg.margin, ymin: cfg.margin, xmax: 1.0 - cfg.margin, ymax: 1.0 - cfg.margin };
    let per_crop: Vec<Result<Vec<ScoredBox>>> = windows
        .par_iter()
        .map(|cw| {
            let crop = resample_for(net, image, &cw.window);
            let boxes = run_proposer(net, priors, &crop)?;
            if cw.window == BBox::unit() {
                return Ok(boxes);
            }
            Ok(boxes
                .into_iter()
                .filter(|b| inner.contains(&b.bbox))
                .map(|b| ScoredBox::new(b.bbox.from_window_frame(&cw.window).clip_unit(), b.score))
                .collect())
        })
        .collect();
    let mut all = Vec::new();
    for r in per_crop {
        all.extend(r?);
    }
    Ok(nms(&all, cfg.nms))
}

/// A post-classified box in whole-image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Class-agnostic proposal score.
    pub confidence: f64,
    /// Class distribution, index 0 = background.
    pub class_scores: Vec<f64>,
    /// Class assigned by per-class NMS after ensembling, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default)]
    pub source: String,
}

/// Whole image, the four corner squares and the central square, each 80% of the side.
pub fn context_crops() -> Vec<BBox> {
    let s = 0.8;
    let r = 1.0 - s;
    vec![
        BBox::unit(),
        BBox { xmin: 0.0, ymin: 0.0, xmax: s, ymax: s },
        BBox { xmin: r, ymin: 0.0, xmax: 1.0, ymax: s },
        BBox { xmin: 0.0, ymin: r, xmax: s, ymax: 1.0 },
        BBox { xmin: r, ymin: r, xmax: 1.0, ymax: 1.0 },
        BBox { xmin: r / 2.0, ymin: r / 2.0, xmax: 1.0 - r / 2.0, ymax: 1.0 - r / 2.0 },
    ]
}

/// Context feature vectors of an image, one per context crop.
pub fn context_features(ctx: &ContextNet, image: &Tensor3, crops: &[BBox]) -> Result<Vec<Vec<f64>>> {
    let s = ctx.crop_size();
    crops.iter().map(|c| ctx.extract_context_features(&image.crop_resize(c, s, s))).collect()
}

/// Scores each proposal with the combiner averaged over the context crops. Object
/// features are computed once per proposal, context features once per image.
/// Zero-area proposals are skipped with a warning.
pub fn classify_detections(
    pc: &PostClassifierNet,
    ctx: Option<&ContextNet>,
    image: &Tensor3,
    proposals: &[ScoredBox],
    crops: &[BBox],
) -> Result<Vec<Detection>> {
    let contexts: Vec<Option<Vec<f64>>> = match ctx {
        Some(c) if !crops.is_empty() => context_features(c, image, crops)?.into_iter().map(Some).collect(),
        _ => vec![None],
    };
    let s = pc.crop_size();
    let out: Vec<Result<Option<Detection>>> = proposals
        .par_iter()
        .map(|p| {
            if p.bbox.area() <= 0.0 {
                log::warn!("skipping zero-area proposal {:?}", p.bbox);
                return Ok(None);
            }
            let obj = pc.object_features(&image.crop_resize(&p.bbox, s, s))?;
            let mut acc = vec![0.0; pc.config.num_classes + 1];
            for c in &contexts {
                for (a, v) in acc.iter_mut().zip(pc.combine(&obj, c.as_deref())?) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= contexts.len() as f64);
            Ok(Some(Detection { bbox: p.bbox, confidence: p.score, class_scores: acc, label: None, source: String::new() }))
        })
        .collect();
    let mut dets = Vec::with_capacity(proposals.len());
    for d in out {
        dets.extend(d?);
    }
    Ok(dets)
}

/// Ensembled class scores: for detection `i` of model `j` and class `k`,
/// `s = (c_ijk + sum over other models n of max_m J(l_ij, l_mn) * c_mnk) / N`,
/// where an empty model contributes 0.
pub fn ensemble_scores(per_model: &[Vec<Detection>]) -> Vec<Vec<Vec<f64>>> {
    let n = per_model.len() as f64;
    per_model
        .iter()
        .enumerate()
        .map(|(j, dets)| {
            dets.iter()
                .map(|d| {
                    let mut s = d.class_scores.clone();
                    for (k, sk) in s.iter_mut().enumerate() {
                        for (m, other) in per_model.iter().enumerate() {
                            if m == j {
                                continue;
                            }
                            let best = other
                                .iter()
                                .map(|o| iou(&d.bbox, &o.bbox) * o.class_scores.get(k).copied().unwrap_or(0.0))
                                .fold(0.0, f64::max);
                            *sk += best;
                        }
                        *sk /= n;
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Ensembles detections of several models, then keeps the best per class with NMS.
/// Output: one labeled detection per surviving (box, class), sorted by class, then score.
pub fn ensemble_multibox(per_model: &[Vec<Detection>], num_classes: usize, nms_threshold: f64) -> Result<Vec<Detection>> {
    if per_model.is_empty() {
        return Err(Error::InvalidConfig("ensembling needs at least one model".into()));
    }
    let scores = ensemble_scores(per_model);
    let mut pooled: Vec<Detection> = Vec::new();
    for (j, (dets, sc)) in per_model.iter().zip(scores).enumerate() {
        for (d, s) in dets.iter().zip(sc) {
            let source = if d.source.is_empty() { format!("model{j}") } else { d.source.clone() };
            pooled.push(Detection { class_scores: s, source, ..d.clone() });
        }
    }
    let boxes: Vec<BBox> = pooled.iter().map(|d| d.bbox).collect();
    let mut out = Vec::new();
    for k in 1..=num_classes {
        let s: Vec<f64> = pooled.iter().map(|d| d.class_scores.get(k).copied().unwrap_or(0.0)).collect();
        for i in nms_indices(&boxes, &s, nms_threshold) {
            out.push(Detection { label: Some(k), ..pooled[i].clone() });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::classifier::{ContextConfig, FeatureNetConfig, PostClassifierConfig};
    use crate::nn::ProposerConfig;
    use crate::priors::{build_grid_priors, GridSpec};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn small_net() -> (ProposerNet, PriorSet) {
        let priors = build_grid_priors(&[GridSpec::with_default_templates(4).unwrap(), GridSpec::with_default_templates(2).unwrap()], true).unwrap();
        let cfg = ProposerConfig { input_size: 32, block_channels: [4, 4, 6, 6], reduce_channels: [2, 2, 2], taper_channels: 4, conf_bias: 0.0, head_gain: 1.0, ..Default::default() };
        (ProposerNet::new(cfg, &priors).unwrap(), priors)
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor3 {
        let mut r = rng::stream(seed, "img", 0);
        Tensor3::from_vec(h, w, 3, (0..h * w * 3).map(|_| r.gen()).collect()).unwrap()
    }

    #[test]
    fn zero_residuals_decode_to_priors() {
        let (net, priors) = small_net();
        let preds = SlotPredictions { residuals: vec![[0.0; 4]; net.slot_count()], logits: vec![0.0; net.slot_count()] };
        let boxes = decode_slots(&preds, &priors).unwrap();
        assert_eq!(boxes.iter().map(|b| b.bbox).collect::<Vec<_>>(), priors.priors);
        assert!(boxes.iter().all(|b| b.score == 0.5));
    }

    #[test]
    fn decode_adds_and_clips() {
        let mut priors = PriorSet::empty();
        priors.priors = vec![bx(0.1, 0.1, 0.3, 0.3), bx(0.6, 0.2, 0.9, 0.5)];
        let preds = SlotPredictions { residuals: vec![[0.05, 0.0, 0.05, 0.0], [0.0, 0.0, 0.3, 0.0]], logits: vec![0.0, 0.0] };
        let out = decode_slots(&preds, &priors).unwrap();
        let exp = [0.15, 0.1, 0.35, 0.3];
        for (a, e) in out[0].bbox.coords().iter().zip(exp) {
            assert!((a - e).abs() < 1e-15);
        }
        // unclipped xmax would be 1.2
        assert!((0.9f64 + 0.3 - 1.2).abs() < 1e-12);
        assert_eq!(out[1].bbox.xmax, 1.0);
        assert!(decode_slots(&SlotPredictions { residuals: vec![], logits: vec![] }, &priors).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut r = rng::stream(3, "t", 0);
        let (_, priors) = small_net();
        let gts: Vec<BBox> = (0..priors.len())
            .map(|_| {
                let (x, y) = (r.gen_range(0.0..0.5), r.gen_range(0.0..0.5));
                bx(x, y, x + r.gen_range(0.01..0.5), y + r.gen_range(0.01..0.5))
            })
            .collect();
        let residuals = gts
            .iter()
            .zip(&priors.priors)
            .map(|(g, p)| {
                let (g, p) = (g.coords(), p.coords());
                [g[0] - p[0], g[1] - p[1], g[2] - p[2], g[3] - p[3]]
            })
            .collect();
        let out = decode_slots(&SlotPredictions { residuals, logits: vec![0.0; gts.len()] }, &priors).unwrap();
        for (o, g) in out.iter().zip(&gts) {
            for (a, b) in o.bbox.coords().iter().zip(g.coords()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topk_cases() {
        let props: Vec<ScoredBox> = [0.2, 0.9, 0.5, 0.9].iter().map(|&s| ScoredBox::new(BBox::unit(), s)).collect();
        assert_eq!(select_topk(&props, 10).len(), 4);
        assert_eq!(select_topk(&props, 1)[0], props[1]);
        assert_eq!(select_topk(&props, 0).len(), 0);
        let sorted: Vec<f64> = select_topk(&props, 4).iter().map(|p| p.score).collect();
        assert_eq!(sorted, vec![0.9, 0.9, 0.5, 0.2]);
    }

    /// Smallest n whose uniform stride fits under the bound, by enumeration.
    fn enumerate_count(extent: f64, side: f64, overlap: f64) -> usize {
        (2..100_000).find(|&n| (extent - side) / (n - 1) as f64 <= side * (1.0 - overlap) + 1e-12).unwrap()
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(tile_crops(1.0, 1.0, 1.0, 0.5).unwrap().len(), 1);
        assert_eq!(tile_crops(2.0, 1.0, 1.0, 0.5).unwrap().len(), 3);
        assert_eq!(enumerate_count(2.0, 1.0, 0.5), 3);
        assert_eq!(tile_crops(2.0, 1.0, 1.0, 0.625).unwrap().len(), 4);
        assert_eq!(enumerate_count(2.0, 1.0, 0.625), 4);
        assert!(tile_crops(1.0, 1.0, 0.0, 0.5).is_err());
        assert!(tile_crops(1.0, 1.0, 0.5, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn tiling_overlap_and_extent(ex in 1.0f64..3.0, scale in 0.2f64..1.0, overlap in 0.0f64..0.9) {
            let wins = tile_crops(ex, 1.0, scale, overlap).unwrap();
            let xs: Vec<f64> = wins.iter().filter(|w| w.window.ymin == 0.0).map(|w| w.window.xmin * ex).collect();
            let expect = if scale >= ex { 1 } else { enumerate_count(ex, scale, overlap) };
            prop_assert_eq!(xs.len(), expect);
            prop_assert!(xs[0].abs() < 1e-12);
            prop_assert!((xs[xs.len() - 1] + scale - ex).abs() < 1e-9);
            for p in xs.windows(2) {
                // overlap of neighbours along x, in units of the window side
                prop_assert!(scale - (p[1] - p[0]) >= overlap * scale - 1e-9);
            }
            for w in &wins {
                prop_assert!(BBox::unit().contains(&w.window));
            }
        }
    }

    #[test]
    fn whole_image_only_equals_single_crop() {
        let (net, priors) = small_net();
        let img = random_image(1, 32, 32);
        let cfg = CropConfig { scales: vec![], ..Default::default() };
        assert_eq!(multi_crop_propose(&net, &priors, &img, &cfg).unwrap(), single_crop_propose(&net, &priors, &img, cfg.nms).unwrap());
    }

    #[test]
    fn multi_crop_output_valid() {
        let (net, priors) = small_net();
        let img = random_image(2, 32, 32);
        let out = multi_crop_propose(&net, &priors, &img, &CropConfig::default()).unwrap();
        assert!(!out.is_empty());
        for (i, a) in out.iter().enumerate() {
            assert!(BBox::unit().contains(&a.bbox));
            for b in &out[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.85);
            }
        }
    }

    #[test]
    fn containment_rule() {
        let inner = BBox { xmin: 0.1, ymin: 0.1, xmax: 0.9, ymax: 0.9 };
        assert!(!inner.contains(&bx(0.02, 0.5, 0.15, 0.6)));
        assert!(inner.contains(&bx(0.1, 0.5, 0.15, 0.6)));
    }

    #[test]
    fn default_context_crops() {
        let c = context_crops();
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], BBox::unit());
        for b in &c[1..] {
            assert!((b.width() - 0.8).abs() < 1e-12 && (b.height() - 0.8).abs() < 1e-12);
        }
        let corners: Vec<(f64, f64)> = c[1..5].iter().map(|b| (b.xmin, b.ymin)).collect();
        for k in [(0.0, 0.0), (0.2, 0.0), (0.0, 0.2), (0.2, 0.2)] {
            assert!(corners.iter().any(|&(x, y)| (x - k.0).abs() < 1e-12 && (y - k.1).abs() < 1e-12));
        }
        assert!((c[5].center().0 - 0.5).abs() < 1e-12 && (c[5].center().1 - 0.5).abs() < 1e-12);
    }

    fn classifier_pair() -> (PostClassifierNet, ContextNet) {
        let f = FeatureNetConfig { input_size: 8, channels: [3, 4, 5], reduce_channels: [2, 2] };
        let pc = PostClassifierNet::new(PostClassifierConfig { features: f.clone(), context_width: 5, num_classes: 2, seed: 1 }).unwrap();
        let ctx = ContextNet::new(ContextConfig { features: f, num_classes: 2, seed: 2 }).unwrap();
        (pc, ctx)
    }

    #[test]
    fn context_averaging() {
        let (pc, ctx) = classifier_pair();
        let img = random_image(5, 24, 24);
        let props = vec![ScoredBox::new(bx(0.1, 0.2, 0.6, 0.7), 0.9), ScoredBox::new(bx(0.3, 0.3, 0.3, 0.8), 0.5)];
        let one = classify_detections(&pc, Some(&ctx), &img, &props, &[BBox::unit()]).unwrap();
        assert_eq!(one.len(), 1, "zero-area proposal skipped");
        let f = ctx.extract_context_features(&img.crop_resize(&BBox::unit(), 8, 8)).unwrap();
        let direct = pc.forward(&img.crop_resize(&props[0].bbox, 8, 8), Some(&f)).unwrap();
        assert_eq!(one[0].class_scores, direct);

        let same = classify_detections(&pc, Some(&ctx), &img, &props, &[BBox::unit(); 3]).unwrap();
        for (a, b) in same[0].class_scores.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }

        let crops = context_crops();
        let six = classify_detections(&pc, Some(&ctx), &img, &props[..1], &crops).unwrap();
        let mut mean = vec![0.0; 3];
        for c in &crops {
            let f = ctx.extract_context_features(&img.crop_resize(c, 8, 8)).unwrap();
            let p = pc.forward(&img.crop_resize(&props[0].bbox, 8, 8), Some(&f)).unwrap();
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / 6.0;
            }
        }
        for (a, b) in six[0].class_scores.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_order_invariant() {
        let (pc, ctx) = classifier_pair();
        let img = random_image(6, 16, 16);
        let props = vec![ScoredBox::new(bx(0.1, 0.2, 0.6, 0.7), 0.9), ScoredBox::new(bx(0.4, 0.1, 0.9, 0.5), 0.3)];
        let rev: Vec<ScoredBox> = props.iter().rev().copied().collect();
        let a = classify_detections(&pc, Some(&ctx), &img, &props, &context_crops()).unwrap();
        let mut b = classify_detections(&pc, Some(&ctx), &img, &rev, &context_crops()).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    fn det(b: BBox, scores: Vec<f64>) -> Detection {
        Detection { bbox: b, confidence: 1.0, class_scores: scores, label: None, source: String::new() }
    }

    #[test]
    fn ensemble_identities() {
        let a = det(bx(0.1, 0.1, 0.5, 0.5), vec![0.2, 0.5, 0.3]);
        let b = det(bx(0.6, 0.6, 0.9, 0.9), vec![0.1, 0.3, 0.6]);
        let single = ensemble_scores(&[vec![a.clone(), b.clone()]]);
        assert_eq!(single[0][0], a.class_scores);
        assert_eq!(single[0][1], b.class_scores);

        let dup = ensemble_scores(&[vec![a.clone()], vec![a.clone()]]);
        for s in &dup {
            for (x, y) in s[0].iter().zip(&a.class_scores) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let disjoint = ensemble_scores(&[vec![a.clone()], vec![b.clone()]]);
        for (x, y) in disjoint[0][0].iter().zip(&a.class_scores) {
            assert!((x - y / 2.0).abs() < 1e-12);
        }
        for (x, y) in disjoint[1][0].iter().zip(&b.class_scores) {
            assert!((x - y / 2.0).abs() < 1e-12);
        }
        let empty = ensemble_scores(&[vec![a.clone()], vec![]]);
        assert_eq!(empty[0][0], a.class_scores.iter().map(|v| v / 2.0).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn ensemble_never_exceeds_model_max(seed in 0u64..500, models in 1usize..4) {
            let mut r = rng::stream(seed, "ens", 0);
            let per: Vec<Vec<Detection>> = (0..models)
                .map(|_| (0..r.gen_range(0..4)).map(|_| {
                    let (x, y) = (r.gen_range(0.0..0.6), r.gen_range(0.0..0.6));
                    det(bx(x, y, x + r.gen_range(0.05..0.4), y + r.gen_range(0.05..0.4)), (0..3).map(|_| r.gen()).collect())
                }).collect())
                .collect();
            let cmax: Vec<f64> = (0..3).map(|k| per.iter().flatten().map(|d| d.class_scores[k]).fold(0.0, f64::max)).collect();
            for s in ensemble_scores(&per).iter().flatten() {
                for k in 0..3 {
                    prop_assert!(s[k] <= cmax[k] + 1e-12);
                }
            }
            let out = ensemble_multibox(&per, 2, 0.5).unwrap();
            for k in 1..=2 {
                let cls: Vec<&Detection> = out.iter().filter(|d| d.label == Some(k)).collect();
                for (i, a) in cls.iter().enumerate() {
                    for b in &cls[i + 1..] {
                        prop_assert!(iou(&a.bbox, &b.bbox) < 0.5);
                    }
                }
            }
        }
    }
}
