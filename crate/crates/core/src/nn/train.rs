//! Training loops: the proposer (match, then step), the context network and the
//! post-classifier with balanced negative sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{ContextNet, PostClassifierNet};
use super::params::{clip_norm, Optimizer, OptimizerKind};
use super::proposer::ProposerNet;
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::loss::{multibox_loss, Coords, LossConfig};
use crate::matching::best_matching;
use crate::priors::PriorSet;
use crate::rng;
use crate::synth::{distort_aspect, drop_labels, jitter_scale, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// The learning rate decays linearly to `lr * final_lr_fraction` at the last step.
    pub final_lr_fraction: f64,
    /// Used by SGD only.
    pub momentum: f64,
    /// Gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub exact_matching: bool,
    pub loss: LossConfig,
    /// Maximum aspect stretch applied as augmentation; 1 disables.
    pub aspect_distortion: f64,
    /// Relative bound of the random zoom applied as augmentation; 0 disables.
    pub size_jitter: f64,
    /// Fraction of ground-truth labels hidden from training, per box.
    pub label_drop: f64,
    pub seed: u64,
}

/// Location weight used for proposer training. The matching sees boxes in unit
/// coordinates, where a far-off slot is only ~0.1 squared distance away, so small
/// weights let a few confident slots win every match.
pub const TRAIN_ALPHA: f64 = 300.0;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            optimizer: OptimizerKind::Adagrad,
            lr: 0.01,
            final_lr_fraction: 0.1,
            momentum: 0.9,
            grad_clip: 20.0,
            exact_matching: true,
            loss: LossConfig { alpha: TRAIN_ALPHA, ..LossConfig::default() },
            aspect_distortion: 1.0,
            size_jitter: 0.0,
            label_drop: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.aspect_distortion >= 1.0) {
            return Err(Error::InvalidConfig("need lr >= 0, momentum in [0,1), aspect_distortion >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_drop) {
            return Err(Error::InvalidConfig(format!("label drop rate {} outside [0, 1)", self.label_drop)));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let t = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 0.0 };
        self.lr * (1.0 - t * (1.0 - self.final_lr_fraction))
    }
}

/// Batch-averaged loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub f_conf: f64,
    pub f_loc: f64,
    pub f_total: f64,
}

/// Yields dataset indices epoch by epoch, each epoch a fresh seeded shuffle.
pub struct EpochSampler {
    len: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        EpochSampler { len, seed, epoch: 0, order: Vec::new(), pos: 0 }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut rng::stream(self.seed, "epoch-shuffle", self.epoch));
            self.epoch += 1;
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn augment(scene: &Scene, cfg: &TrainConfig, key: u64) -> Result<Scene> {
    let mut s = if cfg.aspect_distortion > 1.0 { distort_aspect(scene, cfg.aspect_distortion, rng::derive_seed(cfg.seed, "aug-aspect", key))? } else { scene.clone() };
    if cfg.size_jitter > 0.0 {
        s = jitter_scale(&s, cfg.size_jitter, rng::derive_seed(cfg.seed, "aug-size", key));
    }
    Ok(s)
}

struct SampleGrad {
    f_conf: f64,
    f_loc: f64,
    f_total: f64,
    grad: Vec<f64>,
}

/// Loss and parameter gradient for one image: forward, form `l = l' + p`, match,
/// evaluate the objective at that matching, backpropagate.
pub fn proposer_sample_grad(net: &ProposerNet, priors: &PriorSet, image: &Tensor3, gts: &[BBox], loss: &LossConfig, exact: bool) -> Result<(f64, f64, f64, Vec<f64>)> {
    let (preds, cache) = net.forward_cached(image)?;
    let locs: Vec<Coords> = preds
        .residuals
        .iter()
        .zip(&priors.priors)
        .map(|(r, p)| {
            let pc = p.coords();
            [r[0] + pc[0], r[1] + pc[1], r[2] + pc[2], r[3] + pc[3]]
        })
        .collect();
    let g: Vec<Coords> = gts.iter().map(BBox::coords).collect();
    let matching = best_matching(&locs, &preds.logits, &g, loss, exact)?;
    let b = multibox_loss(&locs, &preds.logits, &g, &matching, loss)?;
    let mut grad = net.params.zeros_like();
    net.backward(&cache, &b.grad_locs, &b.grad_logits, &mut grad);
    Ok((b.f_conf, b.f_loc, b.f_total, grad))
}

/// Trains the proposer in place and returns the per-step loss trace.
pub fn train_proposer(net: &mut ProposerNet, priors: &PriorSet, data: &[Scene], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if priors.len() != net.slot_count() {
        return Err(Error::Shape(format!("{} priors for {} slots", priors.len(), net.slot_count())));
    }
    let dropped: Vec<Scene>;
    let data = if cfg.label_drop > 0.0 {
        dropped = data
            .iter()
            .enumerate()
            .map(|(i, s)| Scene { gts: drop_labels(&s.gts, cfg.label_drop, rng::derive_seed(cfg.seed, "label-drop", i as u64)), ..s.clone() })
            .collect();
        &dropped[..]
    } else {
        data
    };
    let mut sampler = EpochSampler::new(data.len(), rng::derive_seed(cfg.seed, "proposer-batches", 0));
    let mut opt = Optimizer::new(cfg.optimizer, net.params.len(), cfg.lr, cfg.momentum);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(usize, u64)> = (0..cfg.batch_size).map(|k| (sampler.next_index(), (step * cfg.batch_size + k) as u64)).collect();
        let frozen = &*net;
        let results: Vec<Result<SampleGrad>> = batch
            .par_iter()
            .map(|&(i, key)| {
                let scene = augment(&data[i], cfg, key)?;
                let (f_conf, f_loc, f_total, grad) = proposer_sample_grad(frozen, priors, &scene.image, &scene.gt_boxes(), &cfg.loss, cfg.exact_matching)?;
                Ok(SampleGrad { f_conf, f_loc, f_total, grad })
            })
            .collect();
        let results: Vec<Result<SampleGrad>> = results.into_iter().map(|r| as_divergence(step, r)).collect();
        let mut grad = net.params.zeros_like();
        let mut log = StepLog { step, f_conf: 0.0, f_loc: 0.0, f_total: 0.0 };
        let scale = 1.0 / cfg.batch_size as f64;
        for r in results {
            let s = r?;
            log.f_conf += s.f_conf * scale;
            log.f_loc += s.f_loc * scale;
            log.f_total += s.f_total * scale;
            for (g, v) in grad.iter_mut().zip(&s.grad) {
                *g += v * scale;
            }
        }
        check_finite(step, log.f_total, &grad)?;
        let norm = if cfg.grad_clip > 0.0 { clip_norm(&mut grad, cfg.grad_clip) } else { 0.0 };
        opt.lr = cfg.lr_at(step);
        opt.step(&mut net.params.values, &grad);
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!("proposer step {step}: F={:.4} conf={:.4} loc={:.5} |grad|={norm:.3}", log.f_total, log.f_conf, log.f_loc);
        }
        logs.push(log);
    }
    Ok(logs)
}

fn as_divergence<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged { step, detail: format!("non-finite {what}") },
        e => e,
    })
}

fn check_finite(step: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step, detail: format!("loss is {loss}") });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged { step, detail: format!("gradient component {i} is {}", grad[i]) });
    }
    Ok(())
}

/// Writes a loss trace as CSV with header `step,f_conf,f_loc,f_total`.
pub fn write_loss_csv<W: std::io::Write>(out: W, logs: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    /// Positives per batch; each batch adds `neg_ratio` negatives per positive.
    pub positives_per_batch: usize,
    pub neg_ratio: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    /// A crop is a positive of class k when its IoU with a class-k box reaches this.
    pub positive_iou: f64,
    /// Jittered copies of each ground-truth box added to the crop pool.
    pub jitter_copies: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 300,
            positives_per_batch: 2,
            neg_ratio: 7,
            lr: 0.01,
            momentum: 0.9,
            grad_clip: 20.0,
            positive_iou: 0.5,
            jitter_copies: 4,
            seed: 0,
        }
    }
}

/// A training crop: image index, window, label (0 = background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledCrop {
    pub image: usize,
    pub bbox: BBox,
    pub label: usize,
}

/// Background unless some ground truth reaches `threshold` IoU; among those, the
/// class of the best-overlapping box.
pub fn label_crop(crop: &BBox, gts: &[(BBox, usize)], threshold: f64) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for &(g, class) in gts {
        let o = iou(crop, &g);
        if o >= threshold && o > best.1 {
            best = (class, o);
        }
    }
    best.0
}

/// Candidate crops per image: the given proposals, the ground-truth boxes, jittered
/// ground truths and uniformly random boxes, all labeled with [`label_crop`].
pub fn build_crop_pool(scenes: &[Scene], proposals: &[Vec<BBox>], cfg: &ClassifierTrainConfig) -> Vec<LabeledCrop> {
    let mut pool = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let gts: Vec<(BBox, usize)> = s.gts.iter().map(|g| (g.bbox, g.class)).collect();
        let mut r = rng::stream(cfg.seed, "crop-pool", i as u64);
        let mut boxes: Vec<BBox> = proposals.get(i).cloned().unwrap_or_default();
        for g in &s.gts {
            boxes.push(g.bbox);
            let (cx, cy) = g.bbox.center();
            let (w, h) = (g.bbox.width(), g.bbox.height());
            for _ in 0..cfg.jitter_copies {
                let b = BBox {
                    xmin: cx - w / 2.0 * r.gen_range(0.8..1.25) + w * r.gen_range(-0.15..0.15),
                    ymin: cy - h / 2.0 * r.gen_range(0.8..1.25) + h * r.gen_range(-0.15..0.15),
                    xmax: cx + w / 2.0 * r.gen_range(0.8..1.25) + w * r.gen_range(-0.15..0.15),
                    ymax: cy + h / 2.0 * r.gen_range(0.8..1.25) + h * r.gen_range(-0.15..0.15),
                };
                boxes.push(b.clip_unit());
            }
        }
        for _ in 0..8 * cfg.jitter_copies.max(1) {
            let (w, h) = (r.gen_range(0.08..0.7), r.gen_range(0.08..0.7));
            let (x, y) = (r.gen_range(0.0..1.0 - w), r.gen_range(0.0..1.0 - h));
            boxes.push(BBox { xmin: x, ymin: y, xmax: x + w, ymax: y + h });
        }
        for b in boxes {
            if b.area() > 0.0 {
                pool.push(LabeledCrop { image: i, bbox: b, label: label_crop(&b, &gts, cfg.positive_iou) });
            }
        }
    }
    pool
}

/// Draws batches with exactly `neg_ratio` negatives per positive, each side
/// sampled uniformly with replacement.
pub struct BalancedSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    neg_ratio: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(pool: &[LabeledCrop], neg_ratio: usize, seed: u64) -> Result<Self> {
        let (positives, negatives): (Vec<usize>, Vec<usize>) = (0..pool.len()).partition(|&i| pool[i].label != 0);
        if positives.is_empty() || (negatives.is_empty() && neg_ratio > 0) {
            return Err(Error::InvalidConfig(format!("crop pool has {} positives and {} negatives", positives.len(), negatives.len())));
        }
        Ok(BalancedSampler { positives, negatives, neg_ratio, rng: rng::stream(seed, "balanced-sampler", 0) })
    }

    /// Pool indices of one batch: positives first, then negatives.
    pub fn sample(&mut self, positives: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(positives * (1 + self.neg_ratio));
        for _ in 0..positives {
            out.push(self.positives[self.rng.gen_range(0..self.positives.len())]);
        }
        for _ in 0..positives * self.neg_ratio {
            out.push(self.negatives[self.rng.gen_range(0..self.negatives.len())]);
        }
        out
    }
}

/// Whole-image context features of every scene under a frozen context network.
pub fn scene_context_features(ctx: &ContextNet, scenes: &[Scene]) -> Result<Vec<Vec<f64>>> {
    let s = ctx.crop_size();
    scenes.par_iter().map(|sc| ctx.extract_context_features(&sc.image.crop_resize(&BBox::unit(), s, s))).collect()
}

/// Trains the post-classifier on crops from `pool`, with context features per image
/// (absent context when `context` is `None`). Returns the mean batch loss per step.
pub fn train_postclassifier(
    net: &mut PostClassifierNet,
    scenes: &[Scene],
    pool: &[LabeledCrop],
    context: Option<&[Vec<f64>]>,
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<f64>> {
    let mut sampler = BalancedSampler::new(pool, cfg.neg_ratio, cfg.seed)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd, net.params.len(), cfg.lr, cfg.momentum);
    let size = net.crop_size();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.sample(cfg.positives_per_batch);
        let frozen = &*net;
        let results: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|&k| {
                let c = &pool[k];
                let crop = scenes[c.image].image.crop_resize(&c.bbox, size, size);
                let mut g = frozen.params.zeros_like();
                let l = frozen.loss_and_grad(&crop, context.map(|cx| cx[c.image].as_slice()), c.label, &mut g)?;
                Ok((l, g))
            })
            .collect();
        let (loss, grad) = as_divergence(step, reduce(net.params.len(), results))?;
        finish_step(step, loss, grad, cfg.grad_clip, &mut opt, &mut net.params.values)?;
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!("post-classifier step {step}: loss={loss:.4}");
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Trains the context network as a multi-label presence classifier on whole images.
pub fn train_context(net: &mut ContextNet, scenes: &[Scene], num_classes: usize, cfg: &ClassifierTrainConfig) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let size = net.crop_size();
    let images: Vec<Tensor3> = scenes.iter().map(|s| s.image.crop_resize(&BBox::unit(), size, size)).collect();
    let present: Vec<Vec<bool>> = scenes.iter().map(|s| (1..=num_classes).map(|k| s.gts.iter().any(|g| g.class == k)).collect()).collect();
    let mut sampler = EpochSampler::new(scenes.len(), rng::derive_seed(cfg.seed, "context-batches", 0));
    let mut opt = Optimizer::new(OptimizerKind::Sgd, net.params.len(), cfg.lr, cfg.momentum);
    let batch_size = cfg.positives_per_batch * (1 + cfg.neg_ratio);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..batch_size).map(|_| sampler.next_index()).collect();
        let frozen = &*net;
        let results: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = frozen.params.zeros_like();
                let l = frozen.loss_and_grad(&images[i], &present[i], &mut g)?;
                Ok((l, g))
            })
            .collect();
        let (loss, grad) = as_divergence(step, reduce(net.params.len(), results))?;
        finish_step(step, loss, grad, cfg.grad_clip, &mut opt, &mut net.params.values)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Averages per-sample losses and gradients in batch order.
fn reduce(len: usize, results: Vec<Result<(f64, Vec<f64>)>>) -> Result<(f64, Vec<f64>)> {
    let n = results.len().max(1) as f64;
    let mut grad = vec![0.0; len];
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l / n;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / n;
        }
    }
    Ok((loss, grad))
}

fn finish_step(step: usize, loss: f64, mut grad: Vec<f64>, clip: f64, opt: &mut Optimizer, weights: &mut [f64]) -> Result<()> {
    check_finite(step, loss, &grad)?;
    if clip > 0.0 {
        clip_norm(&mut grad, clip);
    }
    opt.step(weights, &grad);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::classifier::{FeatureNetConfig, PostClassifierConfig};
    use crate::nn::proposer::ProposerConfig;
    use crate::priors::{build_grid_priors, GridSpec};
    use crate::synth::{generate_scene, SceneConfig, ShapeKind};

    fn tiny_setup() -> (ProposerNet, PriorSet, Vec<Scene>) {
        let priors = build_grid_priors(&[GridSpec::with_default_templates(4).unwrap(), GridSpec::with_default_templates(2).unwrap()], true).unwrap();
        let cfg = ProposerConfig { input_size: 32, block_channels: [4, 6, 8, 8], reduce_channels: [2, 4, 4], taper_channels: 8, ..Default::default() };
        let net = ProposerNet::new(cfg, &priors).unwrap();
        let sc = SceneConfig { image_size: 32, shapes: vec![ShapeKind::Rectangle], min_size: 0.25, max_objects: 1, ..Default::default() };
        let scenes = (0..20).map(|s| generate_scene(&sc, s).unwrap()).collect();
        (net, priors, scenes)
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (mut net, priors, scenes) = tiny_setup();
        let before = net.params.values.clone();
        let cfg = TrainConfig { steps: 5, batch_size: 2, lr: 0.0, ..Default::default() };
        train_proposer(&mut net, &priors, &scenes, &cfg).unwrap();
        assert!(net.params.values.iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        let (net, priors, scenes) = tiny_setup();
        let cfg = TrainConfig { steps: 6, batch_size: 3, aspect_distortion: 1.4, ..Default::default() };
        let (mut a, mut b) = (net.clone(), net);
        let la = train_proposer(&mut a, &priors, &scenes, &cfg).unwrap();
        let lb = train_proposer(&mut b, &priors, &scenes, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_shape_loss_halves() {
        let (mut net, priors, scenes) = tiny_setup();
        let cfg = TrainConfig { steps: 400, batch_size: 4, ..Default::default() };
        let logs = train_proposer(&mut net, &priors, &scenes, &cfg).unwrap();
        let head: f64 = logs[..10].iter().map(|l| l.f_total).sum::<f64>() / 10.0;
        let tail: f64 = logs[390..].iter().map(|l| l.f_total).sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "initial {head}, final {tail}");
    }

    #[test]
    fn divergence_is_reported() {
        let (mut net, priors, scenes) = tiny_setup();
        net.params.values[0] = f64::NAN;
        let cfg = TrainConfig { steps: 2, batch_size: 1, ..Default::default() };
        assert!(matches!(train_proposer(&mut net, &priors, &scenes, &cfg), Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn loss_csv_header() {
        let mut out = Vec::new();
        write_loss_csv(&mut out, &[StepLog { step: 0, f_conf: 1.0, f_loc: 0.5, f_total: 1.15 }]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,f_conf,f_loc,f_total\n0,1.0,0.5,1.15\n");
    }

    #[test]
    fn crop_labels_at_boundary() {
        let g = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        // area 0.49 inside the unit box: IoU 0.49
        let c = BBox::new(0.0, 0.0, 0.7, 0.7).unwrap();
        assert_eq!(label_crop(&c, &[(g, 2)], 0.5), 0);
        assert_eq!(label_crop(&g, &[(g, 2)], 0.5), 2);
        let half = BBox::new(0.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(label_crop(&half, &[(g, 3)], 0.5), 3);
    }

    #[test]
    fn balanced_batches_hold_ratio() {
        let pool: Vec<LabeledCrop> = (0..50)
            .map(|i| LabeledCrop { image: 0, bbox: BBox::unit(), label: usize::from(i % 5 == 0) })
            .collect();
        let mut s = BalancedSampler::new(&pool, 7, 3).unwrap();
        let (mut pos, mut neg) = (0usize, 0usize);
        for _ in 0..10_000 {
            for k in s.sample(2) {
                if pool[k].label == 0 {
                    neg += 1;
                } else {
                    pos += 1;
                }
            }
        }
        let ratio = neg as f64 / pos as f64;
        assert!((ratio / 7.0 - 1.0).abs() < 0.02, "{ratio}");
        let only_neg = vec![LabeledCrop { image: 0, bbox: BBox::unit(), label: 0 }];
        assert!(BalancedSampler::new(&only_neg, 7, 0).is_err());
    }

    #[test]
    fn two_class_classifier_learns() {
        let sc = SceneConfig { image_size: 32, shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse], min_size: 0.3, max_size: 0.5, max_objects: 2, ..Default::default() };
        let scenes: Vec<Scene> = (0..30).map(|s| generate_scene(&sc, 100 + s).unwrap()).collect();
        let mut net = PostClassifierNet::new(PostClassifierConfig {
            features: FeatureNetConfig { input_size: 16, channels: [6, 8, 12], reduce_channels: [4, 4] },
            context_width: 0,
            num_classes: 2,
            seed: 4,
        })
        .unwrap();
        let cfg = ClassifierTrainConfig { steps: 300, ..Default::default() };
        let pool = build_crop_pool(&scenes, &[], &cfg);
        // fixed balanced evaluation batches, independent of the training sampler
        let mut eval_sampler = BalancedSampler::new(&pool, cfg.neg_ratio, 999).unwrap();
        let eval: Vec<usize> = (0..40).flat_map(|_| eval_sampler.sample(cfg.positives_per_batch)).collect();
        let eval_loss = |net: &PostClassifierNet| {
            let mut g = net.params.zeros_like();
            eval.iter()
                .map(|&k| {
                    let c = &pool[k];
                    let crop = scenes[c.image].image.crop_resize(&c.bbox, 16, 16);
                    net.loss_and_grad(&crop, None, c.label, &mut g).unwrap()
                })
                .sum::<f64>()
                / eval.len() as f64
        };
        let before = eval_loss(&net);
        train_postclassifier(&mut net, &scenes, &pool, None, &cfg).unwrap();
        let after = eval_loss(&net);
        assert!(after * 2.0 <= before, "initial {before}, final {after}");
    }
}
