//! File-to-file stages of the full pipeline, shared by the command-line tool and
//! the end-to-end tests. Every stage is a pure function of its inputs and the run
//! configuration, so repeated runs write byte-identical files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{EvalConfig, PriorConfig, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{average_precision, class_aps, mean_ap, recall_table, sweep_budget, sweep_svg, write_recall_csv, write_sweep_csv, EvalReport, SweepPoint};
use crate::geometry::{BBox, ScoredBox};
use crate::inference::{classify_detections, context_crops, ensemble_multibox, multi_crop_propose, select_topk, single_crop_propose, CropConfig, Detection};
use crate::io::{align_records, read_dataset, read_jsonl_file, write_dataset, write_jsonl_file, ImageRecord};
use crate::nn::checkpoint::ClassifierBundle;
use crate::nn::classifier::{ContextNet, PostClassifierNet};
use crate::nn::train::{build_crop_pool, scene_context_features, train_context, train_postclassifier, train_proposer, write_loss_csv, StepLog};
use crate::nn::ProposerNet;
use crate::priors::{coverage, PriorSet};
use crate::rng::derive_seed;
use crate::synth::{generate_scene, GtBox, Scene, SceneConfig};

/// Renders `count` scenes into `dir` (`images/*.png` plus `gt.jsonl`).
pub fn synth_dataset(dir: &Path, count: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let scenes = (0..count as u64).into_par_iter().map(|i| generate_scene(cfg, derive_seed(seed, "scene", i))).collect::<Result<Vec<_>>>()?;
    write_dataset(dir, &scenes)?;
    Ok(scenes)
}

/// Builds the prior set, writes it as JSON if `out` is given, and optionally a
/// `threshold,coverage` CSV against `gts`.
pub fn priors_stage(cfg: &PriorConfig, out: Option<&Path>, coverage_out: Option<(&Path, &[BBox])>) -> Result<PriorSet> {
    let priors = cfg.build()?;
    if let Some(p) = out {
        std::fs::write(p, priors.to_json()?)?;
    }
    if let Some((path, gts)) = coverage_out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "coverage"])?;
        for t in [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
            w.write_record([format!("{t}"), format!("{}", coverage(&priors.priors, gts, t)?)])?;
        }
        w.flush()?;
    }
    Ok(priors)
}

/// Trains a proposer on a dataset directory and writes its checkpoint, the run
/// configuration as JSON next to it, and optionally the loss CSV.
pub fn train_stage(data: &Path, cfg: &RunConfig, checkpoint: &Path, loss_csv: Option<&Path>) -> Result<Vec<StepLog>> {
    let (_, scenes) = read_dataset(data)?;
    let priors = cfg.priors.build()?;
    let mut net = ProposerNet::new(cfg.proposer.clone(), &priors)?;
    let logs = train_proposer(&mut net, &priors, &scenes, &cfg.train)?;
    net.save(checkpoint)?;
    std::fs::write(config_path(checkpoint), cfg.to_json()?)?;
    if let Some(p) = loss_csv {
        write_loss_csv(std::fs::File::create(p)?, &logs)?;
    }
    Ok(logs)
}

/// Path of the JSON configuration written beside a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Proposals for every dataset image: single-crop when `crops` is `None`, else
/// multi-crop. Keeps the `top_k` best per image (0 keeps all) and writes JSONL.
pub fn propose_stage(checkpoint: &Path, data: &Path, out: &Path, crops: Option<&CropConfig>, nms: f64, top_k: usize) -> Result<Vec<Vec<ScoredBox>>> {
    let (net, priors) = ProposerNet::load(checkpoint)?;
    let (ids, scenes) = read_dataset(data)?;
    let mut all = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let props = match crops {
            Some(c) => multi_crop_propose(&net, &priors, &s.image, c)?,
            None => single_crop_propose(&net, &priors, &s.image, nms)?,
        };
        all.push(if top_k > 0 { select_topk(&props, top_k) } else { props });
    }
    let records: Vec<ImageRecord> = ids.iter().zip(&all).map(|(id, p)| ImageRecord::from_proposals(id, p)).collect();
    write_jsonl_file(out, &records)?;
    Ok(all)
}

fn read_aligned(path: &Path, ids: &[String]) -> Result<Vec<ImageRecord>> {
    align_records(ids, &read_jsonl_file(path)?)
}

/// Trains the context network, then the post-classifier on crops pooled from the
/// ground truth and (if given) a proposal file; writes both as one bundle.
pub fn train_classifier_stage(data: &Path, proposals: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<ClassifierBundle> {
    let (ids, scenes) = read_dataset(data)?;
    let mut context = ContextNet::new(cfg.context.clone())?;
    if cfg.classifier.context_width != context.feature_width() {
        return Err(Error::InvalidConfig(format!(
            "classifier context_width {} does not match the context network's {} features",
            cfg.classifier.context_width,
            context.feature_width()
        )));
    }
    train_context(&mut context, &scenes, cfg.context.num_classes, &cfg.classifier_train)?;
    let features = scene_context_features(&context, &scenes)?;
    let boxes: Vec<Vec<BBox>> = match proposals {
        Some(p) => read_aligned(p, &ids)?.iter().map(|r| r.to_proposals().map(|ps| ps.into_iter().map(|s| s.bbox).collect())).collect::<Result<_>>()?,
        None => vec![],
    };
    let pool = build_crop_pool(&scenes, &boxes, &cfg.classifier_train);
    let mut classifier = PostClassifierNet::new(cfg.classifier.clone())?;
    train_postclassifier(&mut classifier, &scenes, &pool, Some(&features), &cfg.classifier_train)?;
    let bundle = ClassifierBundle { classifier, context };
    bundle.save(out)?;
    Ok(bundle)
}

/// Post-classifies every proposal; with `use_context` the combiner is averaged over
/// the context crops, otherwise it sees absent (zero) context.
pub fn classify_stage(bundle: &Path, data: &Path, proposals: &Path, out: &Path, use_context: bool) -> Result<Vec<Vec<Detection>>> {
    let b = ClassifierBundle::load(bundle)?;
    let (ids, scenes) = read_dataset(data)?;
    let records = read_aligned(proposals, &ids)?;
    let crops = context_crops();
    let mut all = Vec::with_capacity(scenes.len());
    for (s, r) in scenes.iter().zip(&records) {
        let ctx = use_context.then_some(&b.context);
        all.push(classify_detections(&b.classifier, ctx, &s.image, &r.to_proposals()?, &crops)?);
    }
    let out_records: Vec<ImageRecord> = ids.iter().zip(&all).map(|(id, d)| ImageRecord::from_detections(id, d)).collect();
    write_jsonl_file(out, &out_records)?;
    Ok(all)
}

/// Ensembles detection files image by image; image order follows the first file.
pub fn ensemble_stage(inputs: &[PathBuf], out: &Path, num_classes: usize, nms: f64) -> Result<Vec<Vec<Detection>>> {
    let first = inputs.first().ok_or_else(|| Error::InvalidConfig("ensembling needs at least one input".into()))?;
    let ids: Vec<String> = read_jsonl_file(first)?.into_iter().map(|r| r.image_id).collect();
    let models = inputs.iter().map(|p| read_aligned(p, &ids)).collect::<Result<Vec<_>>>()?;
    let mut all = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let per_model = models.iter().map(|m| m[i].to_detections()).collect::<Result<Vec<_>>>()?;
        all.push(ensemble_multibox(&per_model, num_classes, nms)?);
    }
    let records: Vec<ImageRecord> = ids.iter().zip(&all).map(|(id, d)| ImageRecord::from_detections(id, d)).collect();
    write_jsonl_file(out, &records)?;
    Ok(all)
}

fn digest_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Ground truths and predictions aligned by the ground truth's image order.
pub fn load_eval_inputs(gt: &Path, predictions: &Path) -> Result<(Vec<Vec<GtBox>>, Vec<ImageRecord>)> {
    let gt_records = read_jsonl_file(gt)?;
    let ids: Vec<String> = gt_records.iter().map(|r| r.image_id.clone()).collect();
    let gts = gt_records.iter().map(ImageRecord::to_gts).collect::<Result<Vec<_>>>()?;
    Ok((gts, read_aligned(predictions, &ids)?))
}

/// Evaluates a proposal or detection file against ground truth. Detection files
/// (boxes with `class_scores`) also get per-class AP and mAP. Writes the report as
/// JSON and the recall table as CSV.
pub fn eval_stage(gt: &Path, predictions: &Path, cfg: &EvalConfig, num_classes: usize, report_json: &Path, recall_csv: &Path) -> Result<EvalReport> {
    let (gts, records) = load_eval_inputs(gt, predictions)?;
    let is_detection = records.iter().flat_map(|r| &r.boxes).any(|b| b.class_scores.is_some());
    let (props, ap) = if is_detection {
        let dets = records.iter().map(ImageRecord::to_detections).collect::<Result<Vec<_>>>()?;
        let props = dets.iter().map(|d| d.iter().map(|x| ScoredBox::new(x.bbox, x.confidence)).collect()).collect();
        (props, class_aps(&dets, &gts, num_classes, 0.5))
    } else {
        (records.iter().map(ImageRecord::to_proposals).collect::<Result<Vec<_>>>()?, vec![])
    };
    let recall = recall_table(&props, &gts, &cfg.thresholds, &cfg.cutoffs)?;
    let boxes: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|b| b.bbox).collect()).collect();
    let report = EvalReport {
        recall,
        map: mean_ap(&ap),
        ap,
        agnostic_ap: average_precision(&props, &boxes, 0.5),
        fingerprint: digest_files(&[gt, predictions])?,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(report_json, json)?;
    write_recall_csv(std::fs::File::create(recall_csv)?, &report.recall)?;
    Ok(report)
}

/// Recall and AP at IoU `t` against the per-image proposal budget; writes CSV and
/// optionally an SVG plot.
pub fn sweep_stage(gt: &Path, proposals: &Path, ks: &[usize], t: f64, csv_out: &Path, svg_out: Option<&Path>) -> Result<Vec<SweepPoint>> {
    let (gts, records) = load_eval_inputs(gt, proposals)?;
    let props = records.iter().map(ImageRecord::to_proposals).collect::<Result<Vec<_>>>()?;
    let boxes: Vec<Vec<BBox>> = gts.iter().map(|g| g.iter().map(|b| b.bbox).collect()).collect();
    let points = sweep_budget(&props, &boxes, ks, t)?;
    write_sweep_csv(std::fs::File::create(csv_out)?, &points)?;
    if let Some(p) = svg_out {
        std::fs::write(p, sweep_svg(&points))?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.priors = PriorConfig { grids: vec![4, 2], templates: 3, include_global: true };
        cfg.proposer.block_channels = [2, 2, 3, 3];
        cfg.proposer.reduce_channels = [1, 1, 1];
        cfg.proposer.taper_channels = 3;
        cfg.train.steps = 3;
        cfg.train.batch_size = 2;
        cfg.classifier_train.steps = 3;
        cfg.reseed(5);
        cfg
    }

    #[test]
    fn stages_chain_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = |n: &str| dir.path().join(n);
        let cfg = tiny_config();
        synth_dataset(&d("data"), 4, &cfg.scene, 1).unwrap();
        let logs = train_stage(&d("data"), &cfg, &d("p.ckpt"), Some(&d("loss.csv"))).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(config_path(&d("p.ckpt")).exists());
        let props = propose_stage(&d("p.ckpt"), &d("data"), &d("props.jsonl"), None, 0.85, 5).unwrap();
        assert!(props.iter().all(|p| p.len() <= 5));
        train_classifier_stage(&d("data"), Some(&d("props.jsonl")), &cfg, &d("c.bundle")).unwrap();
        classify_stage(&d("c.bundle"), &d("data"), &d("props.jsonl"), &d("dets.jsonl"), true).unwrap();
        let ens = ensemble_stage(&[d("dets.jsonl"), d("dets.jsonl")], &d("ens.jsonl"), 3, 0.5).unwrap();
        assert_eq!(ens.len(), 4);
        let r = eval_stage(&d("data/gt.jsonl"), &d("dets.jsonl"), &cfg.eval, 3, &d("report.json"), &d("recall.csv")).unwrap();
        assert_eq!(r.ap.len(), 3);
        let r = eval_stage(&d("data/gt.jsonl"), &d("props.jsonl"), &cfg.eval, 3, &d("report2.json"), &d("recall2.csv")).unwrap();
        assert!(r.ap.is_empty() && r.map.is_none());
        let pts = sweep_stage(&d("data/gt.jsonl"), &d("props.jsonl"), &[1, 5], 0.5, &d("sweep.csv"), Some(&d("sweep.svg"))).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(std::fs::read_to_string(d("sweep.svg")).unwrap().starts_with("<svg"));
    }

    #[test]
    fn mismatched_context_width_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.classifier.context_width = 7;
        synth_dataset(&dir.path().join("data"), 2, &cfg.scene, 1).unwrap();
        let e = train_classifier_stage(&dir.path().join("data"), None, &cfg, &dir.path().join("b")).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig(_)));
    }
}
