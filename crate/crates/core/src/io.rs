//! File formats: JSONL box records (one image per line), PNG images, and the
//! dataset directory layout (`images/<id>.png` plus `gt.jsonl`).

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::inference::Detection;
use crate::nn::Tensor3;
use crate::synth::{GtBox, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl BoxRecord {
    fn plain(b: &BBox) -> Self {
        BoxRecord { xmin: b.xmin, ymin: b.ymin, xmax: b.xmax, ymax: b.ymax, score: None, class: None, class_scores: None, label: None }
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.xmin, self.ymin, self.xmax, self.ymax)
    }

    fn finite_score(&self) -> Result<f64> {
        match self.score {
            Some(s) if s.is_finite() => Ok(s),
            Some(s) => Err(Error::Format(format!("non-finite score {s}"))),
            None => Err(Error::Format("box record has no score".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub boxes: Vec<BoxRecord>,
}

impl ImageRecord {
    pub fn from_gts(image_id: &str, gts: &[GtBox]) -> Self {
        let boxes = gts.iter().map(|g| BoxRecord { class: Some(g.class), ..BoxRecord::plain(&g.bbox) }).collect();
        ImageRecord { image_id: image_id.to_string(), boxes }
    }

    pub fn from_proposals(image_id: &str, props: &[ScoredBox]) -> Self {
        let boxes = props.iter().map(|p| BoxRecord { score: Some(p.score), ..BoxRecord::plain(&p.bbox) }).collect();
        ImageRecord { image_id: image_id.to_string(), boxes }
    }

    pub fn from_detections(image_id: &str, dets: &[Detection]) -> Self {
        let boxes = dets
            .iter()
            .map(|d| BoxRecord { score: Some(d.confidence), class_scores: Some(d.class_scores.clone()), label: d.label, ..BoxRecord::plain(&d.bbox) })
            .collect();
        ImageRecord { image_id: image_id.to_string(), boxes }
    }

    /// Ground truths; a record without a class counts as class 1.
    pub fn to_gts(&self) -> Result<Vec<GtBox>> {
        self.boxes.iter().map(|b| Ok(GtBox { bbox: b.bbox()?, class: b.class.unwrap_or(1) })).collect()
    }

    pub fn to_proposals(&self) -> Result<Vec<ScoredBox>> {
        self.boxes.iter().map(|b| Ok(ScoredBox::new(b.bbox()?, b.finite_score()?))).collect()
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>> {
        self.boxes
            .iter()
            .map(|b| {
                let class_scores = b.class_scores.clone().ok_or_else(|| Error::Format("detection record has no class_scores".into()))?;
                if class_scores.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format("non-finite class score".into()));
                }
                Ok(Detection { bbox: b.bbox()?, confidence: b.finite_score()?, class_scores, label: b.label, source: String::new() })
            })
            .collect()
    }
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        for b in &rec.boxes {
            b.bbox().map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl_file(path: &Path) -> Result<Vec<ImageRecord>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[ImageRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_file(path: &Path, records: &[ImageRecord]) -> Result<()> {
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(path)?), records)
}

/// Saves an RGB tensor with values in [0,1] as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Tensor3) -> Result<()> {
    if img.c != 3 {
        return Err(Error::Shape(format!("PNG export needs 3 channels, got {}", img.c)));
    }
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.w as u32, img.h as u32, bytes).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor3> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor3::from_vec(h, w, 3, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

/// Writes `images/<id>.png` for every scene and the ground truth index `gt.jsonl`.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let id = image_id(i);
        save_png(&dir.join("images").join(format!("{id}.png")), &s.image)?;
        records.push(ImageRecord::from_gts(&id, &s.gts));
    }
    write_jsonl_file(&dir.join("gt.jsonl"), &records)
}

/// Reads a dataset directory; scene order follows `gt.jsonl`.
pub fn read_dataset(dir: &Path) -> Result<(Vec<String>, Vec<Scene>)> {
    let records = read_jsonl_file(&dir.join("gt.jsonl"))?;
    let mut ids = Vec::with_capacity(records.len());
    let mut scenes = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let image = load_png(&dir.join("images").join(format!("{}.png", r.image_id)))?;
        scenes.push(Scene { image, gts: r.to_gts()?, seed: i as u64 });
        ids.push(r.image_id.clone());
    }
    Ok((ids, scenes))
}

/// Aligns per-image records to the dataset's image ids; missing images get no boxes.
pub fn align_records(ids: &[String], records: &[ImageRecord]) -> Result<Vec<ImageRecord>> {
    let mut map = std::collections::BTreeMap::new();
    for r in records {
        if map.insert(r.image_id.as_str(), r).is_some() {
            return Err(Error::Format(format!("duplicate image_id {}", r.image_id)));
        }
    }
    Ok(ids.iter().map(|id| map.get(id.as_str()).map_or_else(|| ImageRecord { image_id: id.clone(), boxes: vec![] }, |r| (*r).clone())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    #[test]
    fn jsonl_round_trip() {
        let gts = vec![GtBox { bbox: BBox::new(0.1, 0.2, 0.3, 0.4).unwrap(), class: 2 }];
        let props = vec![ScoredBox::new(BBox::new(0.0, 0.0, 0.5, 0.5).unwrap(), 0.25)];
        let recs = vec![ImageRecord::from_gts("a", &gts), ImageRecord::from_proposals("b", &props)];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"image_id":"a","boxes":[{"xmin":0.1,"ymin":0.2,"xmax":0.3,"ymax":0.4,"class":2}]}"#);
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].to_gts().unwrap(), gts);
        assert_eq!(back[1].to_proposals().unwrap(), props);
    }

    #[test]
    fn rejects_bad_records() {
        for bad in [
            r#"{"image_id":"a","boxes":[{"xmin":0.5,"ymin":0,"xmax":0.1,"ymax":1}]}"#,
            r#"{"image_id":"a"}"#,
            r#"{"image_id":"a","boxes":[],"extra":1}"#,
            "not json",
        ] {
            assert!(read_jsonl(bad.as_bytes()).unwrap_err().is_format(), "{bad}");
        }
        let no_score = read_jsonl(r#"{"image_id":"a","boxes":[{"xmin":0,"ymin":0,"xmax":1,"ymax":1}]}"#.as_bytes()).unwrap();
        assert!(no_score[0].to_proposals().unwrap_err().is_format());
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(&SceneConfig::default(), s).unwrap()).collect();
        write_dataset(dir.path(), &scenes).unwrap();
        let (ids, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(ids, vec!["000000", "000001", "000002"]);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.gts, b.gts);
        }
    }

    #[test]
    fn alignment_fills_missing() {
        let recs = vec![ImageRecord { image_id: "b".into(), boxes: vec![] }];
        let out = align_records(&["a".into(), "b".into()], &recs).unwrap();
        assert_eq!(out[0].image_id, "a");
        assert!(align_records(&["a".into()], &[recs[0].clone(), recs[0].clone()]).is_err());
    }
}
