//! Procedural scenes: solid shapes over a noisy background with exact boxes,
//! label dropping, and geometric augmentation (aspect stretch, size jitter).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::Tensor3;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle];

    /// Class id; 0 is reserved for background.
    pub fn class_id(self) -> usize {
        match self {
            ShapeKind::Rectangle => 1,
            ShapeKind::Ellipse => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Geometric-mean side of an object, as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Width/height ratios are drawn log-uniformly from `[1/max_aspect, max_aspect]`.
    pub max_aspect: f64,
    /// Half-width of the uniform background noise, in [0,1] intensity units.
    pub noise: f64,
    /// Maximum IoU between any two objects of a scene.
    pub max_overlap: f64,
    /// Relative bound of the random size jitter used as augmentation.
    pub size_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            shapes: ShapeKind::ALL.to_vec(),
            min_size: 0.12,
            max_size: 0.45,
            max_aspect: 2.0,
            noise: 0.1,
            max_overlap: 0.3,
            size_jitter: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.image_size < 4 {
            return bad("image size must be at least 4");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.shapes.is_empty() {
            return bad("no shape classes configured");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size < 1.0) {
            return bad("size bounds must satisfy 0 < min <= max < 1");
        }
        if !(self.max_aspect >= 1.0) || !(0.0..=0.5).contains(&self.noise) {
            return bad("max_aspect must be >= 1 and noise within [0, 0.5]");
        }
        if !(0.0..1.0).contains(&self.size_jitter) || !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("size_jitter must be in [0,1) and max_overlap in [0,1]");
        }
        Ok(())
    }
}

/// One placed shape, in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub color: [u8; 3],
}

impl Shape {
    pub fn extent(&self) -> BBox {
        BBox { xmin: self.cx - self.w / 2.0, ymin: self.cy - self.h / 2.0, xmax: self.cx + self.w / 2.0, ymax: self.cy + self.h / 2.0 }
    }

    /// Point membership; triangles point up with their base at the bottom edge.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= hw && dy.abs() <= hh,
            ShapeKind::Ellipse => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            ShapeKind::Triangle => dy.abs() <= hh && dx.abs() <= hw * (dy + hh) / self.h,
        }
    }

    /// Row-major pixel mask; a pixel is set when any of its 4x4 sub-samples is inside,
    /// so thin triangle apexes are not lost.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        const SUB: usize = 4;
        let s = (size * SUB) as f64;
        (0..size * size)
            .map(|i| {
                let (px, py) = (i % size, i / size);
                (0..SUB * SUB).any(|k| {
                    let x = ((px * SUB + k % SUB) as f64 + 0.5) / s;
                    let y = ((py * SUB + k / SUB) as f64 + 0.5) / s;
                    self.contains(x, y)
                })
            })
            .collect()
    }
}

/// Tight normalized bounds of the set pixels of a row-major mask.
pub fn mask_bounds(mask: &[bool], width: usize, height: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x0 != usize::MAX).then(|| BBox {
        xmin: x0 as f64 / width as f64,
        ymin: y0 as f64 / height as f64,
        xmax: (x1 + 1) as f64 / width as f64,
        ymax: (y1 + 1) as f64 / height as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Tensor3,
    pub gts: Vec<GtBox>,
    pub seed: u64,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gts.iter().map(|g| g.bbox).collect()
    }
}

fn sample_color(rng: &mut impl Rng, background: f64) -> [u8; 3] {
    loop {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        if c.iter().map(|v| (v - background).abs()).fold(0.0, f64::max) >= 0.35 {
            return c.map(|v| (v * 255.0).round() as u8);
        }
    }
}

/// Background level and the shapes of a scene, drawn largest first.
pub fn render_layout(cfg: &SceneConfig, seed: u64) -> Result<(f64, Vec<Shape>)> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "scene-layout", 0);
    let background = r.gen_range(0.25..0.75);
    let count = r.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidConfig(format!("cannot place {count} objects under the overlap cap")));
        }
        let side = r.gen_range(cfg.min_size..=cfg.max_size);
        let aspect = r.gen_range(-cfg.max_aspect.ln()..=cfg.max_aspect.ln()).exp();
        let w = (side * aspect.sqrt()).min(0.95);
        let h = (side / aspect.sqrt()).min(0.95);
        let cx = r.gen_range(w / 2.0..=1.0 - w / 2.0);
        let cy = r.gen_range(h / 2.0..=1.0 - h / 2.0);
        let kind = cfg.shapes[r.gen_range(0..cfg.shapes.len())];
        let color = sample_color(&mut r, background);
        let s = Shape { kind, cx, cy, w, h, color };
        if shapes.iter().any(|o| iou(&o.extent(), &s.extent()) > cfg.max_overlap) {
            continue;
        }
        shapes.push(s);
    }
    shapes.sort_by(|a, b| (b.w * b.h).total_cmp(&(a.w * a.h)));
    Ok((background, shapes))
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    let (background, shapes) = render_layout(cfg, seed)?;
    let n = cfg.image_size;
    let mut noise = rng::stream(seed, "scene-noise", 0);
    let mut pixels: Vec<u8> = (0..n * n * 3)
        .map(|_| ((background + noise.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut gts = Vec::with_capacity(shapes.len());
    for s in &shapes {
        let mask = s.mask(n);
        let Some(bbox) = mask_bounds(&mask, n, n) else { continue };
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            pixels[3 * i..3 * i + 3].copy_from_slice(&s.color);
        }
        gts.push(GtBox { bbox, class: s.kind.class_id() });
    }
    let data = pixels.into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Scene { image: Tensor3::from_vec(n, n, 3, data)?, gts, seed })
}

pub fn drop_labels(gts: &[GtBox], rate: f64, seed: u64) -> Vec<GtBox> {
    let mut r = rng::stream(seed, "drop-labels", 0);
    gts.iter().filter(|_| r.gen::<f64>() >= rate).copied().collect()
}

/// Scales the image about its center by `(sx, sy)`, keeping the original frame.
/// Samples falling outside the source take the mean border color.
pub fn warp_scene(scene: &Scene, sx: f64, sy: f64) -> Scene {
    let img = &scene.image;
    let (h, w, c) = img.dims();
    let mut fill = vec![0.0; c];
    let mut border = 0;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                for (f, v) in fill.iter_mut().zip(img.pixel(y, x)) {
                    *f += v;
                }
                border += 1;
            }
        }
    }
    fill.iter_mut().for_each(|f| *f /= border as f64);

    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        let v = 0.5 + ((y as f64 + 0.5) / h as f64 - 0.5) / sy;
        for x in 0..w {
            let u = 0.5 + ((x as f64 + 0.5) / w as f64 - 0.5) / sx;
            let px = out.pixel_mut(y, x);
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                px.copy_from_slice(&fill);
                continue;
            }
            let fx = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let fy = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..c {
                let top = img.at(y0, x0, ch) * (1.0 - ax) + img.at(y0, x1, ch) * ax;
                let bot = img.at(y1, x0, ch) * (1.0 - ax) + img.at(y1, x1, ch) * ax;
                px[ch] = top * (1.0 - ay) + bot * ay;
            }
        }
    }
    let (min_w, min_h) = (1.0 / w as f64, 1.0 / h as f64);
    let gts = scene
        .gts
        .iter()
        .filter_map(|g| {
            let b = g.bbox;
            let mapped = BBox {
                xmin: 0.5 + (b.xmin - 0.5) * sx,
                ymin: 0.5 + (b.ymin - 0.5) * sy,
                xmax: 0.5 + (b.xmax - 0.5) * sx,
                ymax: 0.5 + (b.ymax - 0.5) * sy,
            }
            .clip_unit();
            (mapped.width() >= min_w && mapped.height() >= min_h).then_some(GtBox { bbox: mapped, class: g.class })
        })
        .collect();
    Scene { image: out, gts, seed: scene.seed }
}

/// Draws the stretch factor in `[1, max_factor]` and the axis (true = horizontal).
pub fn sample_aspect_distortion(max_factor: f64, seed: u64) -> (f64, bool) {
    let mut r = rng::stream(seed, "distort-aspect", 0);
    let f = if max_factor > 1.0 { r.gen_range(1.0..=max_factor) } else { 1.0 };
    (f, r.gen())
}

/// Stretches the scene along one random axis by a factor up to `max_factor`.
pub fn distort_aspect(scene: &Scene, max_factor: f64, seed: u64) -> Result<Scene> {
    if !(max_factor >= 1.0) {
        return Err(Error::InvalidConfig(format!("aspect distortion factor {max_factor} < 1")));
    }
    let (f, horizontal) = sample_aspect_distortion(max_factor, seed);
    Ok(if horizontal { warp_scene(scene, f, 1.0) } else { warp_scene(scene, 1.0, f) })
}

/// Uniform zoom by a factor drawn from `[1 - jitter, 1 + jitter]`.
pub fn jitter_scale(scene: &Scene, jitter: f64, seed: u64) -> Scene {
    let mut r = rng::stream(seed, "size-jitter", 0);
    let s = if jitter > 0.0 { r.gen_range(1.0 - jitter..=1.0 + jitter) } else { 1.0 };
    warp_scene(scene, s, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_scene(&cfg(), 11).unwrap();
        let b = generate_scene(&cfg(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_scene(&cfg(), 12).unwrap().image);
    }

    #[test]
    fn object_count_in_range() {
        let c = cfg();
        for seed in 0..1000 {
            let (_, shapes) = render_layout(&c, seed).unwrap();
            assert!((c.min_objects..=c.max_objects).contains(&shapes.len()));
            for (i, a) in shapes.iter().enumerate() {
                for b in &shapes[i + 1..] {
                    assert!(iou(&a.extent(), &b.extent()) <= c.max_overlap);
                }
            }
        }
    }

    /// Bounds from 16x supersampled analytic membership, independent of the renderer's mask.
    fn supersampled_bounds(s: &Shape, n: usize) -> BBox {
        let k = 16 * n;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for j in 0..k {
            for i in 0..k {
                let (x, y) = ((i as f64 + 0.5) / k as f64, (j as f64 + 0.5) / k as f64);
                if s.contains(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        BBox { xmin: x0, ymin: y0, xmax: x1, ymax: y1 }
    }

    #[test]
    fn gt_boxes_tightly_bound_shapes() {
        let c = cfg();
        let px = 1.0 / c.image_size as f64;
        for seed in 0..200 {
            let scene = generate_scene(&c, seed).unwrap();
            let (_, shapes) = render_layout(&c, seed).unwrap();
            assert_eq!(scene.gts.len(), shapes.len());
            for (g, s) in scene.gts.iter().zip(&shapes) {
                let oracle = supersampled_bounds(s, c.image_size);
                for (a, b) in g.bbox.coords().iter().zip(oracle.coords()) {
                    assert!((a - b).abs() <= px + 1e-9, "seed {seed}: {:?} vs {:?}", g.bbox, oracle);
                }
                assert_eq!(g.class, s.kind.class_id());
                assert!(BBox::unit().contains(&g.bbox));
            }
        }
    }

    #[test]
    fn drop_rates() {
        let scene = generate_scene(&cfg(), 1).unwrap();
        assert_eq!(drop_labels(&scene.gts, 0.0, 3), scene.gts);
        assert!(drop_labels(&scene.gts, 1.0, 3).is_empty());
        let many: Vec<GtBox> = (0..10_000).map(|_| scene.gts[0]).collect();
        let kept = drop_labels(&many, 0.3, 9).len();
        let dropped = 1.0 - kept as f64 / 10_000.0;
        assert!((dropped - 0.3).abs() <= 0.01, "{dropped}");
    }

    #[test]
    fn drop_labels_leaves_pixels() {
        let scene = generate_scene(&cfg(), 5).unwrap();
        let before = scene.image.clone();
        let _ = drop_labels(&scene.gts, 0.5, 1);
        assert_eq!(scene.image, before);
    }

    #[test]
    fn unit_factor_is_identity() {
        let scene = generate_scene(&cfg(), 2).unwrap();
        assert_eq!(distort_aspect(&scene, 1.0, 4).unwrap(), scene);
        assert_eq!(jitter_scale(&scene, 0.0, 4), scene);
        assert!(distort_aspect(&scene, 0.9, 4).is_err());
    }

    #[test]
    fn factors_bounded() {
        for seed in 0..2000 {
            let (f, _) = sample_aspect_distortion(1.4, seed);
            assert!((1.0..=1.4).contains(&f));
        }
    }

    #[test]
    fn distorted_boxes_bound_distorted_shapes() {
        let c = cfg();
        let n = c.image_size;
        let px = 1.0 / n as f64;
        for seed in 0..100 {
            let scene = generate_scene(&c, seed).unwrap();
            let (_, shapes) = render_layout(&c, seed).unwrap();
            let (f, horizontal) = sample_aspect_distortion(1.4, seed + 500);
            let (sx, sy) = if horizontal { (f, 1.0) } else { (1.0, f) };
            let out = distort_aspect(&scene, 1.4, seed + 500).unwrap();
            let mut kept = 0;
            for s in &shapes {
                // nearest-pixel pullback of the rendered mask through the inverse map
                let src = s.mask(n);
                let warped: Vec<bool> = (0..n * n)
                    .map(|i| {
                        let u = 0.5 + (((i % n) as f64 + 0.5) / n as f64 - 0.5) / sx;
                        let v = 0.5 + (((i / n) as f64 + 0.5) / n as f64 - 0.5) / sy;
                        let (x, y) = ((u * n as f64) as usize, (v * n as f64) as usize);
                        src[y.min(n - 1) * n + x.min(n - 1)]
                    })
                    .collect();
                let Some(expect) = mask_bounds(&warped, n, n) else { continue };
                let g = out.gts.iter().find(|g| (0..4).all(|k| (g.bbox.coords()[k] - expect.coords()[k]).abs() <= px + 1e-9));
                assert!(g.is_some(), "seed {seed}: no box near {expect:?} in {:?}", out.gts);
                kept += 1;
            }
            assert!(kept >= out.gts.len());
        }
    }

    #[test]
    fn distortion_preserves_containment() {
        let outer = BBox::new(0.1, 0.2, 0.7, 0.9).unwrap();
        let inner = BBox::new(0.2, 0.3, 0.5, 0.6).unwrap();
        let scene = Scene {
            image: Tensor3::zeros(16, 16, 3),
            gts: vec![GtBox { bbox: outer, class: 1 }, GtBox { bbox: inner, class: 2 }],
            seed: 0,
        };
        for seed in 0..50 {
            let out = distort_aspect(&scene, 1.4, seed).unwrap();
            assert!(out.gts[0].bbox.contains(&out.gts[1].bbox));
        }
    }
}
