//! Prior (anchor) boxes: regular multi-scale grids of template shapes, the
//! k-means baseline, coverage at an IoU threshold, and greedy template selection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng;

/// Template shape, centered on a grid point before displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateBox {
    pub width: f64,
    pub height: f64,
}

impl TemplateBox {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidConfig(format!("template {width}x{height} must have positive extent")));
        }
        Ok(TemplateBox { width, height })
    }

    /// Template of a given side length (geometric mean of the extents) and aspect (width / height).
    pub fn with_aspect(side: f64, aspect: f64) -> Self {
        let r = aspect.sqrt();
        TemplateBox { width: side * r, height: side / r }
    }
}

/// An `m x m` grid of template placements with pitch `1 / (m + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub m: usize,
    pub templates: Vec<TemplateBox>,
}

pub const DEFAULT_ASPECTS: [f64; 7] = [1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0, 1.5, 2.0, 3.0];
pub const DEFAULT_SCALES: [f64; 4] = [0.5, 1.5, 2.0, 3.0];
/// Grid resolutions of the multi-scale head configuration.
pub const DEFAULT_GRIDS: [usize; 5] = [8, 6, 4, 3, 2];

impl GridSpec {
    pub fn new(m: usize, templates: Vec<TemplateBox>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidConfig("grid resolution must be positive".into()));
        }
        for t in &templates {
            TemplateBox::new(t.width, t.height)?;
        }
        Ok(GridSpec { m, templates })
    }

    /// Eleven default templates: seven aspect ratios at the base side `1.5 * delta`,
    /// plus square templates at 0.5x, 1.5x, 2x and 3x that side.
    pub fn with_default_templates(m: usize) -> Result<Self> {
        let base = 1.5 * grid_delta(m);
        let mut templates: Vec<TemplateBox> =
            DEFAULT_ASPECTS.iter().map(|&a| TemplateBox::with_aspect(base, a)).collect();
        templates.extend(DEFAULT_SCALES.iter().map(|&s| TemplateBox::with_aspect(base * s, 1.0)));
        GridSpec::new(m, templates)
    }

    /// Same as [`GridSpec::with_default_templates`] truncated or limited to `count` templates.
    pub fn with_template_count(m: usize, count: usize) -> Result<Self> {
        let mut g = GridSpec::with_default_templates(m)?;
        if count > g.templates.len() {
            return Err(Error::InvalidConfig(format!(
                "at most {} default templates per grid, asked for {count}",
                g.templates.len()
            )));
        }
        g.templates.truncate(count);
        Ok(g)
    }

    pub fn delta(&self) -> f64 {
        grid_delta(self.m)
    }

    /// Grid point for `(row, col)`, both zero-based.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let d = self.delta();
        ((col + 1) as f64 * d, (row + 1) as f64 * d)
    }

    pub fn slot_count(&self) -> usize {
        self.m * self.m * self.templates.len()
    }
}

pub fn grid_delta(m: usize) -> f64 {
    1.0 / (m as f64 + 1.0)
}

fn place(t: &TemplateBox, cx: f64, cy: f64) -> BBox {
    BBox {
        xmin: cx - t.width / 2.0,
        ymin: cy - t.height / 2.0,
        xmax: cx + t.width / 2.0,
        ymax: cy + t.height / 2.0,
    }
    .clip_unit()
}

/// Where a prior slot came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSource {
    Grid { grid: usize, m: usize, row: usize, col: usize, template: usize },
    Global,
    Cluster { index: usize },
}

/// Configuration a prior set was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorOrigin {
    Grid { grids: Vec<GridSpec>, include_global: bool },
    KMeans { k: usize, seed: u64, boxes: usize },
}

/// Ordered prior boxes; slot `i` is bound to `priors[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub fingerprint: String,
    pub origin: PriorOrigin,
    pub priors: Vec<BBox>,
    pub provenance: Vec<PriorSource>,
}

impl PriorSet {
    fn assemble(origin: PriorOrigin, priors: Vec<BBox>, provenance: Vec<PriorSource>) -> Self {
        let fingerprint = fingerprint(&origin);
        PriorSet { fingerprint, origin, priors, provenance }
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// An empty set (covers nothing).
    pub fn empty() -> Self {
        PriorSet::assemble(PriorOrigin::Grid { grids: vec![], include_global: false }, vec![], vec![])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: PriorSet = serde_json::from_str(s)?;
        if set.priors.len() != set.provenance.len() {
            return Err(Error::Format("prior and provenance counts differ".into()));
        }
        if set.fingerprint != fingerprint(&set.origin) {
            return Err(Error::Format("prior set fingerprint does not match its configuration".into()));
        }
        Ok(set)
    }

    /// Rebuilds a set from its recorded configuration. K-means sets cannot be rebuilt
    /// without their training boxes.
    pub fn rebuild(origin: &PriorOrigin) -> Result<Self> {
        match origin {
            PriorOrigin::Grid { grids, include_global } => build_grid_priors(grids, *include_global),
            PriorOrigin::KMeans { .. } => Err(Error::InvalidConfig("k-means priors need their source boxes".into())),
        }
    }
}

/// SHA-256 of the canonical JSON of a prior configuration, hex encoded.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Displaces every template of every grid to every grid point, clipped to the unit
/// square; with `include_global` a full-image prior is appended last.
///
/// Slot order: grids in the given order, then rows, columns, templates.
pub fn build_grid_priors(grids: &[GridSpec], include_global: bool) -> Result<PriorSet> {
    if grids.is_empty() {
        return Err(Error::InvalidConfig("at least one grid is required".into()));
    }
    let mut priors = Vec::new();
    let mut provenance = Vec::new();
    for (gi, g) in grids.iter().enumerate() {
        let g = GridSpec::new(g.m, g.templates.clone())?;
        for row in 0..g.m {
            for col in 0..g.m {
                let (cx, cy) = g.center(row, col);
                for (ti, t) in g.templates.iter().enumerate() {
                    priors.push(place(t, cx, cy));
                    provenance.push(PriorSource::Grid { grid: gi, m: g.m, row, col, template: ti });
                }
            }
        }
    }
    if include_global {
        priors.push(BBox::unit());
        provenance.push(PriorSource::Global);
    }
    let origin = PriorOrigin::Grid { grids: grids.to_vec(), include_global };
    Ok(PriorSet::assemble(origin, priors, provenance))
}

/// The 1420-slot configuration: grids 8, 6, 4, 3, 2 with eleven templates each plus one global prior.
pub fn default_grid_specs() -> Vec<GridSpec> {
    DEFAULT_GRIDS
        .iter()
        .map(|&m| GridSpec::with_default_templates(m).expect("default grid is valid"))
        .collect()
}

pub fn default_priors() -> PriorSet {
    build_grid_priors(&default_grid_specs(), true).expect("default configuration is valid")
}

const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64; 4], centers: &[[f64; 4]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means over box corner vectors, k-means++ initialized from `seed`.
/// Centroids are returned ordered by area, then center x, then center y.
pub fn kmeans_priors(gt_boxes: &[BBox], k: usize, seed: u64) -> Result<PriorSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let points: Vec<[f64; 4]> = gt_boxes.iter().map(|b| b.coords()).collect();
    let mut distinct: Vec<[u64; 4]> = points.iter().map(|p| p.map(f64::to_bits)).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::NotEnoughDistinct { k, distinct: distinct.len() });
    }

    let mut rng = rng::stream(seed, "kmeans", 0);
    let mut centers: Vec<[f64; 4]> = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let c = points[pick.expect("distinct points remain while centers < distinct")];
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![[0.0f64; 4]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for d in 0..4 {
                sums[a][d] += p[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut boxes: Vec<BBox> = centers
        .iter()
        .map(|c| BBox::from_corners_sorted(*c))
        .collect::<Result<_>>()?;
    boxes.sort_by(|a, b| {
        a.area()
            .total_cmp(&b.area())
            .then(a.center().0.total_cmp(&b.center().0))
            .then(a.center().1.total_cmp(&b.center().1))
    });
    let provenance = (0..k).map(|index| PriorSource::Cluster { index }).collect();
    let origin = PriorOrigin::KMeans { k, seed, boxes: gt_boxes.len() };
    Ok(PriorSet::assemble(origin, boxes, provenance))
}

/// Fraction of ground-truth boxes whose best prior has IoU strictly above `t`.
pub fn coverage(priors: &[BBox], gt_boxes: &[BBox], t: f64) -> Result<f64> {
    if gt_boxes.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let covered = gt_boxes
        .iter()
        .filter(|g| priors.iter().any(|p| iou(p, g) > t))
        .count();
    Ok(covered as f64 / gt_boxes.len() as f64)
}

/// Log-spaced lattice of template shapes: `scales` sides in [0.05, 1] times
/// `aspects` aspect ratios in [1/3, 3].
pub fn candidate_lattice(scales: usize, aspects: usize) -> Vec<TemplateBox> {
    let geo = |lo: f64, hi: f64, n: usize, i: usize| {
        if n == 1 {
            (lo * hi).sqrt()
        } else {
            lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(scales * aspects);
    for s in 0..scales {
        for a in 0..aspects {
            out.push(TemplateBox::with_aspect(geo(0.05, 1.0, scales, s), geo(1.0 / 3.0, 3.0, aspects, a)));
        }
    }
    out
}

/// Default candidate pool of 200 shapes (20 scales x 10 aspects).
pub fn default_candidate_pool() -> Vec<TemplateBox> {
    candidate_lattice(20, 10)
}

/// Best IoU between `gt` and template `t` placed anywhere on an `m x m` grid.
fn best_grid_iou(t: &TemplateBox, m: usize, gt: &BBox) -> f64 {
    let d = grid_delta(m);
    // only placements whose unclipped box can intersect the gt matter
    let range = |lo: f64, hi: f64, half: f64| {
        let first = (((lo - half) / d).floor() as i64 - 1).max(0) as usize;
        let last = ((((hi + half) / d).ceil() as i64).max(0) as usize).min(m);
        first..last
    };
    let mut best = 0.0f64;
    for row in range(gt.ymin, gt.ymax, t.height / 2.0) {
        for col in range(gt.xmin, gt.xmax, t.width / 2.0) {
            let p = place(t, (col + 1) as f64 * d, (row + 1) as f64 * d);
            best = best.max(iou(&p, gt));
        }
    }
    best
}

/// Greedy template selection maximizing coverage at `t`. Each step adds the
/// (candidate, grid) pair with the largest coverage gain among grids holding fewer
/// than `budget` templates; stops at zero gain or when every grid is full.
pub fn optimize_templates(
    gt_sample: &[BBox],
    candidate_pool: &[TemplateBox],
    grids: &[usize],
    budget: usize,
    t: f64,
) -> Result<Vec<GridSpec>> {
    optimize_templates_traced(gt_sample, candidate_pool, grids, budget, t).map(|(specs, _)| specs)
}

/// [`optimize_templates`] that also returns the coverage reached after each greedy step.
pub fn optimize_templates_traced(
    gt_sample: &[BBox],
    candidate_pool: &[TemplateBox],
    grids: &[usize],
    budget: usize,
    t: f64,
) -> Result<(Vec<GridSpec>, Vec<f64>)> {
    let mut specs: Vec<GridSpec> = grids.iter().map(|&m| GridSpec::new(m, vec![])).collect::<Result<_>>()?;
    let mut trace = Vec::new();
    if budget == 0 || gt_sample.is_empty() {
        return Ok((specs, trace));
    }
    // covers[c][g][j]: candidate c on grid g reaches IoU > t with gt j
    let covers: Vec<Vec<Vec<bool>>> = candidate_pool
        .iter()
        .map(|c| {
            grids
                .iter()
                .map(|&m| gt_sample.iter().map(|g| best_grid_iou(c, m, g) > t).collect())
                .collect()
        })
        .collect();
    let mut used = vec![vec![false; grids.len()]; candidate_pool.len()];
    let mut covered = vec![false; gt_sample.len()];
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for (ci, per_grid) in covers.iter().enumerate() {
            for (gi, hits) in per_grid.iter().enumerate() {
                if used[ci][gi] || specs[gi].templates.len() >= budget {
                    continue;
                }
                let gain = hits.iter().zip(&covered).filter(|(&h, &c)| h && !c).count();
                if gain > best.map_or(0, |b| b.2) {
                    best = Some((ci, gi, gain));
                }
            }
        }
        let Some((ci, gi, _)) = best else { break };
        used[ci][gi] = true;
        specs[gi].templates.push(candidate_pool[ci]);
        for (c, &h) in covered.iter_mut().zip(&covers[ci][gi]) {
            *c |= h;
        }
        trace.push(covered.iter().filter(|&&c| c).count() as f64 / gt_sample.len() as f64);
    }
    Ok((specs, trace))
}

/// Priors for a list of grid specs, allowing grids with no templates.
pub fn priors_of(specs: &[GridSpec]) -> Vec<BBox> {
    if specs.is_empty() {
        return vec![];
    }
    build_grid_priors(specs, false).map(|p| p.priors).unwrap_or_default()
}
