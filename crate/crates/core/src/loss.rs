//! The MultiBox objective: L2 location loss plus logistic confidence loss over a
//! fixed matching, the hard-bootstrapped confidence variant, and their gradients
//! with respect to raw network outputs (location coordinates and confidence logits).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::Matching;

/// Four box coordinates `(xmin, ymin, xmax, ymax)` as produced by a network slot;
/// unlike [`crate::geometry::BBox`] no ordering is implied.
pub type Coords = [f64; 4];

/// Probability clamp used when converting confidences to logits.
pub const CONF_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the location term.
    pub alpha: f64,
    /// Number of most-confident slots exempted from the confidence loss; 0 disables.
    pub bootstrap_l: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.3, bootstrap_l: 0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub f_conf: f64,
    pub f_loc: f64,
    pub f_total: f64,
    pub grad_logits: Vec<f64>,
    pub grad_locs: Vec<Coords>,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of a probability clamped to `[CONF_EPS, 1 - CONF_EPS]`.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(CONF_EPS, 1.0 - CONF_EPS);
    (p / (1.0 - p)).ln()
}

pub fn logits_from_confidences(conf: &[f64]) -> Vec<f64> {
    conf.iter().map(|&c| logit(c)).collect()
}

fn check_shapes(locs: &[Coords], logits: &[f64], gts: &[Coords], m: &Matching) -> Result<()> {
    if locs.len() != logits.len() {
        return Err(Error::Shape(format!("{} locations vs {} logits", locs.len(), logits.len())));
    }
    if m.assignment.len() != gts.len() || !m.is_valid(locs.len()) {
        return Err(Error::Shape("matching does not fit these slots and ground truths".into()));
    }
    Ok(())
}

/// `-log c` for matched slots and `-log(1 - c)` otherwise, with its derivative in the logit.
fn conf_term(z: f64, matched: bool) -> (f64, f64) {
    if matched {
        (softplus(-z), sigmoid(z) - 1.0)
    } else {
        (softplus(z), sigmoid(z))
    }
}

/// Logistic confidence loss over all slots: matched slots want `c = 1`, the rest `c = 0`.
pub fn confidence_loss(logits: &[f64], matching: &Matching) -> (f64, Vec<f64>) {
    let matched = matching.slot_to_gt(logits.len());
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, m) in logits.iter().zip(&matched) {
        let (v, g) = conf_term(z, m.is_some());
        value += v;
        grad.push(g);
    }
    (value, grad)
}

/// Indices of the `l` largest logits, ties going to the lower index.
pub fn top_l(logits: &[f64], l: usize) -> Vec<usize> {
    let mut order = crate::geometry::rank_by_score(logits.iter().copied());
    order.truncate(l);
    order
}

/// Hard-bootstrapped confidence loss: the confidence term with the current top-`l`
/// most confident slots removed (value and gradient both zero for them).
pub fn bootstrap_conf_loss(logits: &[f64], matching: &Matching, l: usize) -> (f64, Vec<f64>) {
    let matched = matching.slot_to_gt(logits.len());
    let mut exempt = vec![false; logits.len()];
    for i in top_l(logits, l) {
        exempt[i] = true;
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, m), &skip) in logits.iter().zip(&matched).zip(&exempt) {
        if skip {
            grad.push(0.0);
            continue;
        }
        let (v, g) = conf_term(z, m.is_some());
        value += v;
        grad.push(g);
    }
    (value, grad)
}

/// Location loss `1/2 * sum |l_i - g_j|^2` over matched pairs and its gradient.
pub fn location_loss(locs: &[Coords], gts: &[Coords], matching: &Matching) -> (f64, Vec<Coords>) {
    let mut grad = vec![[0.0; 4]; locs.len()];
    let mut value = 0.0;
    for (j, &i) in matching.assignment.iter().enumerate() {
        for d in 0..4 {
            let diff = locs[i][d] - gts[j][d];
            value += 0.5 * diff * diff;
            grad[i][d] = diff;
        }
    }
    (value, grad)
}

/// `F = F_conf + alpha * F_loc` at a fixed matching, with gradients in the logits
/// and location outputs. With `cfg.bootstrap_l > 0` the confidence term is the
/// bootstrapped one.
pub fn multibox_loss(
    locs: &[Coords],
    logits: &[f64],
    gts: &[Coords],
    matching: &Matching,
    cfg: &LossConfig,
) -> Result<LossBundle> {
    check_shapes(locs, logits, gts, matching)?;
    let (f_conf, grad_logits) = if cfg.bootstrap_l > 0 {
        bootstrap_conf_loss(logits, matching, cfg.bootstrap_l)
    } else {
        confidence_loss(logits, matching)
    };
    let (f_loc, mut grad_locs) = location_loss(locs, gts, matching);
    for g in &mut grad_locs {
        for v in g.iter_mut() {
            *v *= cfg.alpha;
        }
    }
    Ok(LossBundle { f_conf, f_loc, f_total: f_conf + cfg.alpha * f_loc, grad_logits, grad_locs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::best_matching;
    use crate::rng;
    use rand::Rng;

    fn matching(assignment: Vec<usize>) -> Matching {
        Matching { assignment, cost: 0.0, objective: 0.0 }
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let gts = [[0.1, 0.1, 0.3, 0.3], [0.5, 0.4, 0.9, 0.8]];
        let mut locs = vec![[0.0; 4]; 30];
        locs[4] = gts[0];
        locs[17] = gts[1];
        let mut conf = vec![CONF_EPS; 30];
        conf[4] = 1.0 - CONF_EPS;
        conf[17] = 1.0 - CONF_EPS;
        let m = matching(vec![4, 17]);
        let b = multibox_loss(&locs, &logits_from_confidences(&conf), &gts, &m, &LossConfig::default()).unwrap();
        assert!(b.f_total <= 1e-5, "{}", b.f_total);
        assert_eq!(b.f_loc, 0.0);
    }

    #[test]
    fn location_loss_direct() {
        let b = multibox_loss(&[[0.0; 4]], &[0.0], &[[1.0; 4]], &matching(vec![0]), &LossConfig::default()).unwrap();
        assert_eq!(b.f_loc, 2.0);
        assert!((b.f_total - (b.f_conf + 0.3 * 2.0)).abs() <= 1e-12 * b.f_total);
    }

    #[test]
    fn bootstrap_limits() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let m = matching(vec![1]);
        let (v0, g0) = bootstrap_conf_loss(&logits, &m, 0);
        let (vc, gc) = confidence_loss(&logits, &m);
        assert_eq!(v0.to_bits(), vc.to_bits());
        assert_eq!(g0, gc);
        let (v, g) = bootstrap_conf_loss(&logits, &m, logits.len());
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bootstrap_drops_most_confident_slot() {
        let logits = [0.5, 1.5, -0.7];
        let m = matching(vec![0]);
        let (v, g) = bootstrap_conf_loss(&logits, &m, 1);
        // slot 1 is exempt; slot 0 matched, slot 2 unmatched
        let c0 = 1.0 / (1.0 + (-0.5f64).exp());
        let c2 = 1.0 / (1.0 + 0.7f64.exp());
        let expect = -c0.ln() - (1.0 - c2).ln();
        assert!((v - expect).abs() < 1e-12);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn stable_forms_agree_with_naive() {
        for z in [-8.0, -1.0, 0.0, 0.3, 5.0] {
            let c = sigmoid(z);
            assert!((softplus(-z) + c.ln()).abs() < 1e-12);
            assert!((softplus(z) + (1.0 - c).ln()).abs() < 1e-12);
        }
        assert!(softplus(1000.0).is_finite() && softplus(-1000.0) >= 0.0);
        assert!((logit(sigmoid(1.7)) - 1.7).abs() < 1e-9);
    }

    fn random_problem(seed: u64) -> (Vec<Coords>, Vec<f64>, Vec<Coords>) {
        let mut r = rng::stream(seed, "loss-test", 0);
        let slots = r.gen_range(2..12);
        let gts = r.gen_range(0..=slots.min(4));
        let locs = (0..slots).map(|_| [r.gen(), r.gen(), r.gen(), r.gen()]).collect();
        let logits = (0..slots).map(|_| r.gen_range(-4.0..4.0)).collect();
        let g = (0..gts).map(|_| [r.gen(), r.gen(), r.gen(), r.gen()]).collect();
        (locs, logits, g)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..50 {
            let (locs, logits, gts) = random_problem(seed);
            let cfg = LossConfig { alpha: 0.7, bootstrap_l: (seed % 3) as usize };
            let m = best_matching(&locs, &logits, &gts, &cfg, true).unwrap();
            let f = |l: &[Coords], z: &[f64]| multibox_loss(l, z, &gts, &m, &cfg).unwrap().f_total;
            let b = multibox_loss(&locs, &logits, &gts, &m, &cfg).unwrap();
            for i in 0..logits.len() {
                let mut zp = logits.clone();
                let mut zm = logits.clone();
                zp[i] += h;
                zm[i] -= h;
                // keep the exempt set fixed, as it is precomputed before the step
                if cfg.bootstrap_l > 0 && top_l(&zp, cfg.bootstrap_l) != top_l(&zm, cfg.bootstrap_l) {
                    continue;
                }
                let fd = (f(&locs, &zp) - f(&locs, &zm)) / (2.0 * h);
                assert!(rel_err(b.grad_logits[i], fd) < 1e-4, "logit {i}: {} vs {fd}", b.grad_logits[i]);
                for d in 0..4 {
                    let mut lp = locs.clone();
                    let mut lm = locs.clone();
                    lp[i][d] += h;
                    lm[i][d] -= h;
                    let fd = (f(&lp, &logits) - f(&lm, &logits)) / (2.0 * h);
                    assert!(rel_err(b.grad_locs[i][d], fd) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn invariants_on_random_instances() {
        for seed in 0..200 {
            let (locs, logits, gts) = random_problem(seed + 300);
            let m = best_matching(&locs, &logits, &gts, &LossConfig::default(), true).unwrap();
            let base = multibox_loss(&locs, &logits, &gts, &m, &LossConfig::default()).unwrap();
            assert!(base.f_total >= 0.0 && base.f_loc >= 0.0 && base.f_conf >= 0.0);
            for l in 0..=logits.len() {
                let (v, _) = bootstrap_conf_loss(&logits, &m, l);
                assert!(v <= base.f_conf);
            }
            for s in [0.5, 2.0, 3.0, 8.0] {
                let cfg = LossConfig { alpha: 0.3 * s, bootstrap_l: 0 };
                let scaled = multibox_loss(&locs, &logits, &gts, &m, &cfg).unwrap();
                for (a, b) in scaled.grad_locs.iter().zip(&base.grad_locs) {
                    for d in 0..4 {
                        assert!((a[d] - s * b[d]).abs() <= 1e-15 * a[d].abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn location_loss_zero_iff_coincident() {
        let gts = [[0.2, 0.2, 0.4, 0.5]];
        let m = matching(vec![1]);
        let mut locs = vec![[0.0; 4], gts[0]];
        assert_eq!(location_loss(&locs, &gts, &m).0, 0.0);
        locs[1][2] += 1e-6;
        assert!(location_loss(&locs, &gts, &m).0 > 0.0);
    }
}
