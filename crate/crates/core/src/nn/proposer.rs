//! Convolutional proposer: a small base network ending in an 8x8 map, a tapering
//! prediction tree (8 -> 6 -> 4 -> 3 -> 2, plus a 1x1 average-pooled branch), and one
//! LOC/CONF head per grid emitting 4 residuals and 1 logit per template.

use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, Conv2d, HybridReduce};
use super::params::ParamStore;
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::loss::{sigmoid, Coords};
use crate::priors::{PriorOrigin, PriorSet};
use crate::rng;

/// Raw per-slot outputs in prior-set slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPredictions {
    /// Residuals `l'_i`, added to prior `p_i` to give the predicted box.
    pub residuals: Vec<Coords>,
    pub logits: Vec<f64>,
}

impl SlotPredictions {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposerConfig {
    /// Square input side; must be 8x the top feature map.
    pub input_size: usize,
    /// Output channels of the four conv + ReLU blocks.
    pub block_channels: [usize; 4],
    /// Convolution channels of the three grid reductions between blocks.
    pub reduce_channels: [usize; 3],
    pub taper_channels: usize,
    /// Initial confidence bias (a prior log-odds of "object").
    pub conf_bias: f64,
    /// Init scale of the head weights relative to He init.
    pub head_gain: f64,
    /// Fixed multiplier from LOC head outputs to residuals.
    pub residual_scale: f64,
    pub seed: u64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig {
            input_size: 64,
            block_channels: [8, 16, 32, 48],
            reduce_channels: [8, 16, 24],
            taper_channels: 48,
            conf_bias: -4.0,
            head_gain: 0.05,
            residual_scale: 0.1,
            seed: 0,
        }
    }
}

/// Where one grid's slots come from.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub m: usize,
    pub templates: usize,
    /// Feature map feeding this head: 0 is the top map, 1.. the taper outputs.
    pub map: usize,
    pub slot_offset: usize,
    pub conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposerNet {
    pub config: ProposerConfig,
    pub prior_origin: PriorOrigin,
    pub params: ParamStore,
    blocks: [Conv2d; 4],
    reduces: [HybridReduce; 3],
    tapers: Vec<Conv2d>,
    heads: Vec<Head>,
    global: Option<(usize, Conv2d)>,
    slots: usize,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProposerCache {
    input: Tensor3,
    block_out: Vec<Tensor3>,
    reduce_out: Vec<Tensor3>,
    taper_out: Vec<Tensor3>,
    pooled: Tensor3,
}

fn scaled(v: &[f64], s: f64) -> Coords {
    [v[0] * s, v[1] * s, v[2] * s, v[3] * s]
}

/// Kernel of each taper step; all are valid (unpadded) convolutions.
const TAPER_KERNELS: [usize; 4] = [3, 3, 2, 2];

impl ProposerNet {
    /// Builds a network whose slots line up one-to-one with `priors`.
    pub fn new(config: ProposerConfig, priors: &PriorSet) -> Result<Self> {
        let PriorOrigin::Grid { grids, include_global } = &priors.origin else {
            return Err(Error::InvalidConfig("the convolutional proposer needs grid priors".into()));
        };
        if !(config.residual_scale > 0.0 && config.residual_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("residual scale {} must be positive", config.residual_scale)));
        }
        if config.input_size % 8 != 0 || config.input_size < 8 {
            return Err(Error::InvalidConfig(format!("input size {} is not a multiple of 8", config.input_size)));
        }
        let top = config.input_size / 8;
        let mut map_sizes = vec![top];
        for k in TAPER_KERNELS {
            let last = *map_sizes.last().unwrap();
            if last < k {
                break;
            }
            map_sizes.push(last + 1 - k);
        }

        let mut store = ParamStore::default();
        let [c1, c2, c3, c4] = config.block_channels;
        let [d1, d2, d3] = config.reduce_channels;
        let b1 = Conv2d::new(&mut store, "block1", 3, 1, 1, 3, c1);
        let r1 = HybridReduce::new(&mut store, "reduce1", c1, d1);
        let b2 = Conv2d::new(&mut store, "block2", 3, 1, 1, c1 + d1, c2);
        let r2 = HybridReduce::new(&mut store, "reduce2", c2, d2);
        let b3 = Conv2d::new(&mut store, "block3", 3, 1, 1, c2 + d2, c3);
        let r3 = HybridReduce::new(&mut store, "reduce3", c3, d3);
        let b4 = Conv2d::new(&mut store, "block4", 3, 1, 1, c3 + d3, c4);

        let mut heads = Vec::new();
        let mut slot = 0;
        let mut deepest = 0;
        for (gi, g) in grids.iter().enumerate() {
            let map = map_sizes.iter().position(|&s| s == g.m).ok_or_else(|| {
                Error::InvalidConfig(format!("no feature map of size {} (available {map_sizes:?})", g.m))
            })?;
            deepest = deepest.max(map);
            let cin = if map == 0 { c4 } else { config.taper_channels };
            let conv = Conv2d::new(&mut store, &format!("head{gi}_m{}", g.m), 1, 1, 0, cin, 5 * g.templates.len());
            heads.push(Head { m: g.m, templates: g.templates.len(), map, slot_offset: slot, conv });
            slot += g.slot_count();
        }
        let mut tapers = Vec::new();
        for (t, &k) in TAPER_KERNELS.iter().enumerate().take(deepest) {
            let cin = if t == 0 { c4 } else { config.taper_channels };
            tapers.push(Conv2d::new(&mut store, &format!("taper{}", map_sizes[t + 1]), k, 1, 0, cin, config.taper_channels));
        }
        let global = include_global.then(|| {
            let conv = Conv2d::dense(&mut store, "head_global", c4, 5);
            let s = slot;
            slot += 1;
            (s, conv)
        });
        if slot != priors.len() {
            return Err(Error::Shape(format!("network has {slot} slots, prior set {}", priors.len())));
        }

        let mut net = ProposerNet {
            prior_origin: priors.origin.clone(),
            params: store,
            blocks: [b1, b2, b3, b4],
            reduces: [r1, r2, r3],
            tapers,
            heads,
            global,
            slots: slot,
            config,
        };
        net.init();
        Ok(net)
    }

    fn init(&mut self) {
        let mut r = rng::stream(self.config.seed, "proposer-init", 0);
        let store = &mut self.params;
        for c in &self.blocks {
            c.init(store, 1.0, &mut r);
        }
        for red in &self.reduces {
            red.conv.init(store, 1.0, &mut r);
        }
        for c in &self.tapers {
            c.init(store, 1.0, &mut r);
        }
        let head_convs = self.heads.iter().map(|h| &h.conv).chain(self.global.iter().map(|g| &g.1));
        for conv in head_convs {
            conv.init(store, self.config.head_gain, &mut r);
            let bias = conv.bias_range();
            for (k, i) in bias.enumerate() {
                if k % 5 == 4 {
                    store.values[i] = self.config.conf_bias;
                }
            }
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.config.input_size, self.config.input_size, 3)
    }

    pub fn forward(&self, image: &Tensor3) -> Result<SlotPredictions> {
        self.forward_cached(image).map(|(p, _)| p)
    }

    pub fn forward_cached(&self, image: &Tensor3) -> Result<(SlotPredictions, ProposerCache)> {
        if image.dims() != self.input_dims() {
            return Err(Error::Shape(format!("image {:?}, network expects {:?}", image.dims(), self.input_dims())));
        }
        let p = &self.params.values;
        let mut block_out = Vec::with_capacity(4);
        let mut reduce_out = Vec::with_capacity(3);
        let mut x = image.clone();
        for b in 0..4 {
            let mut a = self.blocks[b].forward(p, &x);
            relu_inplace(&mut a);
            if b < 3 {
                let r = self.reduces[b].forward(p, &a)?;
                block_out.push(a);
                reduce_out.push(r.clone());
                x = r;
            } else {
                block_out.push(a);
            }
        }
        let top = block_out[3].clone();
        let mut taper_out: Vec<Tensor3> = Vec::with_capacity(self.tapers.len());
        for t in &self.tapers {
            let mut a = t.forward(p, taper_out.last().unwrap_or(&top));
            relu_inplace(&mut a);
            taper_out.push(a);
        }
        let pooled = global_avg_pool(&top);

        let mut residuals = vec![[0.0; 4]; self.slots];
        let mut logits = vec![0.0; self.slots];
        for h in &self.heads {
            let map = if h.map == 0 { &top } else { &taper_out[h.map - 1] };
            let out = h.conv.forward(p, map);
            for (pos, px) in out.data.chunks_exact(5 * h.templates).enumerate() {
                for (t, v) in px.chunks_exact(5).enumerate() {
                    let s = h.slot_offset + pos * h.templates + t;
                    residuals[s] = scaled(&v[..4], self.config.residual_scale);
                    logits[s] = v[4];
                }
            }
        }
        if let Some((s, conv)) = &self.global {
            let out = conv.forward(p, &pooled);
            residuals[*s] = scaled(&out.data[..4], self.config.residual_scale);
            logits[*s] = out.data[4];
        }
        if !residuals.iter().flatten().chain(&logits).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("proposer outputs".into()));
        }
        let cache = ProposerCache { input: image.clone(), block_out, reduce_out, taper_out, pooled };
        Ok((SlotPredictions { residuals, logits }, cache))
    }

    /// Accumulates into `grad` the parameter gradient of a loss whose derivatives
    /// with respect to the slot outputs are `d_residuals` and `d_logits`.
    pub fn backward(&self, cache: &ProposerCache, d_residuals: &[Coords], d_logits: &[f64], grad: &mut [f64]) {
        let p = &self.params.values;
        let top = &cache.block_out[3];
        let mut d_top = Tensor3::zeros(top.h, top.w, top.c);
        let mut d_tapers: Vec<Tensor3> = cache.taper_out.iter().map(|t| Tensor3::zeros(t.h, t.w, t.c)).collect();

        for h in &self.heads {
            let map = if h.map == 0 { top } else { &cache.taper_out[h.map - 1] };
            let mut dy = Tensor3::zeros(h.m, h.m, 5 * h.templates);
            for (pos, px) in dy.data.chunks_exact_mut(5 * h.templates).enumerate() {
                for (t, v) in px.chunks_exact_mut(5).enumerate() {
                    let s = h.slot_offset + pos * h.templates + t;
                    v[..4].copy_from_slice(&scaled(&d_residuals[s], self.config.residual_scale));
                    v[4] = d_logits[s];
                }
            }
            let dmap = h.conv.backward(p, map, &dy, grad, true).unwrap();
            if h.map == 0 {
                d_top.add_assign(&dmap);
            } else {
                d_tapers[h.map - 1].add_assign(&dmap);
            }
        }
        if let Some((s, conv)) = &self.global {
            let mut dy = Tensor3::zeros(1, 1, 5);
            dy.data[..4].copy_from_slice(&scaled(&d_residuals[*s], self.config.residual_scale));
            dy.data[4] = d_logits[*s];
            let dpool = conv.backward(p, &cache.pooled, &dy, grad, true).unwrap();
            d_top.add_assign(&global_avg_pool_backward(top.h, top.w, &dpool));
        }
        for t in (0..self.tapers.len()).rev() {
            let dz = relu_backward(&cache.taper_out[t], std::mem::replace(&mut d_tapers[t], Tensor3::zeros(0, 0, 0)));
            let input = if t == 0 { top } else { &cache.taper_out[t - 1] };
            let dx = self.tapers[t].backward(p, input, &dz, grad, true).unwrap();
            if t == 0 {
                d_top.add_assign(&dx);
            } else {
                d_tapers[t - 1].add_assign(&dx);
            }
        }

        let mut d = d_top;
        for b in (0..4).rev() {
            let dz = relu_backward(&cache.block_out[b], d);
            let input = if b == 0 { &cache.input } else { &cache.reduce_out[b - 1] };
            let Some(dx) = self.blocks[b].backward(p, input, &dz, grad, b > 0) else { return };
            d = self.reduces[b - 1].backward(p, &cache.block_out[b - 1], &dx, grad, true).unwrap();
        }
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }
}
