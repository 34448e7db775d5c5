//! Post-classification: an object-feature network over proposal crops, a separate
//! context-feature network over large image crops, and a softmax combiner over
//! their concatenated features (`num_classes` object classes plus background at 0).

use serde::{Deserialize, Serialize};

use super::layers::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, Conv2d, HybridReduce};
use super::params::ParamStore;
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::loss::{sigmoid, softplus};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureNetConfig {
    /// Square input side, divisible by 4.
    pub input_size: usize,
    pub channels: [usize; 3],
    pub reduce_channels: [usize; 2],
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig { input_size: 32, channels: [8, 16, 32], reduce_channels: [8, 16] }
    }
}

impl FeatureNetConfig {
    pub fn feature_width(&self) -> usize {
        self.channels[2]
    }
}

/// conv+ReLU, reduce, conv+ReLU, reduce, conv+ReLU, global average pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    convs: [Conv2d; 3],
    reduces: [HybridReduce; 2],
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    input: Tensor3,
    acts: Vec<Tensor3>,
    reduced: Vec<Tensor3>,
}

impl FeatureNet {
    fn new(config: FeatureNetConfig, store: &mut ParamStore, name: &str) -> Result<Self> {
        if config.input_size % 4 != 0 || config.input_size == 0 {
            return Err(Error::InvalidConfig(format!("feature input size {} not divisible by 4", config.input_size)));
        }
        let [c1, c2, c3] = config.channels;
        let [d1, d2] = config.reduce_channels;
        let convs = [
            Conv2d::new(store, &format!("{name}.conv1"), 3, 1, 1, 3, c1),
            Conv2d::new(store, &format!("{name}.conv2"), 3, 1, 1, c1 + d1, c2),
            Conv2d::new(store, &format!("{name}.conv3"), 3, 1, 1, c2 + d2, c3),
        ];
        let reduces = [
            HybridReduce::new(store, &format!("{name}.reduce1"), c1, d1),
            HybridReduce::new(store, &format!("{name}.reduce2"), c2, d2),
        ];
        Ok(FeatureNet { config, convs, reduces })
    }

    fn init(&self, store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng) {
        for c in &self.convs {
            c.init(store, 1.0, rng);
        }
        for r in &self.reduces {
            r.conv.init(store, 1.0, rng);
        }
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        let s = self.config.input_size;
        if x.dims() != (s, s, 3) {
            return Err(Error::Shape(format!("crop {:?}, feature network expects {s}x{s}x3", x.dims())));
        }
        Ok(())
    }

    fn forward(&self, p: &[f64], x: &Tensor3) -> Result<(Vec<f64>, FeatureCache)> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(3);
        let mut reduced = Vec::with_capacity(2);
        let mut cur = x.clone();
        for i in 0..3 {
            let mut a = self.convs[i].forward(p, &cur);
            relu_inplace(&mut a);
            if i < 2 {
                let r = self.reduces[i].forward(p, &a)?;
                reduced.push(r.clone());
                cur = r;
            }
            acts.push(a);
        }
        let feat = global_avg_pool(&acts[2]).data;
        Ok((feat, FeatureCache { input: x.clone(), acts, reduced }))
    }

    fn backward(&self, p: &[f64], cache: &FeatureCache, d_feat: &[f64], g: &mut [f64]) {
        let top = &cache.acts[2];
        let dpool = Tensor3::from_vec(1, 1, d_feat.len(), d_feat.to_vec()).expect("feature width");
        let mut d = global_avg_pool_backward(top.h, top.w, &dpool);
        for i in (0..3).rev() {
            let dz = relu_backward(&cache.acts[i], d);
            let input = if i == 0 { &cache.input } else { &cache.reduced[i - 1] };
            let Some(dx) = self.convs[i].backward(p, input, &dz, g, i > 0) else { return };
            d = self.reduces[i - 1].backward(p, &cache.acts[i - 1], &dx, g, true).unwrap();
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostClassifierConfig {
    pub features: FeatureNetConfig,
    /// Width of the context feature vector concatenated before the combiner.
    pub context_width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for PostClassifierConfig {
    fn default() -> Self {
        PostClassifierConfig { features: FeatureNetConfig::default(), context_width: 32, num_classes: 3, seed: 0 }
    }
}

/// Object-feature network plus a softmax combiner over `[object features, context features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PostClassifierNet {
    pub config: PostClassifierConfig,
    pub params: ParamStore,
    object: FeatureNet,
    combiner: Conv2d,
}

/// Object features of a crop, reusable across context vectors.
#[derive(Debug, Clone)]
pub struct ObjectFeatures {
    pub values: Vec<f64>,
    cache: FeatureCache,
}

impl PostClassifierNet {
    pub fn new(config: PostClassifierConfig) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::InvalidConfig("post-classifier needs at least one class".into()));
        }
        let mut params = ParamStore::default();
        let object = FeatureNet::new(config.features.clone(), &mut params, "object")?;
        let width = config.features.feature_width() + config.context_width;
        let combiner = Conv2d::dense(&mut params, "combiner", width, config.num_classes + 1);
        let mut r = rng::stream(config.seed, "postclassifier-init", 0);
        object.init(&mut params, &mut r);
        combiner.init(&mut params, 1.0, &mut r);
        Ok(PostClassifierNet { config, params, object, combiner })
    }

    pub fn combiner_width(&self) -> usize {
        self.combiner.cin
    }

    pub fn crop_size(&self) -> usize {
        self.config.features.input_size
    }

    pub fn object_features(&self, crop: &Tensor3) -> Result<ObjectFeatures> {
        let (values, cache) = self.object.forward(&self.params.values, crop)?;
        Ok(ObjectFeatures { values, cache })
    }

    fn combiner_input(&self, obj: &[f64], context: Option<&[f64]>) -> Result<Tensor3> {
        let mut v = obj.to_vec();
        match context {
            Some(c) if c.len() != self.config.context_width => {
                return Err(Error::Shape(format!("context width {} != {}", c.len(), self.config.context_width)))
            }
            Some(c) => v.extend_from_slice(c),
            None => v.extend(std::iter::repeat(0.0).take(self.config.context_width)),
        }
        Tensor3::from_vec(1, 1, v.len(), v)
    }

    /// Class distribution (index 0 = background). Absent context is a zero vector.
    pub fn combine(&self, obj: &ObjectFeatures, context: Option<&[f64]>) -> Result<Vec<f64>> {
        let input = self.combiner_input(&obj.values, context)?;
        Ok(softmax(&self.combiner.forward(&self.params.values, &input).data))
    }

    pub fn forward(&self, crop: &Tensor3, context: Option<&[f64]>) -> Result<Vec<f64>> {
        self.combine(&self.object_features(crop)?, context)
    }

    /// Softmax cross-entropy for one crop, accumulating parameter gradients into `g`.
    pub fn loss_and_grad(&self, crop: &Tensor3, context: Option<&[f64]>, label: usize, g: &mut [f64]) -> Result<f64> {
        let obj = self.object_features(crop)?;
        let input = self.combiner_input(&obj.values, context)?;
        let probs = softmax(&self.combiner.forward(&self.params.values, &input).data);
        let loss = -probs[label].max(1e-300).ln();
        let mut dz = probs;
        dz[label] -= 1.0;
        let dy = Tensor3::from_vec(1, 1, dz.len(), dz)?;
        let dx = self.combiner.backward(&self.params.values, &input, &dy, g, true).unwrap();
        let d_obj = &dx.data[..obj.values.len()];
        self.object.backward(&self.params.values, &obj.cache, d_obj, g);
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    pub features: FeatureNetConfig,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { features: FeatureNetConfig::default(), num_classes: 3, seed: 1 }
    }
}

/// Context network: its own feature base (no weights shared with the object
/// network) and a per-class logistic head used only for training it.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNet {
    pub config: ContextConfig,
    pub params: ParamStore,
    features: FeatureNet,
    head: Conv2d,
}

impl ContextNet {
    pub fn new(config: ContextConfig) -> Result<Self> {
        let mut params = ParamStore::default();
        let features = FeatureNet::new(config.features.clone(), &mut params, "context")?;
        let head = Conv2d::dense(&mut params, "context.logistic", config.features.feature_width(), config.num_classes);
        let mut r = rng::stream(config.seed, "context-init", 0);
        features.init(&mut params, &mut r);
        head.init(&mut params, 1.0, &mut r);
        Ok(ContextNet { config, params, features, head })
    }

    pub fn feature_width(&self) -> usize {
        self.config.features.feature_width()
    }

    pub fn crop_size(&self) -> usize {
        self.config.features.input_size
    }

    /// Topmost pre-classifier feature vector for a context crop.
    pub fn extract_context_features(&self, crop: &Tensor3) -> Result<Vec<f64>> {
        Ok(self.features.forward(&self.params.values, crop)?.0)
    }

    /// Per-class presence probabilities.
    pub fn classify(&self, crop: &Tensor3) -> Result<Vec<f64>> {
        let f = self.extract_context_features(crop)?;
        let x = Tensor3::from_vec(1, 1, f.len(), f)?;
        Ok(self.head.forward(&self.params.values, &x).data.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Sum over classes of logistic losses for multi-label `present` targets.
    pub fn loss_and_grad(&self, crop: &Tensor3, present: &[bool], g: &mut [f64]) -> Result<f64> {
        let p = &self.params.values;
        let (f, cache) = self.features.forward(p, crop)?;
        let x = Tensor3::from_vec(1, 1, f.len(), f)?;
        let z = self.head.forward(p, &x);
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(z.data.len());
        for (&zi, &y) in z.data.iter().zip(present) {
            if y {
                loss += softplus(-zi);
                dz.push(sigmoid(zi) - 1.0);
            } else {
                loss += softplus(zi);
                dz.push(sigmoid(zi));
            }
        }
        let dy = Tensor3::from_vec(1, 1, dz.len(), dz)?;
        let dx = self.head.backward(p, &x, &dy, g, true).unwrap();
        self.features.backward(p, &cache, &dx.data, g);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::gradcheck::{random_tensor, rel_err};
    use rand::Rng;

    fn small_pc() -> PostClassifierNet {
        PostClassifierNet::new(PostClassifierConfig {
            features: FeatureNetConfig { input_size: 8, channels: [2, 3, 3], reduce_channels: [2, 2] },
            context_width: 4,
            num_classes: 2,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn softmax_normalized() {
        let pc = PostClassifierNet::new(PostClassifierConfig::default()).unwrap();
        let mut r = rng::stream(1, "t", 0);
        let crop = random_tensor(32, 32, 3, &mut r);
        let ctx: Vec<f64> = (0..32).map(|_| r.gen()).collect();
        for c in [None, Some(ctx.as_slice())] {
            let p = pc.forward(&crop, c).unwrap();
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(pc.combiner_width(), 32 + 32);
        assert!(pc.forward(&random_tensor(16, 16, 3, &mut r), None).is_err());
        assert!(pc.forward(&crop, Some(&ctx[..5])).is_err());
    }

    #[test]
    fn context_changes_output_when_weights_nonzero() {
        let pc = PostClassifierNet::new(PostClassifierConfig::default()).unwrap();
        let mut r = rng::stream(2, "t", 0);
        let crop = random_tensor(32, 32, 3, &mut r);
        let ctx: Vec<f64> = (0..32).map(|_| r.gen_range(0.1..1.0)).collect();
        assert_ne!(pc.forward(&crop, None).unwrap(), pc.forward(&crop, Some(&ctx)).unwrap());
    }

    #[test]
    fn context_features_shape_and_determinism() {
        let ctx = ContextNet::new(ContextConfig::default()).unwrap();
        let mut r = rng::stream(3, "t", 0);
        let crop = random_tensor(32, 32, 3, &mut r);
        let f = ctx.extract_context_features(&crop).unwrap();
        assert_eq!(f.len(), ctx.feature_width());
        assert_eq!(f, ctx.extract_context_features(&crop).unwrap());
        assert!(ctx.extract_context_features(&random_tensor(30, 32, 3, &mut r)).is_err());
    }

    fn fd_check(params: &[f64], g: &[f64], loss: impl Fn(&[f64]) -> f64) -> usize {
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..params.len() {
            let (mut a, mut b) = (params.to_vec(), params.to_vec());
            a[i] += h;
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let (mut a2, mut b2) = (params.to_vec(), params.to_vec());
            a2[i] += h / 2.0;
            b2[i] -= h / 2.0;
            if rel_err(fd, (loss(&a2) - loss(&b2)) / h) > 1e-5 {
                continue; // kink inside the stencil
            }
            assert!(rel_err(g[i], fd) < 1e-4, "param {i}: {} vs {fd}", g[i]);
            checked += 1;
        }
        checked
    }

    #[test]
    fn postclassifier_gradient() {
        let pc = small_pc();
        let mut r = rng::stream(4, "t", 0);
        let crop = random_tensor(8, 8, 3, &mut r);
        let ctx: Vec<f64> = (0..4).map(|_| r.gen()).collect();
        let mut g = pc.params.zeros_like();
        pc.loss_and_grad(&crop, Some(&ctx), 1, &mut g).unwrap();
        let n = fd_check(&pc.params.values, &g, |p| {
            let mut net = pc.clone();
            net.params.values = p.to_vec();
            let mut scratch = net.params.zeros_like();
            net.loss_and_grad(&crop, Some(&ctx), 1, &mut scratch).unwrap()
        });
        assert!(n > pc.params.len() / 2);
    }

    #[test]
    fn context_gradient() {
        let net = ContextNet::new(ContextConfig {
            features: FeatureNetConfig { input_size: 8, channels: [2, 2, 3], reduce_channels: [2, 2] },
            num_classes: 3,
            seed: 2,
        })
        .unwrap();
        let mut r = rng::stream(5, "t", 0);
        let crop = random_tensor(8, 8, 3, &mut r);
        let present = [true, false, true];
        let mut g = net.params.zeros_like();
        net.loss_and_grad(&crop, &present, &mut g).unwrap();
        let n = fd_check(&net.params.values, &g, |p| {
            let mut n2 = net.clone();
            n2.params.values = p.to_vec();
            let mut scratch = n2.params.zeros_like();
            n2.loss_and_grad(&crop, &present, &mut scratch).unwrap()
        });
        assert!(n > net.params.len() / 2);
    }
}
