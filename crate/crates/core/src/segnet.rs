//! A tiny encoder/decoder segmentation network.
//!
//! Encoder: four 3x3 convolutions (stride 1, padding 1), each followed by a
//! ReLU, with a 2x2 max-pool after the first and the second. The last ReLU
//! keeps every feature non-negative. Decoder: a 1x1 convolution to class
//! logits followed by a nearest 4x upsample.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Spatial reduction between the input image and the feature grid.
pub const ENCODER_DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub num_classes: usize,
    pub feature_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Output widths of the first three encoder convolutions.
    pub hidden_widths: Vec<usize>,
    /// Upper clip of the final encoder activation, `min(relu(x), cap)`.
    pub feature_cap: Option<f64>,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            num_classes: 5,
            feature_channels: 32,
            input_height: 64,
            input_width: 64,
            hidden_widths: vec![8, 16, 32],
            feature_cap: Some(6.0),
            seed: 0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(String::from(s)));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.feature_channels < self.num_classes {
            return bad("feature_channels must be at least num_classes");
        }
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % ENCODER_DOWNSAMPLE != 0
            || self.input_width % ENCODER_DOWNSAMPLE != 0
        {
            return bad("input size must be a positive multiple of 4");
        }
        if self.hidden_widths.len() != 3 || self.hidden_widths.contains(&0) {
            return bad("hidden_widths must list three positive widths");
        }
        if self.feature_cap.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("feature_cap must be positive and finite");
        }
        if self.num_classes >= crate::labels::IGNORE_LABEL as usize {
            return bad("num_classes must fit an 8-bit label map");
        }
        Ok(())
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / ENCODER_DOWNSAMPLE
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / ENCODER_DOWNSAMPLE
    }

    /// Shapes of every parameter tensor, in storage order: four encoder
    /// (kernel, bias) pairs, then the classifier kernel and bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let widths = [3, self.hidden_widths[0], self.hidden_widths[1], self.hidden_widths[2], self.feature_channels];
        let mut shapes = Vec::with_capacity(10);
        for pair in widths.windows(2) {
            shapes.push(vec![pair[1], pair[0], 3, 3]);
            shapes.push(vec![pair[1]]);
        }
        shapes.push(vec![self.num_classes, self.feature_channels, 1, 1]);
        shapes.push(vec![self.num_classes]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// All weights of a [`SegNetConfig`] network, in `param_shapes` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNetParams {
    tensors: Vec<Tensor>,
}

impl SegNetParams {
    /// Kaiming-uniform kernels (variance `2 / fan_in`) and zero biases,
    /// drawn from the `init` stream of the config seed.
    pub fn init(cfg: &SegNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, "init");
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = libm::sqrt(6.0 / fan_in);
                let numel = shape.iter().product();
                let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Ok(SegNetParams { tensors })
    }

    pub fn from_tensors(cfg: &SegNetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = cfg.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(shape_mismatch("segnet params", &[shapes.len()], &[tensors.len()]));
        }
        for (s, t) in shapes.iter().zip(&tensors) {
            if s.as_slice() != t.shape() {
                return Err(shape_mismatch("segnet params", s, t.shape()));
            }
        }
        Ok(SegNetParams { tensors })
    }

    pub fn from_flat(cfg: &SegNetConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != cfg.param_count() {
            return Err(shape_mismatch("segnet params", &[cfg.param_count()], &[flat.len()]));
        }
        let mut offset = 0;
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let t = Tensor::from_parts(shape, flat[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect();
        Ok(SegNetParams { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Records the parameters on `graph`.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), requires_grad)).collect(),
        }
    }
}

/// Parameters recorded on a graph, in `param_shapes` order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradients of every parameter after a backward pass.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v))))
            .collect()
    }
}

/// The network `S = C o F` for one configuration.
#[derive(Debug, Clone)]
pub struct SegNet {
    cfg: SegNetConfig,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SegNet { cfg })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    fn check_input(&self, graph: &Graph, x: Var) -> Result<()> {
        let expected = [3, self.cfg.input_height, self.cfg.input_width];
        if graph.shape(x) != expected {
            return Err(shape_mismatch("encode", &expected, graph.shape(x)));
        }
        Ok(())
    }

    /// Feature extractor `F`: `[3,H,W]` image to non-negative `[D,H/4,W/4]`
    /// features.
    pub fn encode(&self, graph: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(graph, x)?;
        let p = params.vars();
        let mut h = x;
        for layer in 0..4 {
            h = graph.conv2d(h, p[2 * layer], 1, 1)?;
            h = graph.channel_bias(h, p[2 * layer + 1])?;
            h = graph.relu(h);
            if layer < 2 {
                h = graph.max_pool2(h)?;
            }
        }
        Ok(match self.cfg.feature_cap {
            Some(cap) => graph.clamp(h, 0.0, cap),
            None => h,
        })
    }

    /// Classifier `C`: features to `[|C|,H,W]` logits.
    pub fn decode(&self, graph: &mut Graph, params: &BoundParams, features: Var) -> Result<Var> {
        let expected = [self.cfg.feature_channels, self.cfg.feature_height(), self.cfg.feature_width()];
        if graph.shape(features) != expected {
            return Err(shape_mismatch("decode", &expected, graph.shape(features)));
        }
        let p = params.vars();
        let logits = graph.conv2d(features, p[8], 1, 0)?;
        let logits = graph.channel_bias(logits, p[9])?;
        graph.upsample_nearest(logits, ENCODER_DOWNSAMPLE)
    }

    /// Gradient-free forward pass returning `(features, logits)`.
    pub fn infer(&self, params: &SegNetParams, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph, false);
        let x = graph.constant(image.clone());
        let f = self.encode(&mut graph, &bound, x)?;
        let s = self.decode(&mut graph, &bound, f)?;
        Ok((graph.value(f).clone(), graph.value(s).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::softmax_data;

    fn small_cfg() -> SegNetConfig {
        SegNetConfig {
            input_height: 16,
            input_width: 12,
            feature_channels: 6,
            hidden_widths: vec![3, 4, 5],
            ..SegNetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SegNetConfig::default().validate().is_ok());
        let mut cfg = SegNetConfig::default();
        cfg.input_height = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = SegNetConfig::default();
        cfg.feature_channels = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = SegNetConfig::default();
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_feature_shape() {
        let cfg = SegNetConfig::default();
        let net = SegNet::new(cfg.clone()).unwrap();
        let params = SegNetParams::init(&cfg).unwrap();
        let img = Tensor::full(&[3, 64, 64], 0.5);
        let (f, s) = net.infer(&params, &img).unwrap();
        assert_eq!(f.shape(), &[32, 16, 16]);
        assert_eq!(s.shape(), &[5, 64, 64]);
        assert!(f.min() >= 0.0);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let cfg = small_cfg();
        let net = SegNet::new(cfg.clone()).unwrap();
        let params = SegNetParams::init(&cfg).unwrap();
        let (f, _) = net.infer(&params, &Tensor::zeros(&[3, 16, 12])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_decode_uniform() {
        let cfg = small_cfg();
        let net = SegNet::new(cfg.clone()).unwrap();
        let zeros = SegNetParams::from_flat(&cfg, &vec![0.0; cfg.param_count()]).unwrap();
        let (_, s) = net.infer(&zeros, &Tensor::full(&[3, 16, 12], 0.3)).unwrap();
        let p = softmax_data(&s, 0, false);
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let cfg = small_cfg();
        let net = SegNet::new(cfg.clone()).unwrap();
        let params = SegNetParams::init(&cfg).unwrap();
        assert!(matches!(
            net.infer(&params, &Tensor::zeros(&[3, 16, 16])),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let f = g.constant(Tensor::zeros(&[5, 4, 3]));
        assert!(net.decode(&mut g, &bound, f).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = SegNetConfig::default();
        let a = SegNetParams::init(&cfg).unwrap();
        assert_eq!(a, SegNetParams::init(&cfg).unwrap());
        let other = SegNetConfig { seed: 1, ..cfg.clone() };
        assert_ne!(a, SegNetParams::init(&other).unwrap());
        assert_eq!(a.len(), cfg.param_count());
        assert!(a.all_finite());
    }

    #[test]
    fn kaiming_variance() {
        let cfg = SegNetConfig::default();
        let params = SegNetParams::init(&cfg).unwrap();
        for t in params.tensors().iter().filter(|t| t.rank() == 4) {
            let s = t.shape();
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let target = 2.0 / fan_in;
            assert!(var < 3.0 * target && var > target / 3.0, "var {var} target {target}");
        }
    }

    #[test]
    fn flat_roundtrip() {
        let cfg = small_cfg();
        let params = SegNetParams::init(&cfg).unwrap();
        let back = SegNetParams::from_flat(&cfg, &params.flat()).unwrap();
        assert_eq!(params, back);
        assert!(SegNetParams::from_flat(&cfg, &[0.0; 3]).is_err());
    }
}
