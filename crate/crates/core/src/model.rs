//! Encoder / task-head network decomposition.
//!
//! A [`NetworkSplit`] is a small convolutional encoder producing spatial
//! feature maps, followed by a task head that pools those maps onto a 2x2 grid
//! and applies a linear classifier. The pretrained (source) network is kept
//! frozen; the target network starts as a copy of it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::rng::{Rng, SeedStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Grid the task head pools feature maps onto before the linear layer.
pub const HEAD_POOL: (usize, usize) = (2, 2);

/// Encoder activations `(N, C, H, W)` tagged with the layer they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    layer_tag: String,
}

impl FeatureMap {
    pub fn new(data: Tensor, layer_tag: impl Into<String>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(input_err!("feature map must be (N, C, H, W) with all dims >= 1, got {:?}", s));
        }
        if !data.is_finite() {
            return Err(input_err!("feature map contains non-finite values"));
        }
        Ok(Self { data, layer_tag: layer_tag.into() })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Square-kernel, stride-1 convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = libm::sqrt(6.0 / fan_in);
        Self {
            weight: Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[out_ch]),
            padding,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> BoundConv {
        BoundConv {
            weight: tape.leaf(self.weight.clone(), needs_grad),
            bias: tape.leaf(self.bias.clone(), needs_grad),
            padding: self.padding,
        }
    }
}

/// A [`Conv2d`] whose parameters live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
}

impl BoundConv {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), self.padding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(in_features as f64);
        Self {
            weight: Tensor::from_fn(&[out_features, in_features], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::from_fn(&[out_features], |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Which parameters of a network should receive gradients on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    None,
    Head,
    All,
}

/// Network parameters bound to a tape, in [`NetworkSplit::named_parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    pub blocks: Vec<BoundConv>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BoundNetwork {
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect();
        v.push(self.head_weight);
        v.push(self.head_bias);
        v
    }

    pub fn head_vars(&self) -> [Var; 2] {
        [self.head_weight, self.head_bias]
    }
}

/// Architecture of the desk-scale CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub in_channels: usize,
    pub width: usize,
    pub num_classes: usize,
}

/// A classifier decomposed into a convolutional feature encoder and a task head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSplit {
    /// Conv blocks, each followed by ReLU and 2x2 max pooling.
    pub encoder: Vec<Conv2d>,
    pub head: Linear,
    num_classes: usize,
    frozen: bool,
}

/// Builds a two-block CNN: `conv3x3(in -> w) . relu . pool2`, then
/// `conv3x3(w -> 2w) . relu . pool2`; head pools to 2x2 and maps `8w -> K`.
pub fn build_small_cnn(num_classes: usize, width: usize, seed: u64) -> Result<NetworkSplit> {
    build_cnn(CnnShape { in_channels: 1, width, num_classes }, seed)
}

pub fn build_cnn(shape: CnnShape, seed: u64) -> Result<NetworkSplit> {
    if shape.num_classes < 2 {
        return Err(config_err!("num_classes must be >= 2, got {}", shape.num_classes));
    }
    if shape.width == 0 || shape.in_channels == 0 {
        return Err(config_err!("width and in_channels must be positive"));
    }
    let streams = SeedStream::new(seed);
    let mut rng = streams.child("encoder").rng();
    let w = shape.width;
    let encoder = alloc::vec![
        Conv2d::new(shape.in_channels, w, 3, 1, &mut rng),
        Conv2d::new(w, 2 * w, 3, 1, &mut rng),
    ];
    let head = Linear::new(2 * w * HEAD_POOL.0 * HEAD_POOL.1, shape.num_classes, &mut streams.child("head").rng());
    Ok(NetworkSplit { encoder, head, num_classes: shape.num_classes, frozen: false })
}

/// Returns a frozen copy: same function, no parameter updates accepted.
pub fn freeze(net: &NetworkSplit) -> NetworkSplit {
    let mut frozen = net.clone();
    frozen.frozen = true;
    frozen
}

/// Target network initialized from the source. The encoder is always copied;
/// the head is copied when the class counts agree and freshly initialized
/// from `seed` otherwise.
pub fn init_target_from_source(source: &NetworkSplit, target_num_classes: usize, seed: u64) -> Result<NetworkSplit> {
    if target_num_classes < 2 {
        return Err(config_err!("target_num_classes must be >= 2"));
    }
    let head = if target_num_classes == source.num_classes {
        source.head.clone()
    } else {
        let mut rng = SeedStream::new(seed).child("target-head").rng();
        Linear::new(source.head.in_features(), target_num_classes, &mut rng)
    };
    Ok(NetworkSplit { encoder: source.encoder.clone(), head, num_classes: target_num_classes, frozen: false })
}

/// Encoder feature map for `batch`.
pub fn forward_features(net: &NetworkSplit, batch: &Tensor) -> Result<FeatureMap> {
    net.forward_features(batch)
}

impl NetworkSplit {
    /// Reassembles a network from parameters in [`Self::named_parameters`] order.
    pub fn from_parts(encoder: Vec<Conv2d>, head: Linear) -> Result<Self> {
        if encoder.is_empty() {
            return Err(config_err!("encoder needs at least one conv block"));
        }
        for pair in encoder.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(config_err!("encoder block channel mismatch"));
            }
        }
        let feat = encoder.last().map_or(0, Conv2d::out_channels) * HEAD_POOL.0 * HEAD_POOL.1;
        if head.in_features() != feat {
            return Err(config_err!("head expects {} features, encoder yields {feat}", head.in_features()));
        }
        let num_classes = head.out_features();
        if num_classes < 2 {
            return Err(config_err!("num_classes must be >= 2"));
        }
        Ok(Self { encoder, head, num_classes, frozen: false })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn in_channels(&self) -> usize {
        self.encoder[0].in_channels()
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.last().map_or(0, Conv2d::out_channels)
    }

    pub fn feature_layer_tag(&self) -> String {
        format!("encoder.block{}", self.encoder.len() - 1)
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.block{i}.weight"), &block.weight));
            out.push((format!("encoder.block{i}.bias"), &block.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable parameters in [`Self::named_parameters`] order, or `None` when frozen.
    pub fn parameters_mut(&mut self) -> Option<Vec<&mut Tensor>> {
        if self.frozen {
            return None;
        }
        let mut out: Vec<&mut Tensor> = Vec::new();
        for block in &mut self.encoder {
            out.push(&mut block.weight);
            out.push(&mut block.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        Some(out)
    }

    /// Copy with the `index`-th parameter (in [`Self::named_parameters`]
    /// order) replaced. Frozen status is kept.
    pub fn with_parameter(&self, index: usize, value: Tensor) -> Result<Self> {
        let mut copy = self.clone();
        let frozen = copy.frozen;
        copy.frozen = false;
        let mut params = copy.parameters_mut().unwrap_or_default();
        let slot = params.get_mut(index).ok_or_else(|| input_err!("no parameter at index {index}"))?;
        if slot.shape() != value.shape() {
            return Err(input_err!("parameter {index}: shape {:?} vs {:?}", slot.shape(), value.shape()));
        }
        **slot = value;
        drop(params);
        copy.frozen = frozen;
        Ok(copy)
    }

    /// All parameters flattened, for snapshot comparisons.
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.named_parameters().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, subset: ParamSubset) -> BoundNetwork {
        let enc_grad = subset == ParamSubset::All;
        let head_grad = subset != ParamSubset::None;
        BoundNetwork {
            blocks: self.encoder.iter().map(|c| c.bind(tape, enc_grad)).collect(),
            head_weight: tape.leaf(self.head.weight.clone(), head_grad),
            head_bias: tape.leaf(self.head.bias.clone(), head_grad),
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let min_side = 1 << self.encoder.len();
        if s.len() != 4 || s[0] == 0 || s[1] != self.in_channels() || s[2] < min_side * 2 || s[3] < min_side * 2 {
            return Err(input_err!(
                "expected image batch (N>=1, {}, >={m}, >={m}), got {:?}",
                self.in_channels(),
                s,
                m = min_side * 2
            ));
        }
        Ok(())
    }

    /// Encoder on a tape; returns the feature-map node.
    pub fn encode(&self, tape: &mut Tape, bound: &BoundNetwork, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for block in &bound.blocks {
            h = block.apply(tape, h)?;
            h = tape.relu(h);
            h = tape.max_pool2(h)?;
        }
        Ok(h)
    }

    /// Task head on a tape: pooled features to logits.
    pub fn classify(&self, tape: &mut Tape, bound: &BoundNetwork, features: Var) -> Result<Var> {
        let n = tape.value(features).shape()[0];
        let pooled = tape.adaptive_avg_pool(features, HEAD_POOL.0, HEAD_POOL.1)?;
        let flat_len = tape.value(pooled).numel() / n;
        let flat = tape.reshape(pooled, &[n, flat_len])?;
        tape.linear(flat, bound.head_weight, Some(bound.head_bias))
    }

    pub fn forward_features(&self, batch: &Tensor) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, ParamSubset::None);
        let x = tape.constant(batch.clone());
        let f = self.encode(&mut tape, &bound, x)?;
        FeatureMap::new(tape.value(f).clone(), self.feature_layer_tag())
    }

    /// Logits `(N, K)` for an image batch.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, ParamSubset::None);
        let x = tape.constant(batch.clone());
        let f = self.encode(&mut tape, &bound, x)?;
        let l = self.classify(&mut tape, &bound, f)?;
        Ok(tape.value(l).clone())
    }

    /// Feature maps and logits from one pass.
    pub fn features_and_logits(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, ParamSubset::None);
        let x = tape.constant(batch.clone());
        let f = self.encode(&mut tape, &bound, x)?;
        let l = self.classify(&mut tape, &bound, f)?;
        Ok((tape.value(f).clone(), tape.value(l).clone()))
    }

    pub fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(crate::tape::softmax_rows(&self.logits(batch)?))
    }
}
