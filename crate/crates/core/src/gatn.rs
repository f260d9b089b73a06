//! Guided attention transfer: modulation network, guided spatial/channel
//! attention, and the attention-weighted transfer loss.
//!
//! Pretrained features `F_P` pass through the modulation network to give
//! `F_P-tr`. Each guided attention module takes its query from `F_P-tr` and
//! its key/value from the target features `F_T`, row-softmaxes the
//! query-key affinities, aggregates the values and squashes the result
//! through a sigmoid. The resulting weights scale the squared feature
//! difference in the transfer loss.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::model::{BoundConv, Conv2d, FeatureMap};
use crate::rng::{Rng, SeedStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default channel reduction for spatial-mode query/key projections.
pub const DEFAULT_REDUCTION: usize = 8;

/// How the modulation network starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauInit {
    /// Centre-tap identity kernels plus small seeded noise.
    NearIdentity,
    /// Exact identity: output equals input for nonnegative feature maps.
    Identity,
    /// He-uniform random kernels.
    Random,
}

/// Four same-size 3x3 convolutions, `C -> C`, ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationNetwork {
    pub layers: [Conv2d; 4],
}

fn identity_conv(c: usize) -> Conv2d {
    let mut conv = Conv2d::zeros(c, c, 3, 1);
    for ch in 0..c {
        conv.weight.data_mut()[((ch * c + ch) * 3 + 1) * 3 + 1] = 1.0;
    }
    conv
}

impl ModulationNetwork {
    pub fn new(channels: usize, init: TauInit, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(config_err!("modulation network needs at least one channel"));
        }
        let make = |rng: &mut Rng| match init {
            TauInit::Identity => identity_conv(channels),
            TauInit::NearIdentity => {
                let mut conv = identity_conv(channels);
                let scale = 0.01 / libm::sqrt((channels * 9) as f64);
                for w in conv.weight.data_mut() {
                    *w += rng.gen_range(-scale..scale);
                }
                conv
            }
            TauInit::Random => Conv2d::new(channels, channels, 3, 1, rng),
        };
        Ok(Self { layers: [make(rng), make(rng), make(rng), make(rng)] })
    }

    pub fn zeros(channels: usize) -> Self {
        let z = || Conv2d::zeros(channels, channels, 3, 1);
        Self { layers: [z(), z(), z(), z()] }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> [BoundConv; 4] {
        [
            self.layers[0].bind(tape, needs_grad),
            self.layers[1].bind(tape, needs_grad),
            self.layers[2].bind(tape, needs_grad),
            self.layers[3].bind(tape, needs_grad),
        ]
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Applies the modulation network on a tape.
pub fn apply_modulation(tape: &mut Tape, layers: &[BoundConv; 4], f_p: Var) -> Result<Var> {
    let channels = tape.value(layers[0].weight).shape()[1];
    let fs = tape.value(f_p).shape();
    if fs.len() != 4 || fs[1] != channels {
        return Err(config_err!("modulation network expects {channels} channels, got {:?}", fs));
    }
    let mut h = f_p;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.apply(tape, h)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// `F_P -> F_P-tr`, shape preserving.
pub fn modulate(tau: &ModulationNetwork, f_p: &FeatureMap) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let layers = tau.bind(&mut tape, false);
    let x = tape.constant(f_p.data().clone());
    let y = apply_modulation(&mut tape, &layers, x)?;
    FeatureMap::new(tape.value(y).clone(), f_p.layer_tag())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Tokens are the `H*W` positions.
    Spatial,
    /// Tokens are the `C` channels.
    Channel,
}

/// Query/key/value 1x1 projections for one guided attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedAttentionModule {
    pub mode: AttentionMode,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
}

impl GuidedAttentionModule {
    /// Spatial mode projects query/key to `max(1, C / reduction)` channels;
    /// channel mode keeps `C`.
    pub fn new(mode: AttentionMode, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(config_err!("attention needs positive channels and reduction ratio"));
        }
        let qk = match mode {
            AttentionMode::Spatial => (channels / reduction).max(1),
            AttentionMode::Channel => channels,
        };
        Ok(Self {
            mode,
            query: Conv2d::new(channels, qk, 1, 0, rng),
            key: Conv2d::new(channels, qk, 1, 0, rng),
            value: Conv2d::new(channels, channels, 1, 0, rng),
        })
    }

    /// All three projections set to the identity map.
    pub fn identity(mode: AttentionMode, channels: usize) -> Self {
        let eye = || {
            let mut c = Conv2d::zeros(channels, channels, 1, 0);
            for ch in 0..channels {
                c.weight.data_mut()[ch * channels + ch] = 1.0;
            }
            c
        };
        Self { mode, query: eye(), key: eye(), value: eye() }
    }

    pub fn channels(&self) -> usize {
        self.value.in_channels()
    }

    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> BoundAttention {
        BoundAttention {
            mode: self.mode,
            query: self.query.bind(tape, needs_grad),
            key: self.key.bind(tape, needs_grad),
            value: self.value.bind(tape, needs_grad),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        [&self.query, &self.key, &self.value].into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.query, &mut self.key, &mut self.value]
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub mode: AttentionMode,
    pub query: BoundConv,
    pub key: BoundConv,
    pub value: BoundConv,
}

/// Tape nodes of one guided attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// Row-softmaxed affinities, `(N, T, T)`.
    pub matrix: Var,
    /// Sigmoid weights shaped like the feature map.
    pub weights: Var,
}

pub fn apply_guided_attention(tape: &mut Tape, module: &BoundAttention, f_p_tr: Var, f_t: Var) -> Result<AttentionVars> {
    let shape = tape.value(f_p_tr).shape().to_vec();
    if shape.len() != 4 || tape.value(f_t).shape() != shape.as_slice() {
        return Err(input_err!(
            "guided attention: F_P-tr {:?} and F_T {:?} must share a 4-D shape",
            shape,
            tape.value(f_t).shape()
        ));
    }
    let channels = tape.value(module.value.weight).shape()[1];
    if shape[1] != channels {
        return Err(config_err!("guided attention expects {channels} channels, got {}", shape[1]));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let q = module.query.apply(tape, f_p_tr)?;
    let k = module.key.apply(tape, f_t)?;
    let v = module.value.apply(tape, f_t)?;
    let qc = tape.value(q).shape()[1];
    let q = tape.reshape(q, &[n, qc, hw])?;
    let k = tape.reshape(k, &[n, qc, hw])?;
    let v = tape.reshape(v, &[n, c, hw])?;
    let (matrix, aggregated) = match module.mode {
        AttentionMode::Spatial => {
            // (HW x C') . (C' x HW) -> HW x HW; out[c, i] = sum_j v[c, j] a[i, j]
            let energy = tape.batch_matmul(q, k, true, false)?;
            let attn = tape.softmax(energy);
            (attn, tape.batch_matmul(v, attn, false, true)?)
        }
        AttentionMode::Channel => {
            // (C x HW) . (HW x C) -> C x C; out[c, i] = sum_d a[c, d] v[d, i]
            let energy = tape.batch_matmul(q, k, false, true)?;
            let attn = tape.softmax(energy);
            (attn, tape.batch_matmul(attn, v, false, false)?)
        }
    };
    let aggregated = tape.reshape(aggregated, &shape)?;
    Ok(AttentionVars { matrix, weights: tape.sigmoid(aggregated) })
}

/// Elementwise attention weights in `(0, 1)`, shaped like the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRepresentation {
    pub weights: Tensor,
}

fn eval_attention(module: &GuidedAttentionModule, f_p_tr: &FeatureMap, f_t: &FeatureMap) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = module.bind(&mut tape, false);
    let q = tape.constant(f_p_tr.data().clone());
    let kv = tape.constant(f_t.data().clone());
    let vars = apply_guided_attention(&mut tape, &bound, q, kv)?;
    Ok((tape.value(vars.matrix).clone(), tape.value(vars.weights).clone()))
}

pub fn guided_attention(
    module: &GuidedAttentionModule,
    f_p_tr: &FeatureMap,
    f_t: &FeatureMap,
) -> Result<AttentionRepresentation> {
    eval_attention(module, f_p_tr, f_t).map(|(_, weights)| AttentionRepresentation { weights })
}

/// The internal row-softmaxed attention matrix, `(N, T, T)`.
pub fn attention_matrix(module: &GuidedAttentionModule, f_p_tr: &FeatureMap, f_t: &FeatureMap) -> Result<Tensor> {
    eval_attention(module, f_p_tr, f_t).map(|(m, _)| m)
}

/// `mean(A_GSA * (F_P-tr - F_T)^2) + mean(A_GCA * (F_P-tr - F_T)^2)` on a tape.
pub fn apply_transfer_loss(tape: &mut Tape, f_p_tr: Var, f_t: Var, a_gsa: Var, a_gca: Var) -> Result<Var> {
    let shape = tape.value(f_p_tr).shape();
    for v in [f_t, a_gsa, a_gca] {
        if tape.value(v).shape() != shape {
            return Err(input_err!("transfer loss: shape {:?} vs {:?}", tape.value(v).shape(), shape));
        }
    }
    let diff = tape.sub(f_p_tr, f_t)?;
    let sq = tape.square(diff);
    let spatial = tape.mul(a_gsa, sq)?;
    let spatial = tape.mean(spatial);
    let channel = tape.mul(a_gca, sq)?;
    let channel = tape.mean(channel);
    tape.add(spatial, channel)
}

pub fn transfer_loss(
    f_p_tr: &FeatureMap,
    f_t: &FeatureMap,
    a_gsa: &AttentionRepresentation,
    a_gca: &AttentionRepresentation,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [f_p_tr.data(), f_t.data(), &a_gsa.weights, &a_gca.weights].map(|t| tape.constant(t.clone()));
    let loss = apply_transfer_loss(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(loss).item())
}

/// Modulation network plus the two guided attention branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Gatn {
    pub tau: ModulationNetwork,
    pub gsa: GuidedAttentionModule,
    pub gca: GuidedAttentionModule,
}

#[derive(Debug, Clone)]
pub struct BoundGatn {
    pub tau: [BoundConv; 4],
    pub gsa: BoundAttention,
    pub gca: BoundAttention,
}

/// Tape nodes produced by one GATN pass.
#[derive(Debug, Clone, Copy)]
pub struct GatnVars {
    pub loss: Var,
    pub f_p_tr: Var,
    pub a_gsa: Var,
    pub a_gca: Var,
}

impl Gatn {
    pub fn new(channels: usize, tau_init: TauInit, seed: u64) -> Result<Self> {
        let streams = SeedStream::new(seed);
        Ok(Self {
            tau: ModulationNetwork::new(channels, tau_init, &mut streams.child("tau").rng())?,
            gsa: GuidedAttentionModule::new(
                AttentionMode::Spatial,
                channels,
                DEFAULT_REDUCTION,
                &mut streams.child("gsa").rng(),
            )?,
            gca: GuidedAttentionModule::new(AttentionMode::Channel, channels, 1, &mut streams.child("gca").rng())?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, needs_grad: bool) -> BoundGatn {
        BoundGatn { tau: self.tau.bind(tape, needs_grad), gsa: self.gsa.bind(tape, needs_grad), gca: self.gca.bind(tape, needs_grad) }
    }

    /// Runs the full composition on a tape. With `use_modulation == false`
    /// the modulation network is bypassed and `F_P-tr = F_P`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundGatn, f_p: Var, f_t: Var, use_modulation: bool) -> Result<GatnVars> {
        let f_p_tr = if use_modulation { apply_modulation(tape, &bound.tau, f_p)? } else { f_p };
        let a_gsa = apply_guided_attention(tape, &bound.gsa, f_p_tr, f_t)?.weights;
        let a_gca = apply_guided_attention(tape, &bound.gca, f_p_tr, f_t)?.weights;
        let loss = apply_transfer_loss(tape, f_p_tr, f_t, a_gsa, a_gca)?;
        Ok(GatnVars { loss, f_p_tr, a_gsa, a_gca })
    }

    /// Parameters in a fixed order: tau layers, then GSA and GCA projections.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.tau.parameters();
        p.extend(self.gsa.parameters());
        p.extend(self.gca.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.tau.parameters_mut();
        p.extend(self.gsa.parameters_mut());
        p.extend(self.gca.parameters_mut());
        p
    }

    pub fn bound_vars(bound: &BoundGatn) -> Vec<Var> {
        let mut v: Vec<Var> = bound.tau.iter().flat_map(|l| [l.weight, l.bias]).collect();
        for a in [&bound.gsa, &bound.gca] {
            for l in [&a.query, &a.key, &a.value] {
                v.push(l.weight);
                v.push(l.bias);
            }
        }
        v
    }

    /// Parameter names matching [`Self::parameters`] order.
    pub fn parameter_names() -> Vec<alloc::string::String> {
        let mut names = Vec::new();
        for i in 0..4 {
            names.push(alloc::format!("gatn.tau.layer{i}.weight"));
            names.push(alloc::format!("gatn.tau.layer{i}.bias"));
        }
        for branch in ["gsa", "gca"] {
            for proj in ["query", "key", "value"] {
                names.push(alloc::format!("gatn.{branch}.{proj}.weight"));
                names.push(alloc::format!("gatn.{branch}.{proj}.bias"));
            }
        }
        names
    }
}

/// Every intermediate of a GATN pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GatnOutput {
    pub transfer_loss: f64,
    pub a_gsa: AttentionRepresentation,
    pub a_gca: AttentionRepresentation,
    pub f_p_tr: FeatureMap,
}

pub fn gatn_forward(
    tau: &ModulationNetwork,
    gsa: &GuidedAttentionModule,
    gca: &GuidedAttentionModule,
    f_p: &FeatureMap,
    f_t: &FeatureMap,
) -> Result<GatnOutput> {
    let f_p_tr = modulate(tau, f_p)?;
    let a_gsa = guided_attention(gsa, &f_p_tr, f_t)?;
    let a_gca = guided_attention(gca, &f_p_tr, f_t)?;
    let transfer_loss = transfer_loss(&f_p_tr, f_t, &a_gsa, &a_gca)?;
    Ok(GatnOutput { transfer_loss, a_gsa, a_gca, f_p_tr })
}
