//! Composite layers: conv blocks, squeeze-and-excitation, convolutional
//! block attention (CBAM), the feature-fusion decoder unit, and the
//! interesting-change-region mask block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{
    add, avgpool2d, channel_reduce_max, channel_reduce_mean, concat_channels, conv2d,
    conv_transpose2d, global_avg_pool, global_max_pool, linear, maxpool2d, mul, one_minus, relu,
    relu6, scale_channels, scale_spatial, sigmoid,
};
use crate::tensor::{batchnorm2d, BnLayer, Dims, Elem, Mode, Parameter, Tape, Tensor};
use crate::DatasetId;

/// How the mask block's MP/AP pooling pair is realized: per-pixel channel
/// reductions (default) or 3x3 stride-1 spatial window pooling.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Channel,
    Window,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    None,
    Relu,
    Relu6,
}

/// Normalization selector threaded through block forwards: which dataset's
/// bank entry to use and whether batch statistics are live.
#[derive(Clone, Copy)]
pub struct BnSelect<'a> {
    pub dataset: &'a DatasetId,
    pub mode: Mode,
}

const SE_RATIO: usize = 16;
const SE_MIN_HIDDEN: usize = 4;

fn se_hidden(channels: usize) -> usize {
    (channels / SE_RATIO).max(SE_MIN_HIDDEN)
}

/// Kaiming-uniform fan-in initialization for a conv weight (c_out, c_in, k, k).
pub fn init_conv_weight<E: Elem>(
    rng: &mut impl Rng,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
) -> Parameter<E> {
    let fan_in = (c_in * kh * kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let dims = Dims::new(c_out, c_in, kh, kw);
    let data = (0..dims.count()).map(|_| E::from_f(rng.gen_range(-bound..bound))).collect();
    Parameter::new(Tensor::new(dims, data).expect("init dims"))
}

fn init_linear_weight<E: Elem>(rng: &mut impl Rng, out: usize, features: usize) -> Parameter<E> {
    init_conv_weight(rng, out, features, 1, 1)
}

fn zero_bias<E: Elem>(channels: usize) -> Parameter<E> {
    Parameter::new(Tensor::zeros(Dims::new(1, channels, 1, 1)))
}

// ── conv block ───────────────────────────────────────────────────────

/// Convolution with optional normalization and activation.
pub struct ConvBlock<E: Elem> {
    weight: Parameter<E>,
    bias: Option<Parameter<E>>,
    bn: Option<BnLayer<E>>,
    act: Activation,
    stride: usize,
    padding: usize,
}

impl<E: Elem> ConvBlock<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        norm: bool,
        act: Activation,
    ) -> Self {
        ConvBlock {
            weight: init_conv_weight(rng, out_c, in_c, k, k),
            bias: if norm { None } else { Some(zero_bias(out_c)) },
            bn: if norm { Some(BnLayer::new(out_c)) } else { None },
            act,
            stride,
            padding,
        }
    }

    /// Conv + norm + relu, the standard encoder/decoder unit.
    pub fn bn_relu(rng: &mut impl Rng, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Self::new(rng, in_c, out_c, k, stride, k / 2, true, Activation::Relu)
    }

    /// Plain biased conv; used for prediction heads.
    pub fn head(rng: &mut impl Rng, in_c: usize, out_c: usize, k: usize) -> Self {
        Self::new(rng, in_c, out_c, k, 1, k / 2, false, Activation::None)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims().n
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>, sel: BnSelect) -> Result<Tensor<E>> {
        let w = tape.watch(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.watch(b));
        let mut y = conv2d(tape, x, &w, b.as_ref(), self.stride, self.padding)?;
        if let Some(bn) = &self.bn {
            y = batchnorm2d(tape, &y, bn, sel.dataset, sel.mode)?;
        }
        match self.act {
            Activation::None => Ok(y),
            Activation::Relu => relu(tape, &y),
            Activation::Relu6 => relu6(tape, &y),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }

    pub fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BnLayer<E>)>) {
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn"), bn));
        }
    }

    pub fn deep_clone(&self) -> Self {
        ConvBlock {
            weight: self.weight.deep_clone(),
            bias: self.bias.as_ref().map(|b| b.deep_clone()),
            bn: self.bn.as_ref().map(|bn| bn.deep_clone()),
            act: self.act,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

// ── squeeze-and-excitation ───────────────────────────────────────────

/// Channel gate: global average pool, two-layer bottleneck, sigmoid scale.
pub struct SeBlock<E: Elem> {
    w1: Parameter<E>,
    b1: Parameter<E>,
    w2: Parameter<E>,
    b2: Parameter<E>,
}

impl<E: Elem> SeBlock<E> {
    pub fn new(rng: &mut impl Rng, channels: usize) -> Self {
        let hidden = se_hidden(channels);
        SeBlock {
            w1: init_linear_weight(rng, hidden, channels),
            b1: zero_bias(hidden),
            w2: init_linear_weight(rng, channels, hidden),
            b2: zero_bias(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let squeezed = global_avg_pool(tape, x)?;
        let w1 = tape.watch(&self.w1);
        let b1 = tape.watch(&self.b1);
        let h = linear(tape, &squeezed, &w1, Some(&b1))?;
        let h = relu(tape, &h)?;
        let w2 = tape.watch(&self.w2);
        let b2 = tape.watch(&self.b2);
        let gate = linear(tape, &h, &w2, Some(&b2))?;
        let gate = sigmoid(tape, &gate)?;
        scale_channels(tape, x, &gate)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }

    pub fn deep_clone(&self) -> Self {
        SeBlock {
            w1: self.w1.deep_clone(),
            b1: self.b1.deep_clone(),
            w2: self.w2.deep_clone(),
            b2: self.b2.deep_clone(),
        }
    }
}

// ── CBAM ─────────────────────────────────────────────────────────────

/// Channel attention (shared MLP over global max/avg pools) followed by
/// spatial attention (7x7 conv over channelwise max/mean maps).
pub struct CbamBlock<E: Elem> {
    mlp_w1: Parameter<E>,
    mlp_b1: Parameter<E>,
    mlp_w2: Parameter<E>,
    mlp_b2: Parameter<E>,
    spatial_w: Parameter<E>,
    spatial_b: Parameter<E>,
}

impl<E: Elem> CbamBlock<E> {
    pub fn new(rng: &mut impl Rng, channels: usize) -> Self {
        let hidden = se_hidden(channels);
        CbamBlock {
            mlp_w1: init_linear_weight(rng, hidden, channels),
            mlp_b1: zero_bias(hidden),
            mlp_w2: init_linear_weight(rng, channels, hidden),
            mlp_b2: zero_bias(channels),
            spatial_w: init_conv_weight(rng, 1, 2, 7, 7),
            spatial_b: zero_bias(1),
        }
    }

    fn mlp(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w1 = tape.watch(&self.mlp_w1);
        let b1 = tape.watch(&self.mlp_b1);
        let h = linear(tape, x, &w1, Some(&b1))?;
        let h = relu(tape, &h)?;
        let w2 = tape.watch(&self.mlp_w2);
        let b2 = tape.watch(&self.mlp_b2);
        linear(tape, &h, &w2, Some(&b2))
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        // channel attention
        let avg = global_avg_pool(tape, x)?;
        let max = global_max_pool(tape, x)?;
        let a = self.mlp(tape, &avg)?;
        let m = self.mlp(tape, &max)?;
        let sum = add(tape, &a, &m)?;
        let gate = sigmoid(tape, &sum)?;
        let xc = scale_channels(tape, x, &gate)?;
        // spatial attention
        let cmax = channel_reduce_max(tape, &xc)?;
        let cmean = channel_reduce_mean(tape, &xc)?;
        let maps = concat_channels(tape, &[cmax, cmean])?;
        let sw = tape.watch(&self.spatial_w);
        let sb = tape.watch(&self.spatial_b);
        let logits = conv2d(tape, &maps, &sw, Some(&sb), 1, 3)?;
        let sgate = sigmoid(tape, &logits)?;
        scale_spatial(tape, &xc, &sgate)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        out.push((format!("{prefix}.mlp_w1"), self.mlp_w1.clone()));
        out.push((format!("{prefix}.mlp_b1"), self.mlp_b1.clone()));
        out.push((format!("{prefix}.mlp_w2"), self.mlp_w2.clone()));
        out.push((format!("{prefix}.mlp_b2"), self.mlp_b2.clone()));
        out.push((format!("{prefix}.spatial_w"), self.spatial_w.clone()));
        out.push((format!("{prefix}.spatial_b"), self.spatial_b.clone()));
    }

    pub fn deep_clone(&self) -> Self {
        CbamBlock {
            mlp_w1: self.mlp_w1.deep_clone(),
            mlp_b1: self.mlp_b1.deep_clone(),
            mlp_w2: self.mlp_w2.deep_clone(),
            mlp_b2: self.mlp_b2.deep_clone(),
            spatial_w: self.spatial_w.deep_clone(),
            spatial_b: self.spatial_b.deep_clone(),
        }
    }

    #[cfg(test)]
    pub(crate) fn saturate_gates(&self) {
        // Zero the last layer of each attention path and push its bias high
        // so both gates sit at sigmoid(+50) within float precision of 1.
        for p in [&self.mlp_w2, &self.spatial_w] {
            p.set_value(Tensor::zeros(p.dims()));
        }
        for p in [&self.mlp_b2, &self.spatial_b] {
            p.set_value(Tensor::full(p.dims(), E::from_f(50.0)));
        }
    }
}

// ── feature fusion ───────────────────────────────────────────────────

/// Decoder unit: concat skip features (and the previous fused map), attend
/// with CBAM, upsample 2x by transposed conv, then a conv block.
pub struct FfBlock<E: Elem> {
    cbam: CbamBlock<E>,
    up: Parameter<E>,
    conv: ConvBlock<E>,
}

impl<E: Elem> FfBlock<E> {
    /// `in_c` is the total channel count after concatenation; `out_c` is the
    /// fused output width.
    pub fn new(rng: &mut impl Rng, in_c: usize, out_c: usize) -> Self {
        FfBlock {
            cbam: CbamBlock::new(rng, in_c),
            up: init_conv_weight(rng, in_c, out_c, 2, 2),
            conv: ConvBlock::bn_relu(rng, out_c, out_c, 3, 1),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        prev: Option<&Tensor<E>>,
        f1: &Tensor<E>,
        f2: &Tensor<E>,
        sel: BnSelect,
    ) -> Result<Tensor<E>> {
        if f1.dims() != f2.dims() {
            return Err(Error::Shape {
                op: "ff_forward",
                detail: format!("temporal features differ: {} vs {}", f1.dims(), f2.dims()),
            });
        }
        let cat = match prev {
            Some(p) => concat_channels(tape, &[p.clone(), f1.clone(), f2.clone()])?,
            None => concat_channels(tape, &[f1.clone(), f2.clone()])?,
        };
        let att = self.cbam.forward(tape, &cat)?;
        let up_w = tape.watch(&self.up);
        let up = conv_transpose2d(tape, &att, &up_w, 2)?;
        self.conv.forward(tape, &up, sel)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        self.cbam.collect_params(&format!("{prefix}.cbam"), out);
        out.push((format!("{prefix}.up"), self.up.clone()));
        self.conv.collect_params(&format!("{prefix}.conv"), out);
    }

    pub fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BnLayer<E>)>) {
        self.conv.collect_bn(&format!("{prefix}.conv"), out);
    }

    pub fn deep_clone(&self) -> Self {
        FfBlock { cbam: self.cbam.deep_clone(), up: self.up.deep_clone(), conv: self.conv.deep_clone() }
    }
}

// ── interesting-change-region mask ───────────────────────────────────

/// Produces a two-channel mask `m = (sigmoid(x_m), 1 - sigmoid(x_m))` from
/// the prediction logits and returns the masked prediction `m * p`.
pub struct IcmBlock<E: Elem> {
    entry_w: Parameter<E>,
    entry_b: Parameter<E>,
    se: SeBlock<E>,
    mask_w: Parameter<E>,
    mask_b: Parameter<E>,
    pooling: PoolingMode,
}

impl<E: Elem> IcmBlock<E> {
    pub fn new(rng: &mut impl Rng, icm_width: usize, pooling: PoolingMode) -> Self {
        let fused = match pooling {
            PoolingMode::Channel => icm_width + 2,
            PoolingMode::Window => icm_width * 3,
        };
        IcmBlock {
            entry_w: init_conv_weight(rng, icm_width, 2, 3, 3),
            entry_b: zero_bias(icm_width),
            se: SeBlock::new(rng, fused),
            mask_w: init_conv_weight(rng, 1, fused, 3, 3),
            mask_b: zero_bias(1),
            pooling,
        }
    }

    /// Returns `(mask, masked_prediction)`, both with dims (n, 2, h, w).
    pub fn forward(&self, tape: &mut Tape<E>, p: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        if p.dims().c != 2 {
            return Err(Error::Shape {
                op: "icm_forward",
                detail: format!("prediction must have 2 channels, got {}", p.dims().c),
            });
        }
        let ew = tape.watch(&self.entry_w);
        let eb = tape.watch(&self.entry_b);
        let x = conv2d(tape, p, &ew, Some(&eb), 1, 1)?;
        let (mp, ap) = match self.pooling {
            PoolingMode::Channel => {
                (channel_reduce_max(tape, &x)?, channel_reduce_mean(tape, &x)?)
            }
            PoolingMode::Window => (maxpool2d(tape, &x, 3, 1, 1)?, avgpool2d(tape, &x, 3, 1, 1)?),
        };
        let fused = concat_channels(tape, &[x, mp, ap])?;
        let excited = self.se.forward(tape, &fused)?;
        let mw = tape.watch(&self.mask_w);
        let mb = tape.watch(&self.mask_b);
        let x_m = conv2d(tape, &excited, &mw, Some(&mb), 1, 1)?;
        let m0 = sigmoid(tape, &x_m)?;
        let m1 = one_minus(tape, &m0)?;
        let mask = concat_channels(tape, &[m0, m1])?;
        let masked = mul(tape, &mask, p)?;
        Ok((mask, masked))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        out.push((format!("{prefix}.entry_w"), self.entry_w.clone()));
        out.push((format!("{prefix}.entry_b"), self.entry_b.clone()));
        self.se.collect_params(&format!("{prefix}.se"), out);
        out.push((format!("{prefix}.mask_w"), self.mask_w.clone()));
        out.push((format!("{prefix}.mask_b"), self.mask_b.clone()));
    }

    pub fn deep_clone(&self) -> Self {
        IcmBlock {
            entry_w: self.entry_w.deep_clone(),
            entry_b: self.entry_b.deep_clone(),
            se: self.se.deep_clone(),
            mask_w: self.mask_w.deep_clone(),
            mask_b: self.mask_b.deep_clone(),
            pooling: self.pooling,
        }
    }

    /// Shared-parameter handle to the same block (used by the shared-mask
    /// ablation, where all adapters route through one parameter set).
    pub fn share(&self) -> Self {
        IcmBlock {
            entry_w: self.entry_w.clone(),
            entry_b: self.entry_b.clone(),
            se: SeBlock {
                w1: self.se.w1.clone(),
                b1: self.se.b1.clone(),
                w2: self.se.w2.clone(),
                b2: self.se.b2.clone(),
            },
            mask_w: self.mask_w.clone(),
            mask_b: self.mask_b.clone(),
            pooling: self.pooling,
        }
    }

    /// Identity of the underlying parameters; equal for shared handles.
    pub fn param_identity(&self) -> usize {
        self.entry_w.id()
    }

    #[cfg(test)]
    pub(crate) fn zero_mask_head(&self) {
        self.mask_w.set_value(Tensor::zeros(self.mask_w.dims()));
        self.mask_b.set_value(Tensor::zeros(self.mask_b.dims()));
    }
}
