//! Layer lists and their compilation into protocol blocks.
//!
//! Rewrites: batch norm folds into the preceding convolution; ReLU followed
//! by MaxPool becomes MaxPool followed by ReLU (max commutes with a
//! monotone map), so the comparison tree runs on the smaller pre-activation
//! tensor; ReLU followed by MeanPool keeps the ReLU on the full tensor but
//! moves the window sums into the packed encoding and the 1/s^2 factor into
//! the kernel.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::packing::{ConvGeometry, FcGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub c_o: usize,
    pub f_h: usize,
    pub f_w: usize,
    pub stride: usize,
    pub pad: usize,
    /// c_o x c_i x f_h x f_w, row-major; empty when the holder has no weights.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub n_o: usize,
    /// n_o x n_i, row-major; empty when not held.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-channel affine map y = scale * x + shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayer {
    pub channels: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvLayer),
    Fc(FcLayer),
    Relu,
    Bn(BnLayer),
    MaxPool { s: usize },
    MeanPool { s: usize },
    ArgMax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "Conv",
            LayerSpec::Fc(_) => "FC",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Bn(_) => "BN",
            LayerSpec::MaxPool { .. } => "MaxPool",
            LayerSpec::MeanPool { .. } => "MeanPool",
            LayerSpec::ArgMax => "ArgMax",
        }
    }
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    shape
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a c x h x w activation, got {shape:?}")))
}

/// Activation shape after one layer.
pub fn layer_output_shape(layer: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
    Ok(match layer {
        LayerSpec::Conv(c) => {
            let [c_i, h, w] = dims3(shape)?;
            if c.stride == 0 || h + 2 * c.pad < c.f_h || w + 2 * c.pad < c.f_w {
                return Err(Error::Shape(format!("conv {c_i}x{h}x{w} with {}x{} kernel", c.f_h, c.f_w)));
            }
            if !c.kernel.is_empty() && c.kernel.len() != c.c_o * c_i * c.f_h * c.f_w {
                return Err(Error::Shape(format!("conv kernel has {} values", c.kernel.len())));
            }
            if !c.bias.is_empty() && c.bias.len() != c.c_o {
                return Err(Error::Shape("conv bias length".into()));
            }
            vec![
                c.c_o,
                (h + 2 * c.pad - c.f_h) / c.stride + 1,
                (w + 2 * c.pad - c.f_w) / c.stride + 1,
            ]
        }
        LayerSpec::Fc(f) => {
            let n_i: usize = shape.iter().product();
            if !f.weights.is_empty() && f.weights.len() != f.n_o * n_i {
                return Err(Error::Shape(format!("FC weights {} vs {}x{n_i}", f.weights.len(), f.n_o)));
            }
            if !f.bias.is_empty() && f.bias.len() != f.n_o {
                return Err(Error::Shape("FC bias length".into()));
            }
            vec![f.n_o]
        }
        LayerSpec::Relu => shape.to_vec(),
        LayerSpec::Bn(b) => {
            if shape.first() != Some(&b.channels) {
                return Err(Error::Shape(format!("BN over {} channels, input {shape:?}", b.channels)));
            }
            shape.to_vec()
        }
        LayerSpec::MaxPool { s } => {
            let [c, h, w] = dims3(shape)?;
            if *s == 0 {
                return Err(Error::Shape("zero pooling window".into()));
            }
            vec![c, h.div_ceil(*s), w.div_ceil(*s)]
        }
        LayerSpec::MeanPool { s } => {
            let [c, h, w] = dims3(shape)?;
            if *s == 0 || h % s != 0 || w % s != 0 {
                return Err(Error::Shape(format!("mean pooling {s} does not tile {h}x{w}")));
            }
            vec![c, h / s, w / s]
        }
        LayerSpec::ArgMax => vec![1],
    })
}

/// Fold a following batch norm into a convolution.
pub fn fuse_bn(conv: &ConvLayer, bn: &BnLayer) -> Result<ConvLayer> {
    if bn.channels != conv.c_o {
        return Err(Error::Shape(format!("BN over {} channels after conv with {}", bn.channels, conv.c_o)));
    }
    let mut out = conv.clone();
    if conv.kernel.is_empty() {
        return Ok(out);
    }
    let per = conv.kernel.len() / conv.c_o;
    for (i, k) in out.kernel.iter_mut().enumerate() {
        *k *= bn.scale[i / per];
    }
    let bias: Vec<f64> = if conv.bias.is_empty() { vec![0.0; conv.c_o] } else { conv.bias.clone() };
    out.bias = bias
        .iter()
        .zip(bn.scale.iter().zip(&bn.shift))
        .map(|(b, (m, t))| m * b + t)
        .collect();
    Ok(out)
}

/// [ReLU, MaxPool, Conv] to [MaxPool, ReLU, Conv]; anything else is
/// returned unchanged.
pub fn swap_pool_relu(seq: &[LayerSpec]) -> Vec<LayerSpec> {
    match seq {
        [LayerSpec::Relu, m @ LayerSpec::MaxPool { .. }, c @ LayerSpec::Conv(_)] => {
            vec![m.clone(), LayerSpec::Relu, c.clone()]
        }
        _ => seq.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    /// Activation entering the block (before any folded pooling).
    pub in_shape: [usize; 3],
    pub conv: ConvLayer,
    /// Mean-pool window folded into the block; 1 when absent.
    pub fold: usize,
    pub fused_bn: bool,
}

impl ConvBlock {
    /// Shape the convolution itself sees.
    pub fn conv_in_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.in_shape;
        [c, h / self.fold, w / self.fold]
    }

    pub fn geometry(&self, n: usize) -> Result<ConvGeometry> {
        let [c, h, w] = self.conv_in_shape();
        let k = &self.conv;
        ConvGeometry::new(n, (c, h, w), (k.c_o, k.f_h, k.f_w), k.stride, k.pad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcBlock {
    pub in_shape: Vec<usize>,
    pub fc: FcLayer,
}

impl FcBlock {
    pub fn n_i(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn geometry(&self, n: usize) -> Result<FcGeometry> {
        FcGeometry::new(n, self.n_i(), self.fc.n_o)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Block {
    IConv(ConvBlock),
    ReConv(ConvBlock),
    ReFc(FcBlock),
    TMaxPool { in_shape: [usize; 3], s: usize },
    TArgMax { len: usize },
}

impl Block {
    pub fn name(&self) -> &'static str {
        match self {
            Block::IConv(_) => "iConv",
            Block::ReConv(_) => "ReConv",
            Block::ReFc(_) => "ReFC",
            Block::TMaxPool { .. } => "tMaxPool",
            Block::TArgMax { .. } => "tArgMax",
        }
    }

    pub fn in_shape(&self) -> Vec<usize> {
        match self {
            Block::IConv(c) | Block::ReConv(c) => c.in_shape.to_vec(),
            Block::ReFc(f) => f.in_shape.clone(),
            Block::TMaxPool { in_shape, .. } => in_shape.to_vec(),
            Block::TArgMax { len } => vec![*len],
        }
    }

    pub fn out_shape(&self) -> Result<Vec<usize>> {
        Ok(match self {
            Block::IConv(c) | Block::ReConv(c) => layer_output_shape(&LayerSpec::Conv(c.conv.clone()), &c.conv_in_shape())?,
            Block::ReFc(f) => vec![f.fc.n_o],
            Block::TMaxPool { in_shape, s } => layer_output_shape(&LayerSpec::MaxPool { s: *s }, in_shape)?,
            Block::TArgMax { .. } => vec![1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub input_shape: Vec<usize>,
    pub blocks: Vec<Block>,
    /// Digest of the model file the plan came from (zero when built in code).
    pub model_hash: [u8; 32],
}

fn unsupported(i: usize, layers: &[LayerSpec]) -> Error {
    let tail: Vec<&str> = layers[i..].iter().take(3).map(|l| l.name()).collect();
    Error::Param(format!(
        "no block pattern matches layers {i}.. [{}]; supported: [Conv] first, [ReLU, Conv], \
         [ReLU, Conv, BN], [ReLU, MaxPool, Conv], [ReLU, MeanPool, Conv], [ReLU, FC], [ArgMax]",
        tail.join(", ")
    ))
}

/// Greedy left-to-right pattern matching, longest pattern first.
pub fn compile_plan(input_shape: &[usize], layers: &[LayerSpec]) -> Result<ExecutionPlan> {
    let mut blocks = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut i = 0;
    // Conv, optionally followed by BN, starting at layer j.
    let take_conv = |j: usize| -> Result<(ConvLayer, bool, usize)> {
        let LayerSpec::Conv(c) = &layers[j] else {
            unreachable!("caller matched a conv")
        };
        match layers.get(j + 1) {
            Some(LayerSpec::Bn(bn)) => Ok((fuse_bn(c, bn)?, true, j + 2)),
            _ => Ok((c.clone(), false, j + 1)),
        }
    };
    while i < layers.len() {
        let rest = &layers[i..];
        match rest {
            [LayerSpec::Conv(_), ..] if i == 0 => {
                let (conv, fused_bn, next) = take_conv(i)?;
                let b = ConvBlock { in_shape: dims3(&shape)?, conv, fold: 1, fused_bn };
                shape = Block::IConv(b.clone()).out_shape()?;
                blocks.push(Block::IConv(b));
                i = next;
            }
            [LayerSpec::Relu, LayerSpec::MaxPool { s }, LayerSpec::Conv(_), ..] => {
                let in_shape = dims3(&shape)?;
                let pool = Block::TMaxPool { in_shape, s: *s };
                shape = pool.out_shape()?;
                blocks.push(pool);
                let (conv, fused_bn, next) = take_conv(i + 2)?;
                let b = ConvBlock { in_shape: dims3(&shape)?, conv, fold: 1, fused_bn };
                shape = Block::ReConv(b.clone()).out_shape()?;
                blocks.push(Block::ReConv(b));
                i = next;
            }
            [LayerSpec::Relu, LayerSpec::MeanPool { s }, LayerSpec::Conv(_), ..] => {
                layer_output_shape(&LayerSpec::MeanPool { s: *s }, &shape)?;
                let (conv, fused_bn, next) = take_conv(i + 2)?;
                let b = ConvBlock { in_shape: dims3(&shape)?, conv, fold: *s, fused_bn };
                shape = Block::ReConv(b.clone()).out_shape()?;
                blocks.push(Block::ReConv(b));
                i = next;
            }
            [LayerSpec::Relu, LayerSpec::Conv(_), ..] => {
                let (conv, fused_bn, next) = take_conv(i + 1)?;
                let b = ConvBlock { in_shape: dims3(&shape)?, conv, fold: 1, fused_bn };
                shape = Block::ReConv(b.clone()).out_shape()?;
                blocks.push(Block::ReConv(b));
                i = next;
            }
            [LayerSpec::Relu, LayerSpec::Fc(fc), ..] => {
                let fcl = LayerSpec::Fc(fc.clone());
                let out = layer_output_shape(&fcl, &shape)?;
                blocks.push(Block::ReFc(FcBlock { in_shape: shape.clone(), fc: fc.clone() }));
                shape = out;
                i += 2;
            }
            [LayerSpec::ArgMax, ..] => {
                blocks.push(Block::TArgMax { len: shape.iter().product() });
                shape = vec![1];
                i += 1;
            }
            _ => return Err(unsupported(i, layers)),
        }
    }
    Ok(ExecutionPlan {
        input_shape: input_shape.to_vec(),
        blocks,
        model_hash: [0; 32],
    })
}

fn identity_bn(channels: usize) -> LayerSpec {
    LayerSpec::Bn(BnLayer {
        channels,
        scale: vec![1.0; channels],
        shift: vec![0.0; channels],
    })
}

impl ExecutionPlan {
    /// A layer list that compiles back to this plan.
    pub fn to_layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::IConv(c) | Block::ReConv(c) => {
                    if matches!(b, Block::ReConv(_)) {
                        out.push(LayerSpec::Relu);
                        if c.fold > 1 {
                            out.push(LayerSpec::MeanPool { s: c.fold });
                        }
                    }
                    out.push(LayerSpec::Conv(c.conv.clone()));
                    if c.fused_bn {
                        out.push(identity_bn(c.conv.c_o));
                    }
                }
                Block::ReFc(f) => {
                    out.push(LayerSpec::Relu);
                    out.push(LayerSpec::Fc(f.fc.clone()));
                }
                // The ReLU of the following ReConv is emitted by that block.
                Block::TMaxPool { s, .. } => {
                    out.push(LayerSpec::Relu);
                    out.push(LayerSpec::MaxPool { s: *s });
                }
                Block::TArgMax { .. } => out.push(LayerSpec::ArgMax),
            }
        }
        // A pooled block is always followed by a ReConv whose ReLU moved
        // in front of the pool.
        let mut fixed = Vec::with_capacity(out.len());
        let mut k = 0;
        while k < out.len() {
            if let (LayerSpec::MaxPool { .. }, Some(LayerSpec::Relu)) = (&out[k], out.get(k + 1)) {
                fixed.push(out[k].clone());
                k += 2;
                continue;
            }
            fixed.push(out[k].clone());
            k += 1;
        }
        fixed
    }

    /// Architecture digest agreed on at handshake. Weights enter through
    /// `model_hash`, which covers the weight file digest.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"plan/v1");
        h.update(format!("{:?}", self.input_shape));
        for b in &self.blocks {
            let desc = match b {
                Block::IConv(c) | Block::ReConv(c) => format!(
                    "{}:{:?}:{}x{}x{}:s{}:p{}:fold{}:bn{}",
                    b.name(),
                    c.in_shape,
                    c.conv.c_o,
                    c.conv.f_h,
                    c.conv.f_w,
                    c.conv.stride,
                    c.conv.pad,
                    c.fold,
                    c.fused_bn
                ),
                Block::ReFc(f) => format!("ReFC:{:?}:{}", f.in_shape, f.fc.n_o),
                Block::TMaxPool { in_shape, s } => format!("tMaxPool:{in_shape:?}:{s}"),
                Block::TArgMax { len } => format!("tArgMax:{len}"),
            };
            h.update((desc.len() as u64).to_le_bytes());
            h.update(desc.as_bytes());
        }
        h.update(self.model_hash);
        h.finalize().into()
    }

    /// Beaver triples the comparison blocks will consume.
    pub fn triples_needed(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::TMaxPool { in_shape, s } => maxpool_comparisons(*in_shape, *s),
                Block::TArgMax { len } => argmax_triples(*len),
                _ => 0,
            })
            .sum()
    }
}

/// Pairwise comparisons of a ceiling-window max pool.
pub fn maxpool_comparisons([c, h, w]: [usize; 3], s: usize) -> usize {
    let mut comps = 0;
    for y in (0..h).step_by(s) {
        for x in (0..w).step_by(s) {
            comps += (h - y).min(s) * (w - x).min(s) - 1;
        }
    }
    c * comps
}

/// Argmax multiplexes value and index at each of its len - 1 comparisons.
pub fn argmax_triples(len: usize) -> usize {
    2 * len.saturating_sub(1)
}
