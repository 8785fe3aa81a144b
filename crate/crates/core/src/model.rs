//! Model files, fixed-point quantization, and plaintext references.
//!
//! A model is a TOML description (`.netspec`) plus a flat little-endian f32
//! blob (`.weights`). Layers point into the blob by (offset, len) counted in
//! f32 values. The description carries the blob's SHA-256 and its own
//! content hash, taken over the canonical re-serialization with the
//! `content_hash` field blank.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::netadapt::{compile_plan, layer_output_shape, Block, BnLayer, ConvLayer, ExecutionPlan, FcLayer, LayerSpec};
use crate::packing::sum_pool;
use crate::ring::{fixed_encode, from_signed, signed_rep, ProtocolParams, RingTensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("malformed model description: {0}")]
    Malformed(String),
    #[error("content hash mismatch: recorded {recorded}, contents hash to {computed}")]
    HashMismatch { recorded: String, computed: String },
    #[error("weights do not match the description: expected sha256 {expected}, got {found}")]
    WeightsMismatch { expected: String, found: String },
    #[error("layer {layer}: values [{offset}, {offset}+{len}) exceed the {available} available")]
    OffsetOverflow { layer: usize, offset: u64, len: u64, available: u64 },
    #[error("value {index} = {value} does not fit at {frac_bits} fraction bits")]
    QuantizeOverflow { index: usize, value: f64, frac_bits: u32 },
}

const FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerEntry {
    Conv {
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
        weights: BlobRef,
        bias: BlobRef,
    },
    Fc {
        out_features: usize,
        weights: BlobRef,
        bias: BlobRef,
    },
    Relu,
    Bn {
        channels: usize,
        scale: BlobRef,
        shift: BlobRef,
    },
    Maxpool {
        window: usize,
    },
    Meanpool {
        window: usize,
    },
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetFile {
    format: u32,
    frac_bits: u32,
    input_shape: Vec<usize>,
    /// Number of f32 values in the weight file.
    weights_len: u64,
    weights_sha256: String,
    content_hash: String,
    layers: Vec<LayerEntry>,
}

impl NetFile {
    fn canonical_hash(&self) -> [u8; 32] {
        let mut blank = self.clone();
        blank.content_hash.clear();
        let text = toml::to_string(&blank).expect("model description serializes");
        Sha256::digest(text.as_bytes()).into()
    }

    fn refs(&self) -> Vec<(usize, BlobRef)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerEntry::Conv { weights, bias, .. } | LayerEntry::Fc { weights, bias, .. } => {
                    out.push((i, *weights));
                    out.push((i, *bias));
                }
                LayerEntry::Bn { scale, shift, .. } => {
                    out.push((i, *scale));
                    out.push((i, *shift));
                }
                _ => {}
            }
        }
        out
    }
}

/// A loaded model; weight vectors are empty when no weight file was given.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub frac_bits: u32,
    pub layers: Vec<LayerSpec>,
    pub content_hash: [u8; 32],
}

impl Model {
    pub fn has_weights(&self) -> bool {
        self.layers.iter().any(|l| match l {
            LayerSpec::Conv(c) => !c.kernel.is_empty(),
            LayerSpec::Fc(f) => !f.weights.is_empty(),
            _ => false,
        })
    }

    pub fn plan(&self) -> Result<ExecutionPlan> {
        let mut plan = compile_plan(&self.input_shape, &self.layers)?;
        plan.model_hash = self.content_hash;
        Ok(plan)
    }
}

fn malformed(e: impl std::fmt::Display) -> ModelError {
    ModelError::Malformed(e.to_string())
}

/// Parse a description and, if given, its weight blob.
pub fn parse_model(text: &str, blob: Option<&[u8]>) -> std::result::Result<Model, ModelError> {
    let file: NetFile = toml::from_str(text).map_err(malformed)?;
    if file.format != FORMAT {
        return Err(malformed(format!("unknown format version {}", file.format)));
    }
    let computed = hex::encode(file.canonical_hash());
    if computed != file.content_hash {
        return Err(ModelError::HashMismatch { recorded: file.content_hash, computed });
    }
    let available = match blob {
        Some(b) => file.weights_len.min(b.len() as u64 / 4),
        None => file.weights_len,
    };
    for (layer, r) in file.refs() {
        if r.offset.checked_add(r.len).is_none_or(|end| end > available) {
            return Err(ModelError::OffsetOverflow { layer, offset: r.offset, len: r.len, available });
        }
    }
    let values: Option<Vec<f32>> = match blob {
        Some(b) => {
            let found = hex::encode(Sha256::digest(b));
            if found != file.weights_sha256 || b.len() as u64 != 4 * file.weights_len {
                return Err(ModelError::WeightsMismatch { expected: file.weights_sha256, found });
            }
            Some(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        None => None,
    };
    let take = |r: &BlobRef| -> Vec<f64> {
        match &values {
            Some(v) => v[r.offset as usize..(r.offset + r.len) as usize].iter().map(|&x| x as f64).collect(),
            None => Vec::new(),
        }
    };
    let layers: Vec<LayerSpec> = file
        .layers
        .iter()
        .map(|l| match l {
            LayerEntry::Conv { out_channels, kernel, stride, pad, weights, bias } => LayerSpec::Conv(ConvLayer {
                c_o: *out_channels,
                f_h: kernel[0],
                f_w: kernel[1],
                stride: *stride,
                pad: *pad,
                kernel: take(weights),
                bias: take(bias),
            }),
            LayerEntry::Fc { out_features, weights, bias } => LayerSpec::Fc(FcLayer {
                n_o: *out_features,
                weights: take(weights),
                bias: take(bias),
            }),
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::Bn { channels, scale, shift } => LayerSpec::Bn(BnLayer {
                channels: *channels,
                scale: take(scale),
                shift: take(shift),
            }),
            LayerEntry::Maxpool { window } => LayerSpec::MaxPool { s: *window },
            LayerEntry::Meanpool { window } => LayerSpec::MeanPool { s: *window },
            LayerEntry::Argmax => LayerSpec::ArgMax,
        })
        .collect();
    // Blob lengths must agree with the geometry; without weights only the
    // declared lengths can be checked.
    let mut shape = file.input_shape.clone();
    for (i, (layer, entry)) in layers.iter().zip(&file.layers).enumerate() {
        let want = |r: &BlobRef, n: usize| -> std::result::Result<(), ModelError> {
            if r.len as usize != n {
                return Err(malformed(format!("layer {i}: {} values stored, {n} expected", r.len)));
            }
            Ok(())
        };
        match entry {
            LayerEntry::Conv { out_channels, kernel, weights, bias, .. } => {
                want(weights, out_channels * shape.first().copied().unwrap_or(0) * kernel[0] * kernel[1])?;
                want(bias, *out_channels)?;
            }
            LayerEntry::Fc { out_features, weights, bias } => {
                want(weights, out_features * shape.iter().product::<usize>())?;
                want(bias, *out_features)?;
            }
            LayerEntry::Bn { channels, scale, shift } => {
                want(scale, *channels)?;
                want(shift, *channels)?;
            }
            _ => {}
        }
        shape = layer_output_shape(layer, &shape).map_err(|e| malformed(format!("layer {i}: {e}")))?;
    }
    Ok(Model {
        content_hash: file.canonical_hash(),
        input_shape: file.input_shape,
        frac_bits: file.frac_bits,
        layers,
    })
}

/// Serialize a model with weights into description text and blob bytes.
pub fn write_model(input_shape: &[usize], frac_bits: u32, layers: &[LayerSpec]) -> Result<(String, Vec<u8>)> {
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |v: &[f64]| -> BlobRef {
        let r = BlobRef { offset: blob.len() as u64, len: v.len() as u64 };
        blob.extend(v.iter().map(|&x| x as f32));
        r
    };
    let mut shape = input_shape.to_vec();
    let mut entries = Vec::new();
    for l in layers {
        let next = layer_output_shape(l, &shape)?;
        entries.push(match l {
            LayerSpec::Conv(c) => {
                if c.kernel.is_empty() {
                    return Err(Error::Param("cannot write a model without weights".into()));
                }
                LayerEntry::Conv {
                    out_channels: c.c_o,
                    kernel: [c.f_h, c.f_w],
                    stride: c.stride,
                    pad: c.pad,
                    weights: push(&c.kernel),
                    bias: push(&if c.bias.is_empty() { vec![0.0; c.c_o] } else { c.bias.clone() }),
                }
            }
            LayerSpec::Fc(f) => {
                if f.weights.is_empty() {
                    return Err(Error::Param("cannot write a model without weights".into()));
                }
                LayerEntry::Fc {
                    out_features: f.n_o,
                    weights: push(&f.weights),
                    bias: push(&if f.bias.is_empty() { vec![0.0; f.n_o] } else { f.bias.clone() }),
                }
            }
            LayerSpec::Relu => LayerEntry::Relu,
            LayerSpec::Bn(b) => LayerEntry::Bn { channels: b.channels, scale: push(&b.scale), shift: push(&b.shift) },
            LayerSpec::MaxPool { s } => LayerEntry::Maxpool { window: *s },
            LayerSpec::MeanPool { s } => LayerEntry::Meanpool { window: *s },
            LayerSpec::ArgMax => LayerEntry::Argmax,
        });
        shape = next;
    }
    let bytes: Vec<u8> = blob.iter().flat_map(|x| x.to_le_bytes()).collect();
    let mut file = NetFile {
        format: FORMAT,
        frac_bits,
        input_shape: input_shape.to_vec(),
        weights_len: blob.len() as u64,
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
        content_hash: String::new(),
        layers: entries,
    };
    file.content_hash = hex::encode(file.canonical_hash());
    let text = toml::to_string(&file).map_err(|e| Error::Malformed(e.to_string()))?;
    Ok((text, bytes))
}

/// Round to the nearest multiple of 2^-f; fails on the first value that
/// leaves the signed range of Z_p.
pub fn quantize(values: &[f64], frac_bits: u32, p: u64) -> std::result::Result<Vec<u64>, ModelError> {
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            fixed_encode(value, frac_bits, p).map_err(|_| ModelError::QuantizeOverflow { index, value, frac_bits })
        })
        .collect()
}

fn quantize_tensor(shape: &[usize], values: &[f64], frac_bits: u32, p: u64) -> Result<RingTensor> {
    let len: usize = shape.iter().product();
    if values.is_empty() {
        return Ok(RingTensor::zeros(shape, p).with_scale(frac_bits));
    }
    if values.len() != len {
        return Err(Error::Shape(format!("{} values for shape {shape:?}", values.len())));
    }
    Ok(RingTensor::new(shape, quantize(values, frac_bits, p)?, p)?.with_scale(frac_bits))
}

// ---------------------------------------------------------------------------
// Fixed-point plan

/// A linear block with quantized parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RingLinear {
    pub lin: Linear,
    pub in_shape: Vec<usize>,
    pub weights: RingTensor,
    /// Per output channel, at the product scale.
    pub bias: RingTensor,
    /// Fraction bits dropped after the layer.
    pub trunc: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RingBlock {
    IConv(RingLinear),
    ReConv(RingLinear),
    ReFc(RingLinear),
    TMaxPool { in_shape: [usize; 3], s: usize },
    TArgMax { len: usize },
}

impl RingBlock {
    pub fn name(&self) -> &'static str {
        match self {
            RingBlock::IConv(_) => "iConv",
            RingBlock::ReConv(_) => "ReConv",
            RingBlock::ReFc(_) => "ReFC",
            RingBlock::TMaxPool { .. } => "tMaxPool",
            RingBlock::TArgMax { .. } => "tArgMax",
        }
    }

    pub fn linear(&self) -> Option<&RingLinear> {
        match self {
            RingBlock::IConv(l) | RingBlock::ReConv(l) | RingBlock::ReFc(l) => Some(l),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingPlan {
    pub params: ProtocolParams,
    pub input_shape: Vec<usize>,
    pub blocks: Vec<RingBlock>,
}

/// Quantize a compiled plan. Blocks without weights get zero parameters,
/// which is what the client side runs with.
pub fn ring_plan(plan: &ExecutionPlan, params: &ProtocolParams) -> Result<RingPlan> {
    let (p, f, n) = (params.p, params.f, params.n);
    let blocks = plan
        .blocks
        .iter()
        .map(|b| -> Result<RingBlock> {
            Ok(match b {
                Block::IConv(c) | Block::ReConv(c) => {
                    let geom = c.geometry(n)?;
                    let [c_i, _, _] = c.conv_in_shape();
                    let kshape = [c.conv.c_o, c_i, c.conv.f_h, c.conv.f_w];
                    let mut weights = quantize_tensor(&kshape, &c.conv.kernel, f, p)?;
                    let area = c.fold * c.fold;
                    // The folded window sum is area times the mean: a
                    // power-of-two area is divided out by truncating further,
                    // any other area by a fixed-point factor on the kernel.
                    let bias_scale = if area == 1 {
                        2 * f
                    } else if area.is_power_of_two() {
                        2 * f + area.trailing_zeros()
                    } else {
                        let inv = quantize(&[1.0 / area as f64], f, p)?[0];
                        weights = weights.scalar_mul(inv).with_scale(2 * f);
                        3 * f
                    };
                    let bias = quantize_tensor(&[c.conv.c_o], &c.conv.bias, bias_scale, p)?.with_scale(bias_scale);
                    let rl = RingLinear {
                        lin: Linear::Conv { geom, fold: c.fold },
                        in_shape: c.in_shape.to_vec(),
                        weights,
                        bias,
                        trunc: bias_scale - f,
                    };
                    if matches!(b, Block::IConv(_)) {
                        RingBlock::IConv(rl)
                    } else {
                        RingBlock::ReConv(rl)
                    }
                }
                Block::ReFc(fc) => {
                    let geom = fc.geometry(n)?;
                    RingBlock::ReFc(RingLinear {
                        lin: Linear::Fc(geom),
                        in_shape: fc.in_shape.clone(),
                        weights: quantize_tensor(&[fc.fc.n_o, geom.n_i], &fc.fc.weights, f, p)?,
                        bias: quantize_tensor(&[fc.fc.n_o], &fc.fc.bias, 2 * f, p)?,
                        trunc: f,
                    })
                }
                Block::TMaxPool { in_shape, s } => RingBlock::TMaxPool { in_shape: *in_shape, s: *s },
                Block::TArgMax { len } => RingBlock::TArgMax { len: *len },
            })
        })
        .collect::<Result<_>>()?;
    Ok(RingPlan { params: params.clone(), input_shape: plan.input_shape.clone(), blocks })
}

/// Fixed-point encoding of a float input.
pub fn encode_input(x: &[f64], shape: &[usize], params: &ProtocolParams) -> Result<RingTensor> {
    quantize_tensor(shape, x, params.f, params.p)
}

// ---------------------------------------------------------------------------
// Float reference

fn conv_f64(x: &[f64], [c_i, h, w]: [usize; 3], c: &ConvLayer) -> Vec<f64> {
    let oh = (h + 2 * c.pad - c.f_h) / c.stride + 1;
    let ow = (w + 2 * c.pad - c.f_w) / c.stride + 1;
    let mut out = vec![0.0; c.c_o * oh * ow];
    for b in 0..c.c_o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = c.bias.get(b).copied().unwrap_or(0.0);
                for a in 0..c_i {
                    for i in 0..c.f_h {
                        for j in 0..c.f_w {
                            let (yy, xj) = ((y * c.stride + i) as isize - c.pad as isize, (xx * c.stride + j) as isize - c.pad as isize);
                            if yy < 0 || xj < 0 || yy >= h as isize || xj >= w as isize {
                                continue;
                            }
                            let k = c.kernel[((b * c_i + a) * c.f_h + i) * c.f_w + j];
                            acc += k * x[(a * h + yy as usize) * w + xj as usize];
                        }
                    }
                }
                out[(b * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn pool_f64(x: &[f64], [c, h, w]: [usize; 3], s: usize, mean: bool) -> Vec<f64> {
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = vec![if mean { 0.0 } else { f64::NEG_INFINITY }; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let cell = &mut out[(ch * oh + y / s) * ow + xx / s];
                let v = x[(ch * h + y) * w + xx];
                if mean {
                    *cell += v / (s * s) as f64;
                } else {
                    *cell = cell.max(v);
                }
            }
        }
    }
    out
}

fn first_argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A LeNet-sized chain over a 1 x 28 x 28 input that exercises every block
/// kind: iConv, a ReConv with a folded MeanPool, tMaxPool, a plain ReConv,
/// ReFC and tArgMax. Weights are uniform with fan-in scaling times `gain`
/// per layer; a larger gain keeps activations well above the fixed-point
/// resolution.
pub fn demo_network<R: rand::Rng>(rng: &mut R, gain: f64) -> (Vec<usize>, Vec<LayerSpec>) {
    let mut uniform = |len: usize, scale: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect() };
    let mut conv = |c_o: usize, c_i: usize, f: usize, pad: usize| {
        let scale = gain * (6.0 / (c_i * f * f) as f64).sqrt();
        LayerSpec::Conv(ConvLayer {
            c_o,
            f_h: f,
            f_w: f,
            stride: 1,
            pad,
            kernel: uniform(c_o * c_i * f * f, scale),
            bias: uniform(c_o, 0.1),
        })
    };
    let c1 = conv(4, 1, 5, 0);
    let c2 = conv(8, 4, 5, 0);
    let c3 = conv(16, 8, 3, 1);
    // Rows are centred so the shared positive mean of post-ReLU features
    // does not pick the same class for every input.
    let mut weights = uniform(10 * 256, gain * (3.0f64 / 256.0).sqrt());
    for row in weights.chunks_mut(256) {
        let mean = row.iter().sum::<f64>() / 256.0;
        row.iter_mut().for_each(|w| *w -= mean);
    }
    let fc = LayerSpec::Fc(FcLayer { n_o: 10, weights, bias: uniform(10, 0.1) });
    let layers = vec![
        c1,
        LayerSpec::Relu,
        LayerSpec::MeanPool { s: 2 },
        c2,
        LayerSpec::Relu,
        LayerSpec::MaxPool { s: 2 },
        c3,
        LayerSpec::Relu,
        fc,
        LayerSpec::ArgMax,
    ];
    (vec![1, 28, 28], layers)
}

/// A random 28 x 28 image in [0, 1]: a few Gaussian blobs of random
/// position, width and brightness.
pub fn demo_input<R: rand::Rng>(rng: &mut R) -> Vec<f64> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..6))
        .map(|_| (rng.gen_range(3.0..25.0), rng.gen_range(3.0..25.0), rng.gen_range(1.5..5.0), rng.gen_range(0.3..1.0)))
        .collect();
    (0..28 * 28)
        .map(|i| {
            let (y, x) = ((i / 28) as f64, (i % 28) as f64);
            let v: f64 = blobs.iter().map(|(cy, cx, w, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * w * w)).exp()).sum();
            v.min(1.0)
        })
        .collect()
}

/// Result of a plaintext forward pass: the last activation and, if the
/// network ends in ArgMax, the class.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatOutput {
    pub values: Vec<f64>,
    pub class: Option<usize>,
}

pub fn infer_float(layers: &[LayerSpec], input_shape: &[usize], x: &[f64]) -> Result<FloatOutput> {
    let mut shape = input_shape.to_vec();
    let mut v = x.to_vec();
    let mut class = None;
    for l in layers {
        let next = layer_output_shape(l, &shape)?;
        match l {
            LayerSpec::Conv(c) => v = conv_f64(&v, dims(&shape)?, c),
            LayerSpec::Fc(fc) => {
                let n_i = v.len();
                v = (0..fc.n_o)
                    .map(|b| fc.bias.get(b).copied().unwrap_or(0.0) + (0..n_i).map(|i| fc.weights[b * n_i + i] * v[i]).sum::<f64>())
                    .collect();
            }
            LayerSpec::Relu => v.iter_mut().for_each(|e| *e = e.max(0.0)),
            LayerSpec::Bn(b) => {
                let per = v.len() / b.channels;
                for (i, e) in v.iter_mut().enumerate() {
                    *e = b.scale[i / per] * *e + b.shift[i / per];
                }
            }
            LayerSpec::MaxPool { s } => v = pool_f64(&v, dims(&shape)?, *s, false),
            LayerSpec::MeanPool { s } => v = pool_f64(&v, dims(&shape)?, *s, true),
            LayerSpec::ArgMax => {
                class = Some(first_argmax(&v));
                shape = next;
                continue;
            }
        }
        shape = next;
    }
    Ok(FloatOutput { values: v, class })
}

/// Float evaluation of a compiled plan, block by block.
pub fn infer_plan_float(plan: &ExecutionPlan, x: &[f64]) -> Result<FloatOutput> {
    infer_float(&plan.to_layers(), &plan.input_shape, x)
}

fn dims(shape: &[usize]) -> Result<[usize; 3]> {
    shape.try_into().map_err(|_| Error::Shape(format!("expected c x h x w, got {shape:?}")))
}

// ---------------------------------------------------------------------------
// Ring reference

/// One block of the fixed-point reference: the linear output before
/// truncation (linear blocks only), the block output, and the class for
/// ArgMax.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleStep {
    pub pre_trunc: Option<RingTensor>,
    pub output: RingTensor,
    pub class: Option<usize>,
}

fn checked(acc: i128, p: u64, what: &str) -> Result<i64> {
    if acc.unsigned_abs() > (p / 2) as u128 {
        return Err(Error::Overflow(format!(
            "{what} reaches {acc}, beyond the signed range of p = {p}; lower the fraction bits or pick a larger prime"
        )));
    }
    Ok(acc as i64)
}

/// Exact integer linear layer over signed representatives.
pub fn ring_linear(l: &RingLinear, input: &RingTensor) -> Result<RingTensor> {
    let p = input.modulus;
    let src = match l.lin {
        Linear::Conv { fold, .. } if fold > 1 => sum_pool(input, fold)?,
        _ => input.clone(),
    };
    let a = src.to_signed();
    let k = l.weights.to_signed();
    let bias = l.bias.to_signed();
    let out: Vec<i64> = match l.lin {
        Linear::Conv { geom: g, .. } => {
            let (oh, ow) = (g.out_h(), g.out_w());
            let mut out = Vec::with_capacity(g.c_o * oh * ow);
            for b in 0..g.c_o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[b] as i128;
                        for c in 0..g.c_i {
                            for i in 0..g.f_h {
                                for j in 0..g.f_w {
                                    let yy = (y * g.s + i) as isize - g.pad as isize;
                                    let xx = (x * g.s + j) as isize - g.pad as isize;
                                    if yy < 0 || xx < 0 || yy >= g.h_i as isize || xx >= g.w_i as isize {
                                        continue;
                                    }
                                    let kv = k[((b * g.c_i + c) * g.f_h + i) * g.f_w + j] as i128;
                                    acc += kv * a[(c * g.h_i + yy as usize) * g.w_i + xx as usize] as i128;
                                }
                            }
                        }
                        out.push(checked(acc, p, "convolution output")?);
                    }
                }
            }
            out
        }
        Linear::Fc(g) => (0..g.n_o)
            .map(|b| {
                let acc: i128 = bias[b] as i128
                    + (0..g.n_i).map(|i| k[b * g.n_i + i] as i128 * a[i] as i128).sum::<i128>();
                checked(acc, p, "FC output")
            })
            .collect::<Result<_>>()?,
    };
    Ok(RingTensor::from_signed(&l.lin.output_shape(), &out, p)?.with_scale(l.bias.scale))
}

/// Arithmetic shift of the signed representative (floor division).
pub fn ring_truncate(t: &RingTensor, bits: u32) -> RingTensor {
    let p = t.modulus;
    RingTensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&e| from_signed(signed_rep(e, p) >> bits, p)).collect(),
        modulus: p,
        scale: t.scale.saturating_sub(bits),
    }
}

pub fn ring_relu(t: &RingTensor) -> RingTensor {
    let p = t.modulus;
    let mut out = t.clone();
    out.data.iter_mut().for_each(|e| {
        if signed_rep(*e, p) < 0 {
            *e = 0
        }
    });
    out
}

pub fn ring_maxpool(t: &RingTensor, s: usize) -> Result<RingTensor> {
    let [c, h, w] = dims(&t.shape)?;
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let p = t.modulus;
    let mut best = vec![i64::MIN; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let cell = &mut best[(ch * oh + y / s) * ow + x / s];
                *cell = (*cell).max(signed_rep(t.data[(ch * h + y) * w + x], p));
            }
        }
    }
    Ok(RingTensor::from_signed(&[c, oh, ow], &best, p)?.with_scale(t.scale))
}

pub fn oracle_block(b: &RingBlock, input: &RingTensor) -> Result<OracleStep> {
    Ok(match b {
        RingBlock::IConv(l) | RingBlock::ReConv(l) | RingBlock::ReFc(l) => {
            let x = if matches!(b, RingBlock::IConv(_)) { input.clone() } else { ring_relu(input) };
            let x = x.reshape(&l.in_shape)?;
            let pre = ring_linear(l, &x)?;
            let output = ring_truncate(&pre, l.trunc);
            OracleStep { pre_trunc: Some(pre), output, class: None }
        }
        RingBlock::TMaxPool { in_shape, s } => OracleStep {
            pre_trunc: None,
            output: ring_maxpool(&input.clone().reshape(in_shape)?, *s)?,
            class: None,
        },
        RingBlock::TArgMax { .. } => {
            let class = first_argmax(&input.to_signed());
            OracleStep {
                pre_trunc: None,
                output: RingTensor::new(&[1], vec![class as u64], input.modulus)?,
                class: Some(class),
            }
        }
    })
}

/// Fixed-point forward pass with the same truncation points as the
/// protocol.
pub fn infer_ring_oracle(plan: &RingPlan, x: &RingTensor) -> Result<Vec<OracleStep>> {
    let mut cur = x.clone();
    let mut steps = Vec::with_capacity(plan.blocks.len());
    for b in &plan.blocks {
        let step = oracle_block(b, &cur)?;
        cur = step.output.clone();
        steps.push(step);
    }
    Ok(steps)
}

/// Class predicted by an oracle trace (its last ArgMax).
pub fn oracle_class(steps: &[OracleStep]) -> Option<usize> {
    steps.iter().rev().find_map(|s| s.class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv(ConvLayer {
                c_o: 2,
                f_h: 2,
                f_w: 2,
                stride: 1,
                pad: 0,
                kernel: vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 0.25, 0.0],
                bias: vec![0.0, 0.125],
            }),
            LayerSpec::Relu,
            LayerSpec::Fc(FcLayer { n_o: 3, weights: (0..24).map(|i| (i as f64 - 12.0) / 16.0).collect(), bias: vec![0.0; 3] }),
            LayerSpec::ArgMax,
        ]
    }

    #[test]
    fn hand_example_conv() {
        let conv = ConvLayer { c_o: 1, f_h: 2, f_w: 2, stride: 1, pad: 0, kernel: vec![1.0, 0.0, 0.0, 1.0], bias: vec![] };
        let out = infer_float(&[LayerSpec::Conv(conv)], &[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out.values, vec![5.0]);
    }

    #[test]
    fn round_trip_and_byte_identity() {
        let (text, blob) = write_model(&[1, 3, 3], 6, &tiny()).unwrap();
        let m = parse_model(&text, Some(&blob)).unwrap();
        // f32 storage is exact for these values.
        assert_eq!(m.layers, tiny());
        let (text2, blob2) = write_model(&m.input_shape, m.frac_bits, &m.layers).unwrap();
        assert_eq!((text2, blob2), (text.clone(), blob.clone()));
        let bare = parse_model(&text, None).unwrap();
        assert!(!bare.has_weights());
        assert_eq!(bare.content_hash, m.content_hash);
    }

    #[test]
    fn load_errors_are_distinct() {
        let (text, blob) = write_model(&[1, 3, 3], 6, &tiny()).unwrap();
        let bad = text.replace("frac_bits = 6", "frac_bits = 7");
        assert!(matches!(parse_model(&bad, None), Err(ModelError::HashMismatch { .. })));
        assert!(matches!(parse_model("layers = 3", None), Err(ModelError::Malformed(_))));
        assert!(matches!(
            parse_model(&text, Some(&blob[..blob.len() - 8])),
            Err(ModelError::OffsetOverflow { layer: 2, .. })
        ));
        let mut flipped = blob.clone();
        flipped[0] ^= 1;
        assert!(matches!(parse_model(&text, Some(&flipped)), Err(ModelError::WeightsMismatch { .. })));
    }

    #[test]
    fn quantize_bounds() {
        let p = ProtocolParams::default().p;
        let vals = [0.3, -1.7, 2.0, 1e-3];
        let q = quantize(&vals, 6, p).unwrap();
        for (v, e) in vals.iter().zip(q) {
            assert!((crate::ring::fixed_decode(e, 6, p) - v).abs() <= 1.0 / 128.0);
        }
        match quantize(&[0.0, 1e9], 6, p) {
            Err(ModelError::QuantizeOverflow { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ring_oracle_follows_float_at_high_precision() {
        let params = ProtocolParams::with_prime_bits(4096, 50, 16).unwrap();
        let plan = compile_plan(&[1, 3, 3], &tiny()).unwrap();
        let rp = ring_plan(&plan, &params).unwrap();
        let x: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 3.0).collect();
        let steps = infer_ring_oracle(&rp, &encode_input(&x, &[1, 3, 3], &params).unwrap()).unwrap();
        let fl = infer_float(&tiny()[..3], &[1, 3, 3], &x).unwrap();
        let fc_out = &steps[1].output;
        for (e, v) in fc_out.data.iter().zip(&fl.values) {
            assert!((params.decode(*e) - v).abs() < 1e-3);
        }
        assert_eq!(oracle_class(&steps), infer_float(&tiny(), &[1, 3, 3], &x).unwrap().class);
    }

    #[test]
    fn overflow_is_reported() {
        let params = ProtocolParams::new(8, 257, 1).unwrap();
        let plan = compile_plan(&[1, 3, 3], &tiny()).unwrap();
        let rp = ring_plan(&plan, &params).unwrap();
        let x = RingTensor::from_signed(&[1, 3, 3], &[120; 9], 257).unwrap();
        assert!(matches!(infer_ring_oracle(&rp, &x), Err(Error::Overflow(_))));
    }
}
