//! Closed-form online costs per block, the rotation-based baseline they are
//! compared against, and reports that line both up with measured counts.

use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::InferenceResult;
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::model::{RingBlock, RingPlan};
use crate::netadapt::{maxpool_comparisons, ConvLayer, LayerSpec};
use crate::packing::{ConvGeometry, FcGeometry};

/// Online cost of one phase, both parties summed. `ciphertexts` counts
/// server-to-client ciphertexts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostVector {
    pub half_rounds: u64,
    pub enc: u64,
    pub mult: u64,
    pub dec: u64,
    pub add: u64,
    pub rot: u64,
    pub ciphertexts: u64,
}

pub const FIELDS: [&str; 7] = ["half_rounds", "enc", "mult", "dec", "add", "rot", "ciphertexts"];

impl CostVector {
    pub fn plus(&self, o: &CostVector) -> CostVector {
        CostVector {
            half_rounds: self.half_rounds + o.half_rounds,
            enc: self.enc + o.enc,
            mult: self.mult + o.mult,
            dec: self.dec + o.dec,
            add: self.add + o.add,
            rot: self.rot + o.rot,
            ciphertexts: self.ciphertexts + o.ciphertexts,
        }
    }

    pub fn values(&self) -> [u64; 7] {
        [self.half_rounds, self.enc, self.mult, self.dec, self.add, self.rot, self.ciphertexts]
    }

    pub fn rounds(&self) -> f64 {
        self.half_rounds as f64 / 2.0
    }
}

impl std::fmt::Display for CostVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rounds {} enc {} mult {} dec {} add {} rot {} ct {}",
            self.rounds(),
            self.enc,
            self.mult,
            self.dec,
            self.add,
            self.rot,
            self.ciphertexts
        )
    }
}

/// Cost split around the linear operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PhaseCost {
    /// Everything after DReLU up to the encrypted activation being ready.
    pub before: CostVector,
    /// The homomorphic linear operation and its return trip.
    pub linear: CostVector,
}

impl PhaseCost {
    pub fn total(&self) -> CostVector {
        self.before.plus(&self.linear)
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// ReLU-fused phase for an activation of `in_len` values feeding
/// `input_rows` packed rows.
fn before_cost(n: usize, in_len: usize, input_rows: usize) -> CostVector {
    let sigma = u(in_len.div_ceil(n));
    CostVector {
        half_rounds: 1,
        enc: 0,
        mult: 2 * sigma,
        dec: sigma,
        add: 2 * sigma + u(input_rows),
        rot: 0,
        ciphertexts: 0,
    }
}

fn conv_cost(g: &ConvGeometry) -> CostVector {
    let (d, c_o) = (u(g.d()), u(g.c_o));
    CostVector { half_rounds: 1, enc: 0, mult: d * c_o, dec: c_o, add: d * c_o, rot: 0, ciphertexts: c_o }
}

/// ReConv on an unpooled input.
pub fn cost_ours(g: &ConvGeometry) -> PhaseCost {
    cost_reconv(g, 1)
}

/// ReConv whose input is summed over `fold` x `fold` windows first.
pub fn cost_reconv(g: &ConvGeometry, fold: usize) -> PhaseCost {
    let in_len = g.c_i * g.h_i * g.w_i * fold * fold;
    PhaseCost { before: before_cost(g.n, in_len, g.d()), linear: conv_cost(g) }
}

/// Convolution on the client's plaintext input: no ReLU phase.
pub fn cost_iconv(g: &ConvGeometry) -> CostVector {
    let c = conv_cost(g);
    CostVector { half_rounds: 2, enc: u(g.d()), ..c }
}

pub fn cost_refc(g: &FcGeometry) -> PhaseCost {
    let d1 = u(g.d1());
    PhaseCost {
        before: before_cost(g.n, g.n_i, 1),
        linear: CostVector { half_rounds: 1, enc: 0, mult: d1, dec: d1, add: d1, rot: 0, ciphertexts: d1 },
    }
}

/// How a baseline figure relates to the count it stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Relation {
    Exact,
    AtLeast,
    About,
}

impl Relation {
    pub fn symbol(&self) -> &'static str {
        match self {
            Relation::Exact => "=",
            Relation::AtLeast => ">=",
            Relation::About => "~",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineTerm {
    pub phase: &'static str,
    pub field: &'static str,
    pub relation: Relation,
    pub expression: &'static str,
    pub value: f64,
}

/// Rotation-based conv with a separate ReLU protocol.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineCost {
    pub before: CostVector,
    pub linear: CostVector,
    pub terms: Vec<BaselineTerm>,
}

/// Output maps packed per ciphertext, at least one.
fn maps_per_ct(g: &ConvGeometry) -> usize {
    (g.n / (g.h_i * g.w_i)).max(1)
}

/// Lower bound on slot rotations for the rotation-based convolution.
pub fn baseline_rotations(g: &ConvGeometry) -> u64 {
    let sigma = u(g.sigma());
    let taps = u(g.f_h * g.f_w);
    let out_cts = u(g.c_o.div_ceil(maps_per_ct(g)));
    (taps - 1) * sigma + u(g.c_o) - out_cts
}

const ROT_EXPR: &str = "(f_h*f_w - 1)*sigma + c_o - ceil(c_o / floor(n/(h_i*w_i)))";
const OUT_CT_EXPR: &str = "ceil(c_o / floor(n/(h_i*w_i)))";

/// Baseline for a ReLU followed by conv (`input_from_client` false) or a
/// conv on the client's own input.
pub fn cost_baseline(g: &ConvGeometry, input_from_client: bool) -> BaselineCost {
    let sigma = u(g.sigma());
    let out_cts = u(g.c_o.div_ceil(maps_per_ct(g)));
    let in_cts = u(g.c_i.div_ceil(maps_per_ct(g)));
    let dc = u(g.d()) * u(g.c_o);
    let rot = baseline_rotations(g);
    let mut terms = Vec::new();
    let mut t = |phase, field, relation, expression, value: u64| {
        terms.push(BaselineTerm { phase, field, relation, expression, value: value as f64 })
    };
    let before = if input_from_client {
        t("linear", "enc", Relation::Exact, "ceil(c_i / floor(n/(h_i*w_i)))", in_cts);
        t(
            "linear",
            "enc+rot",
            Relation::About,
            "(f_h*f_w - 1)*sigma + ceil(c_i / floor(n/(h_i*w_i))), compare d",
            (u(g.f_h * g.f_w) - 1) * sigma + in_cts,
        );
        CostVector::default()
    } else {
        t("before", "half_rounds", Relation::Exact, "2 * 4.5 rounds", 9);
        t("before", "enc", Relation::AtLeast, "sigma", sigma);
        t("before", "add", Relation::AtLeast, "sigma", sigma);
        CostVector { half_rounds: 9, enc: sigma, add: sigma, ..CostVector::default() }
    };
    t("linear", "rot", Relation::AtLeast, ROT_EXPR, rot);
    t("linear", "mult", Relation::About, "d*c_o", dc);
    t("linear", "add", Relation::About, "d*c_o", dc);
    t("linear", "dec", Relation::Exact, OUT_CT_EXPR, out_cts);
    t("linear", "ciphertexts", Relation::Exact, OUT_CT_EXPR, out_cts);
    let linear = CostVector {
        half_rounds: if input_from_client { 2 } else { 0 },
        enc: if input_from_client { in_cts } else { 0 },
        mult: dc,
        dec: out_cts,
        add: dc,
        rot,
        ciphertexts: out_cts,
    };
    BaselineCost { before, linear, terms }
}

/// Secure comparisons for a ReLU + MaxPool pair in either order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CompCounts {
    pub relu_then_pool: usize,
    pub pool_then_relu: usize,
}

/// Closed-form comparison counts over a `c` x `h` x `w` activation with
/// stride-`s` pooling. With `per_channel` false the pooling term is taken
/// for a single channel, as the formula reads when `c` is dropped there.
pub fn comp_counts(c: usize, h: usize, w: usize, s: usize, per_channel: bool) -> CompCounts {
    let windows = h.div_ceil(s) * w.div_ceil(s);
    let pool = if per_channel { c } else { 1 } * windows * (s * s - 1);
    CompCounts { relu_then_pool: c * h * w + pool, pool_then_relu: pool + c * windows }
}

/// Named benchmark layers.
pub const PRESETS: [&str; 5] = ["t3r1", "t3r2", "t3r3", "t3r4", "t3r5"];

/// Geometry of a named benchmark layer for ring degree `n`.
pub fn preset(name: &str, n: usize) -> Result<ConvGeometry> {
    // (c_i, h_i, w_i, c_o, f, stride, pad)
    let (c_i, h, w, c_o, f, s, pad) = match name {
        "t3r1" => (6, 14, 14, 16, 5, 1, 0),
        "t3r2" => (512, 2, 2, 512, 3, 1, 1),
        "t3r3" => (256, 4, 4, 512, 3, 2, 1),
        "t3r4" => (512, 2, 2, 512, 1, 1, 0),
        "t3r5" => (3, 32, 32, 96, 11, 4, 5),
        _ => return Err(Error::Param(format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))),
    };
    ConvGeometry::new(n, (c_i, h, w), (c_o, f, f), s, pad)
}

/// A benchmark layer as a small network. With `after_relu` the preset conv
/// follows a 1x1 conv and ReLU, so it compiles to a ReConv block;
/// otherwise it runs on the client's input as an iConv block.
pub fn preset_network<R: rand::Rng>(
    name: &str,
    n: usize,
    after_relu: bool,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<LayerSpec>)> {
    let g = preset(name, n)?;
    let mut conv = |c_o: usize, c_i: usize, f: usize, stride: usize, pad: usize| {
        let scale = 1.0 / ((c_i * f * f) as f64).sqrt();
        LayerSpec::Conv(ConvLayer {
            c_o,
            f_h: f,
            f_w: f,
            stride,
            pad,
            kernel: (0..c_o * c_i * f * f).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
            bias: (0..c_o).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        })
    };
    let mut layers = Vec::new();
    if after_relu {
        layers.push(conv(g.c_i, g.c_i, 1, 1, 0));
        layers.push(LayerSpec::Relu);
    }
    layers.push(conv(g.c_o, g.c_i, g.f_h, g.s, g.pad));
    Ok((vec![g.c_i, g.h_i, g.w_i], layers))
}

/// Expected online cost of a block, `None` for comparison-only blocks.
pub fn block_cost(b: &RingBlock) -> Option<CostVector> {
    match b {
        RingBlock::IConv(l) => match l.lin {
            Linear::Conv { geom, .. } => Some(cost_iconv(&geom)),
            Linear::Fc(_) => None,
        },
        RingBlock::ReConv(l) | RingBlock::ReFc(l) => {
            let in_len: usize = l.in_shape.iter().product();
            let linear = match l.lin {
                Linear::Conv { geom, .. } => conv_cost(&geom),
                Linear::Fc(g) => cost_refc(&g).linear,
            };
            Some(before_cost(n_of(&l.lin), in_len, l.lin.input_rows()).plus(&linear))
        }
        RingBlock::TMaxPool { .. } | RingBlock::TArgMax { .. } => None,
    }
}

fn n_of(l: &Linear) -> usize {
    match l {
        Linear::Conv { geom, .. } => geom.n,
        Linear::Fc(g) => g.n,
    }
}

/// Secure comparisons a block performs.
pub fn block_comparisons(b: &RingBlock) -> usize {
    match b {
        RingBlock::IConv(_) => 0,
        RingBlock::ReConv(l) | RingBlock::ReFc(l) => l.in_shape.iter().product(),
        RingBlock::TMaxPool { in_shape, s } => maxpool_comparisons(*in_shape, *s),
        RingBlock::TArgMax { len } => len.saturating_sub(1),
    }
}

fn baseline_for(b: &RingBlock) -> Option<BaselineCost> {
    match b {
        RingBlock::IConv(l) | RingBlock::ReConv(l) => match l.lin {
            Linear::Conv { geom, .. } => Some(cost_baseline(&geom, matches!(b, RingBlock::IConv(_)))),
            Linear::Fc(_) => None,
        },
        _ => None,
    }
}

/// One block's counts from both parties.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockMeasurement {
    pub index: usize,
    pub kind: &'static str,
    pub cost: CostVector,
    pub comparisons: u64,
    pub messages: u64,
    pub bytes: u64,
}

/// Per-block measured vectors, client and server summed.
pub fn measurements(client: &InferenceResult, server: &InferenceResult) -> Result<Vec<BlockMeasurement>> {
    if client.blocks.len() != server.blocks.len() {
        return Err(Error::Protocol("parties report different block counts".into()));
    }
    Ok(client
        .blocks
        .iter()
        .zip(&server.blocks)
        .map(|(c, s)| {
            let both = c.cost.plus(&s.cost);
            BlockMeasurement {
                index: c.index,
                kind: c.kind,
                cost: CostVector {
                    half_rounds: u(c.linear_half_rounds),
                    enc: both.enc,
                    mult: both.mul_plain,
                    dec: both.dec,
                    add: both.add,
                    rot: both.rot,
                    ciphertexts: s.cost.ciphertexts_sent,
                },
                comparisons: c.cost.drelu_elements,
                messages: (c.messages_sent + s.messages_sent) as u64,
                bytes: c.bytes_sent + s.bytes_sent,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub block: usize,
    pub field: &'static str,
    pub expected: u64,
    pub measured: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub index: usize,
    pub kind: &'static str,
    pub expected: Option<CostVector>,
    pub measured: CostVector,
    pub baseline: Option<BaselineCost>,
    pub comparisons_expected: usize,
    pub comparisons_measured: u64,
    pub messages: u64,
    pub bytes: u64,
    /// Per-channel and single-channel readings, for pooling blocks.
    pub comp_counts: Option<(CompCounts, CompCounts)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub rows: Vec<ReportRow>,
    pub mismatches: Vec<Mismatch>,
}

/// Lines measured counts up against the closed forms, block by block.
pub fn compare_report(measured: &[BlockMeasurement], plan: &RingPlan) -> Result<CostReport> {
    if measured.len() != plan.blocks.len() {
        return Err(Error::Shape(format!("{} measured blocks for a {}-block plan", measured.len(), plan.blocks.len())));
    }
    let mut rows = Vec::new();
    let mut mismatches = Vec::new();
    for (m, b) in measured.iter().zip(&plan.blocks) {
        let expected = block_cost(b);
        if let Some(e) = &expected {
            for ((field, want), got) in FIELDS.iter().zip(e.values()).zip(m.cost.values()) {
                if want != got {
                    mismatches.push(Mismatch { block: m.index, field, expected: want, measured: got });
                }
            }
        }
        let comparisons_expected = block_comparisons(b);
        if u(comparisons_expected) != m.comparisons {
            mismatches.push(Mismatch {
                block: m.index,
                field: "comparisons",
                expected: u(comparisons_expected),
                measured: m.comparisons,
            });
        }
        let comp_counts = match b {
            RingBlock::TMaxPool { in_shape: [c, h, w], s } => {
                Some((comp_counts(*c, *h, *w, *s, true), comp_counts(*c, *h, *w, *s, false)))
            }
            _ => None,
        };
        rows.push(ReportRow {
            index: m.index,
            kind: b.name(),
            expected,
            measured: m.cost,
            baseline: baseline_for(b),
            comparisons_expected,
            comparisons_measured: m.comparisons,
            messages: m.messages,
            bytes: m.bytes,
            comp_counts,
        });
    }
    Ok(CostReport { rows, mismatches })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    block: usize,
    kind: &'a str,
    source: &'a str,
    rounds: f64,
    enc: u64,
    mult: u64,
    dec: u64,
    add: u64,
    rot: u64,
    ciphertexts: u64,
    comparisons: Option<u64>,
    messages: Option<u64>,
    bytes: Option<u64>,
}

impl CostReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |r: &ReportRow, source, v: &CostVector, comparisons, traffic: Option<(u64, u64)>| {
            w.serialize(CsvRow {
                block: r.index,
                kind: r.kind,
                source,
                rounds: v.rounds(),
                enc: v.enc,
                mult: v.mult,
                dec: v.dec,
                add: v.add,
                rot: v.rot,
                ciphertexts: v.ciphertexts,
                comparisons,
                messages: traffic.map(|t| t.0),
                bytes: traffic.map(|t| t.1),
            })
        };
        for r in &self.rows {
            let err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
            put(r, "measured", &r.measured, Some(r.comparisons_measured), Some((r.messages, r.bytes))).map_err(err)?;
            if let Some(e) = &r.expected {
                put(r, "ours", e, Some(u(r.comparisons_expected)), None).map_err(err)?;
            }
            if let Some(b) = &r.baseline {
                put(r, "baseline", &b.before.plus(&b.linear), None, None).map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "block {} {}", r.index, r.kind);
            let _ = writeln!(out, "  measured  {}  messages {} bytes {}", r.measured, r.messages, r.bytes);
            if let Some(e) = &r.expected {
                let _ = writeln!(out, "  ours      {e}");
            }
            if let Some(b) = &r.baseline {
                let _ = writeln!(out, "  baseline  {}", b.before.plus(&b.linear));
                for t in &b.terms {
                    let _ = writeln!(
                        out,
                        "    {} {} {} {} = {}",
                        t.phase,
                        t.field,
                        t.relation.symbol(),
                        t.expression,
                        t.value
                    );
                }
            }
            let _ = writeln!(
                out,
                "  comparisons measured {} expected {}",
                r.comparisons_measured, r.comparisons_expected
            );
            if let Some((per, single)) = &r.comp_counts {
                let _ = writeln!(
                    out,
                    "  relu->pool {} pool->relu {} (single-channel pooling term: {} vs {})",
                    per.relu_then_pool, per.pool_then_relu, single.relu_then_pool, single.pool_then_relu
                );
            }
        }
        if self.ok() {
            out.push_str("all measured counts match\n");
        } else {
            for m in &self.mismatches {
                let _ = writeln!(
                    out,
                    "MISMATCH block {} {}: expected {} measured {}",
                    m.block, m.field, m.expected, m.measured
                );
            }
        }
        out
    }
}

/// Closed forms for every block of a plan, with no execution.
pub fn analytic_text(plan: &RingPlan) -> String {
    let mut out = String::new();
    for (i, b) in plan.blocks.iter().enumerate() {
        let _ = writeln!(out, "block {i} {}", b.name());
        if let Some(e) = block_cost(b) {
            let _ = writeln!(out, "  ours      {e}");
        }
        if let Some(base) = baseline_for(b) {
            let _ = writeln!(out, "  baseline  {}", base.before.plus(&base.linear));
            for t in &base.terms {
                let _ = writeln!(out, "    {} {} {} {} = {}", t.phase, t.field, t.relation.symbol(), t.expression, t.value);
            }
        }
        let _ = writeln!(out, "  comparisons {}", block_comparisons(b));
        if let RingBlock::TMaxPool { in_shape: [c, h, w], s } = b {
            let (per, single) = (comp_counts(*c, *h, *w, *s, true), comp_counts(*c, *h, *w, *s, false));
            let _ = writeln!(
                out,
                "  relu->pool {} pool->relu {} (single-channel pooling term: {} vs {})",
                per.relu_then_pool, per.pool_then_relu, single.relu_then_pool, single.pool_then_relu
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_preset_by_hand() {
        let g = preset("t3r1", 4096).unwrap();
        let c = cost_ours(&g);
        assert_eq!((c.before.rounds(), c.before.enc, c.before.mult, c.before.dec, c.before.add), (0.5, 0, 2, 1, 6));
        let l = c.linear;
        assert_eq!((l.rot, l.mult, l.dec, l.add, l.ciphertexts), (0, 64, 16, 64, 16));
        assert_eq!(cost_baseline(&g, false).linear.rot, 39);
    }

    #[test]
    fn degenerate_conv() {
        let g = ConvGeometry::new(8, (1, 1, 1), (1, 1, 1), 1, 0).unwrap();
        let l = cost_ours(&g).linear;
        assert_eq!((l.rot, l.mult, l.dec, l.add, l.ciphertexts), (0, 1, 1, 1, 1));
    }

    #[test]
    fn comparisons_drop_by_pool_area() {
        let c = comp_counts(1, 4, 4, 2, true);
        assert_eq!((c.relu_then_pool, c.pool_then_relu), (28, 16));
        for s in 2usize..5 {
            let (h, w, c) = (4 * s, 6 * s, 3);
            let relu_first = c * h * w;
            let relu_after = c * h.div_ceil(s) * w.div_ceil(s);
            assert_eq!(relu_first / relu_after, s * s);
        }
    }

    #[test]
    fn presets_are_valid_and_unknown_is_rejected() {
        for name in PRESETS {
            let g = preset(name, 4096).unwrap();
            assert!(g.out_len() <= 4096);
        }
        assert_eq!(preset("t3r5", 4096).unwrap().output_shape(), [96, 8, 8]);
        assert!(matches!(preset("t9", 4096), Err(Error::Param(_))));
    }
}
