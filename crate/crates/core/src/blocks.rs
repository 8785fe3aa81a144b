//! Block-by-block execution of a fixed-point plan by either party.
//!
//! Offline, every ReConv/ReFC block gets its triplet material: the server
//! fixes its share of the block input (it is the truncated output share of
//! the previous block, which the server chose itself), encrypts h3 and h4,
//! and the client encrypts its mask. Online, a ReConv costs one DReLU and
//! then exactly two messages: Enc_S(h9) from the client and the masked
//! product from the server.

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::linear::{Linear, WeightRows};
use crate::model::{RingBlock, RingLinear, RingPlan};
use crate::netadapt::{argmax_triples, maxpool_comparisons};
use crate::phe::Ciphertext;
use crate::ring::{sub_mod, add_mod, RingTensor};
use crate::runtime::{run_pair, PairConfig, Runtime};
use crate::share::{truncate_client, truncate_server};
use crate::transport::{half_rounds, Direction, MsgType, TraceEvent};
use crate::triplet::{
    client_online_h9, gen_client_offline, gen_server_offline, server_decrypt_assemble, ClientOfflineBundle,
    ServerOfflineBundle,
};

/// One party's record of one block.
#[derive(Clone, Debug)]
pub struct BlockResult {
    pub index: usize,
    pub kind: &'static str,
    /// Own share of the linear output before truncation.
    pub pre_trunc: Option<RingTensor>,
    /// Own share of the block output.
    pub output: RingTensor,
    pub class: Option<usize>,
    /// Online operations this party performed in the block.
    pub cost: OpCounters,
    pub messages_sent: usize,
    pub bytes_sent: u64,
    pub half_rounds: usize,
    /// Half-rounds after the block's DReLU finished (all of them when the
    /// block has none).
    pub linear_half_rounds: usize,
    /// Wall-clock time this party spent in the block.
    pub elapsed: std::time::Duration,
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub blocks: Vec<BlockResult>,
    /// Client only, when the plan ends in ArgMax.
    pub class: Option<usize>,
    /// Client only, when the plan does not end in ArgMax.
    pub output: Option<RingTensor>,
    pub offline: OpCounters,
    pub online: OpCounters,
}

impl RingPlan {
    pub fn triples_needed(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                RingBlock::TMaxPool { in_shape, s } => maxpool_comparisons(*in_shape, *s),
                RingBlock::TArgMax { len } => argmax_triples(*len),
                _ => 0,
            })
            .sum()
    }

    /// The same plan with all weights and biases zeroed: what a party
    /// without the model holds.
    pub fn public_view(&self) -> RingPlan {
        let mut out = self.clone();
        for b in &mut out.blocks {
            if let RingBlock::IConv(l) | RingBlock::ReConv(l) | RingBlock::ReFc(l) = b {
                l.weights.data.iter_mut().for_each(|v| *v = 0);
                l.bias.data.iter_mut().for_each(|v| *v = 0);
            }
        }
        out
    }
}

/// Ceiling windows of a c x h x w tensor, in output order.
pub fn pool_groups(v: &[u64], [c, h, w]: [usize; 3], s: usize) -> Vec<Vec<u64>> {
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut groups = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut g = Vec::with_capacity(s * s);
                for y in oy * s..((oy + 1) * s).min(h) {
                    for x in ox * s..((ox + 1) * s).min(w) {
                        g.push(v[(ch * h + y) * w + x]);
                    }
                }
                groups.push(g);
            }
        }
    }
    groups
}

fn pool_shape([c, h, w]: [usize; 3], s: usize) -> [usize; 3] {
    [c, h.div_ceil(s), w.div_ceil(s)]
}

fn truncate_own(t: &RingTensor, bits: u32, client: bool) -> RingTensor {
    let p = t.modulus;
    RingTensor {
        shape: t.shape.clone(),
        data: t
            .data
            .iter()
            .map(|&v| if client { truncate_client(v, bits) } else { truncate_server(v, bits, p) })
            .collect(),
        modulus: p,
        scale: t.scale.saturating_sub(bits),
    }
}

fn is_triplet(b: &RingBlock) -> bool {
    matches!(b, RingBlock::ReConv(_) | RingBlock::ReFc(_))
}

struct ServerState {
    weights: Option<WeightRows>,
    masks: Vec<Vec<u64>>,
    /// Server's output share of the linear layer, bias included.
    y_s: Option<RingTensor>,
    bundle: Option<ServerOfflineBundle>,
    /// Pinned output share of a max pool.
    pinned: Option<RingTensor>,
}

struct ClientState {
    bundle: Option<ClientOfflineBundle>,
    hbar: Vec<Ciphertext>,
    htilde: Vec<Ciphertext>,
}

fn block_stats(rt: &Runtime, index: usize, trace_start: usize) -> (usize, u64, usize, usize) {
    let events: Vec<&TraceEvent> = rt.sess.trace()[trace_start..]
        .iter()
        .filter(|e| match e {
            TraceEvent::Message { block, .. } | TraceEvent::Mark { block, .. } => *block == Some(index),
        })
        .collect();
    let (mut msgs, mut bytes) = (0, 0);
    for e in &events {
        if let TraceEvent::Message { dir: Direction::Sent, bytes: b, .. } = e {
            msgs += 1;
            bytes += b;
        }
    }
    let after = events
        .iter()
        .position(|e| matches!(e, TraceEvent::Mark { label: "drelu-done", .. }))
        .map_or(0, |k| k + 1);
    (msgs, bytes, half_rounds(events.iter().copied()), half_rounds(events[after..].iter().copied()))
}

fn reveal_result(rt: &mut Runtime, last: &RingTensor) -> Result<Option<RingTensor>> {
    if rt.is_client() {
        let s = rt.sess.recv_u64s(MsgType::Result)?;
        let theirs = RingTensor::new(&last.shape, s, last.modulus)
            .map_err(|_| Error::Protocol("result share has the wrong length".into()))?;
        Ok(Some(last.add(&theirs)?.with_scale(last.scale)))
    } else {
        rt.sess.send_u64s(MsgType::Result, &last.data)?;
        Ok(None)
    }
}

/// Server side of one inference.
pub fn server_inference(rt: &mut Runtime, plan: &RingPlan) -> Result<InferenceResult> {
    check_plan(rt, plan)?;
    let p = rt.p();
    let n = rt.phe.slots();
    let start = rt.snapshot();

    // Offline: walk the plan tracking the server's own activation share.
    let mut a_s = RingTensor::zeros(&plan.input_shape, p);
    let mut states = Vec::with_capacity(plan.blocks.len());
    for (i, b) in plan.blocks.iter().enumerate() {
        rt.sess.set_block(Some(i));
        let st = match b {
            RingBlock::IConv(l) => {
                let (masks, y_s) = l.lin.sample_mask(n, &l.bias, &mut rt.rng)?;
                a_s = truncate_own(&y_s, l.trunc, false);
                ServerState { weights: Some(l.lin.encode_weights(&l.weights)?), masks, y_s: Some(y_s), bundle: None, pinned: None }
            }
            RingBlock::ReConv(l) | RingBlock::ReFc(l) => {
                let input = a_s.clone().reshape(&l.in_shape)?;
                let bundle = gen_server_offline(&rt.phe, &rt.keys, &l.lin, &input, &l.bias, &mut rt.rng)?;
                a_s = truncate_own(&bundle.y_share_s, l.trunc, false);
                ServerState {
                    weights: Some(l.lin.encode_weights(&l.weights)?),
                    masks: bundle.r_s.clone(),
                    y_s: Some(bundle.y_share_s.clone()),
                    bundle: Some(bundle),
                    pinned: None,
                }
            }
            RingBlock::TMaxPool { in_shape, s } => {
                let pinned = RingTensor::random(&pool_shape(*in_shape, *s), p, &mut rt.rng);
                a_s = pinned.clone();
                ServerState { weights: None, masks: Vec::new(), y_s: None, bundle: None, pinned: Some(pinned) }
            }
            RingBlock::TArgMax { .. } => {
                ServerState { weights: None, masks: Vec::new(), y_s: None, bundle: None, pinned: None }
            }
        };
        states.push(st);
    }
    // Client masks first, then our triplet ciphertexts, so neither side
    // blocks on a full send buffer.
    for (i, b) in plan.blocks.iter().enumerate() {
        if let (RingBlock::ReConv(l) | RingBlock::ReFc(l), Some(bundle)) = (b, states[i].bundle.as_mut()) {
            rt.sess.set_block(Some(i));
            let ct_h = rt.sess.recv_cts(MsgType::OfflineCtH, &rt.phe)?;
            bundle.attach_client(&rt.phe, &l.lin, &ct_h)?;
        }
    }
    for (i, st) in states.iter().enumerate() {
        if let Some(bundle) = &st.bundle {
            rt.sess.set_block(Some(i));
            let mut cts = bundle.ct_hbar.clone();
            cts.extend(bundle.ct_htilde.iter().cloned());
            rt.sess.send_cts(MsgType::OfflineCtHbarHtilde, &rt.phe, &cts)?;
        }
    }
    rt.sess.set_block(None);
    rt.prepare_triples(plan.triples_needed())?;
    rt.sess.finish_offline()?;
    let online_start = rt.snapshot();

    let mut results = Vec::with_capacity(plan.blocks.len());
    let mut cur = RingTensor::zeros(&plan.input_shape, p);
    for (i, (b, st)) in plan.blocks.iter().zip(&states).enumerate() {
        rt.sess.set_block(Some(i));
        let before = rt.snapshot();
        let started = std::time::Instant::now();
        let trace_start = rt.sess.trace().len();
        let mut pre_trunc = None;
        let output = match b {
            RingBlock::IConv(l) | RingBlock::ReConv(l) | RingBlock::ReFc(l) => {
                let ct_a = if let Some(bundle) = &st.bundle {
                    rt.drelu(&cur.data, Some(&bundle.a_hat_s))?;
                    rt.sess.mark("drelu-done");
                    let ct_hacute = rt.sess.recv_cts(MsgType::OnlineCtHacute, &rt.phe)?;
                    server_decrypt_assemble(&rt.phe, &rt.keys.secret, &l.lin, bundle, &ct_hacute)?
                } else {
                    rt.sess.recv_cts(MsgType::OnlineCtA, &rt.phe)?
                };
                let w = st.weights.as_ref().expect("linear block has weights");
                let ct_c = l.lin.apply(&rt.phe, &ct_a, w, &st.masks)?;
                rt.sess.send_cts(MsgType::OnlineCtC, &rt.phe, &ct_c)?;
                let y_s = st.y_s.clone().expect("linear block has a mask");
                let out = truncate_own(&y_s, l.trunc, false);
                pre_trunc = Some(y_s);
                out
            }
            RingBlock::TMaxPool { in_shape, s } => {
                let m_s = rt.tree_max(&pool_groups(&cur.data, *in_shape, *s))?;
                let pinned = st.pinned.as_ref().expect("pool has a pinned share");
                let reshare: Vec<u64> = m_s.iter().zip(&pinned.data).map(|(&m, &r)| sub_mod(m, r, p)).collect();
                rt.sess.send_u64s(MsgType::Reshare, &reshare)?;
                pinned.clone()
            }
            RingBlock::TArgMax { .. } => {
                rt.tree_argmax(&cur.data)?;
                RingTensor::zeros(&[1], p)
            }
        };
        let (messages_sent, bytes_sent, hr, lhr) = block_stats(rt, i, trace_start);
        results.push(BlockResult {
            index: i,
            kind: b.name(),
            pre_trunc,
            output: output.clone(),
            class: None,
            cost: rt.snapshot().since(&before),
            messages_sent,
            bytes_sent,
            half_rounds: hr,
            linear_half_rounds: lhr,
            elapsed: started.elapsed(),
        });
        cur = output;
    }
    rt.sess.set_block(None);
    if !matches!(plan.blocks.last(), Some(RingBlock::TArgMax { .. })) {
        reveal_result(rt, &cur)?;
    }
    rt.sess.finish();
    let end = rt.snapshot();
    Ok(InferenceResult {
        blocks: results,
        class: None,
        output: None,
        offline: online_start.since(&start),
        online: end.since(&online_start),
    })
}

/// Client side of one inference on input `x` (fixed point, scale f).
pub fn client_inference(rt: &mut Runtime, plan: &RingPlan, x: &RingTensor) -> Result<InferenceResult> {
    check_plan(rt, plan)?;
    if x.shape != plan.input_shape || x.modulus != rt.p() {
        return Err(Error::Shape(format!("input {:?} for a plan expecting {:?}", x.shape, plan.input_shape)));
    }
    let p = rt.p();
    let start = rt.snapshot();

    let mut states: Vec<ClientState> = Vec::with_capacity(plan.blocks.len());
    for (i, b) in plan.blocks.iter().enumerate() {
        let bundle = match b {
            RingBlock::ReConv(l) | RingBlock::ReFc(l) => {
                rt.sess.set_block(Some(i));
                let bundle = gen_client_offline(&rt.phe, &rt.keys, &l.lin, &l.in_shape, &mut rt.rng)?;
                rt.sess.send_cts(MsgType::OfflineCtH, &rt.phe, &bundle.ct_h)?;
                Some(bundle)
            }
            _ => None,
        };
        states.push(ClientState { bundle, hbar: Vec::new(), htilde: Vec::new() });
    }
    for (i, b) in plan.blocks.iter().enumerate() {
        if is_triplet(b) {
            rt.sess.set_block(Some(i));
            let mut cts = rt.sess.recv_cts(MsgType::OfflineCtHbarHtilde, &rt.phe)?;
            let l = b.linear().expect("triplet block is linear");
            let sigma = l.in_shape.iter().product::<usize>().div_ceil(rt.phe.slots());
            if cts.len() != 2 * sigma {
                return Err(Error::Protocol(format!("{} triplet ciphertexts, {} expected", cts.len(), 2 * sigma)));
            }
            states[i].htilde = cts.split_off(sigma);
            states[i].hbar = cts;
        }
    }
    rt.sess.set_block(None);
    rt.prepare_triples(plan.triples_needed())?;
    rt.sess.finish_offline()?;
    let online_start = rt.snapshot();

    let mut results = Vec::with_capacity(plan.blocks.len());
    let mut cur = x.clone();
    let mut class = None;
    for (i, (b, st)) in plan.blocks.iter().zip(&states).enumerate() {
        rt.sess.set_block(Some(i));
        let before = rt.snapshot();
        let started = std::time::Instant::now();
        let trace_start = rt.sess.trace().len();
        let mut pre_trunc = None;
        let mut block_class = None;
        let output = match b {
            RingBlock::IConv(l) => {
                let rows = l.lin.encode_input(&cur.clone().reshape(&l.in_shape)?)?;
                let cts = rows
                    .iter()
                    .map(|r| rt.phe.encrypt(&rt.keys.public, r, &mut rt.rng))
                    .collect::<Result<Vec<_>>>()?;
                rt.sess.send_cts(MsgType::OnlineCtA, &rt.phe, &cts)?;
                let y = recv_product(rt, l)?;
                let out = truncate_own(&y, l.trunc, true);
                pre_trunc = Some(y);
                out
            }
            RingBlock::ReConv(l) | RingBlock::ReFc(l) => {
                let bundle = st.bundle.as_ref().expect("triplet block has a client bundle");
                let a_c = cur.clone().reshape(&l.in_shape)?;
                let bits = rt.drelu(&a_c.data, None)?;
                rt.sess.mark("drelu-done");
                let h9 = client_online_h9(&rt.phe, &a_c, &bits, &bundle.r_c, &st.hbar, &st.htilde)?;
                rt.sess.send_cts(MsgType::OnlineCtHacute, &rt.phe, &h9)?;
                let y = recv_product(rt, l)?;
                let out = truncate_own(&y, l.trunc, true);
                pre_trunc = Some(y);
                out
            }
            RingBlock::TMaxPool { in_shape, s } => {
                let m_c = rt.tree_max(&pool_groups(&cur.data, *in_shape, *s))?;
                let reshare = rt.sess.recv_u64s(MsgType::Reshare)?;
                if reshare.len() != m_c.len() {
                    return Err(Error::Protocol("reshare length".into()));
                }
                let data = m_c.iter().zip(&reshare).map(|(&a, &b)| add_mod(a, b, p)).collect();
                RingTensor::new(&pool_shape(*in_shape, *s), data, p)?.with_scale(cur.scale)
            }
            RingBlock::TArgMax { .. } => {
                let c = rt.tree_argmax(&cur.data)?.expect("client learns the class");
                block_class = Some(c);
                class = Some(c);
                RingTensor::new(&[1], vec![c as u64], p)?
            }
        };
        let (messages_sent, bytes_sent, hr, lhr) = block_stats(rt, i, trace_start);
        results.push(BlockResult {
            index: i,
            kind: b.name(),
            pre_trunc,
            output: output.clone(),
            class: block_class,
            cost: rt.snapshot().since(&before),
            messages_sent,
            bytes_sent,
            half_rounds: hr,
            linear_half_rounds: lhr,
            elapsed: started.elapsed(),
        });
        cur = output;
    }
    rt.sess.set_block(None);
    let output = if matches!(plan.blocks.last(), Some(RingBlock::TArgMax { .. })) {
        None
    } else {
        reveal_result(rt, &cur)?
    };
    rt.sess.finish();
    let end = rt.snapshot();
    Ok(InferenceResult {
        blocks: results,
        class,
        output,
        offline: online_start.since(&start),
        online: end.since(&online_start),
    })
}

fn recv_product(rt: &mut Runtime, l: &RingLinear) -> Result<RingTensor> {
    let cts = rt.sess.recv_cts(MsgType::OnlineCtC, &rt.phe)?;
    if cts.len() != l.lin.output_rows() {
        return Err(Error::Protocol(format!("{} product ciphertexts, {} expected", cts.len(), l.lin.output_rows())));
    }
    let rows = cts
        .iter()
        .map(|ct| rt.phe.decrypt(&rt.keys.secret, ct))
        .collect::<Result<Vec<_>>>()?;
    Ok(l.lin.decode_output(&rows, rt.p())?.with_scale(l.bias.scale))
}

fn check_plan(rt: &Runtime, plan: &RingPlan) -> Result<()> {
    if plan.params.p != rt.p() || plan.params.n != rt.phe.slots() {
        return Err(Error::Param("plan was quantized for different protocol parameters".into()));
    }
    for b in &plan.blocks {
        if let Some(l) = b.linear() {
            if let Linear::Conv { geom, .. } = l.lin {
                geom.validate()?;
            }
        }
    }
    Ok(())
}

/// Both parties over a loopback transport; returns (client, server).
pub fn run_inference(
    cfg: &PairConfig,
    client_plan: &RingPlan,
    server_plan: &RingPlan,
    x: &RingTensor,
) -> Result<(InferenceResult, InferenceResult)> {
    run_pair(
        cfg,
        |rt| client_inference(rt, client_plan, x),
        |rt| server_inference(rt, server_plan),
    )
}
