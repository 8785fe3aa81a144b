//! Secure comparison: DReLU over additive shares, Beaver-triple selection,
//! pairwise maximum and the comparison trees used by pooling and argmax.

pub mod millionaire;
pub mod ot;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::phe::Party;
use crate::ring::{add_mod, mul_mod, prng, signed_rep, sub_mod};
use crate::runtime::Runtime;
use crate::transport::MsgType;
use ot::{ExtReceiver, ExtSender};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonKind {
    Ideal,
    Ot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComparisonBackend {
    pub kind: ComparisonKind,
    /// Base OT count for the OT backend.
    pub kappa: u32,
    pub digit_width: u32,
}

impl ComparisonBackend {
    pub fn ideal() -> Self {
        ComparisonBackend {
            kind: ComparisonKind::Ideal,
            kappa: 0,
            digit_width: 0,
        }
    }

    pub fn ot() -> Self {
        ComparisonBackend {
            kind: ComparisonKind::Ot,
            kappa: ot::BASE_OTS as u32,
            digit_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ComparisonKind::Ot {
            if self.kappa as usize != ot::BASE_OTS {
                return Err(Error::Unsupported("OT extension is fixed at 128 base OTs"));
            }
            if !(1..=8).contains(&self.digit_width) {
                return Err(Error::Param(format!("digit width {} not in 1..=8", self.digit_width)));
            }
        }
        Ok(())
    }
}

/// One party's shares of a multiplication triple (u, v, uv).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub u: u64,
    pub v: u64,
    pub w: u64,
}

/// Deterministic dealer triples for batch `batch`, both parties' halves.
pub fn dealer_triples(p: u64, seed: u64, batch: u64, count: usize) -> (Vec<BeaverTriple>, Vec<BeaverTriple>) {
    let mut rng = prng(seed, &format!("triple/{batch}"));
    let mut c = Vec::with_capacity(count);
    let mut s = Vec::with_capacity(count);
    for _ in 0..count {
        let (u, v) = (rng.gen_range(0..p), rng.gen_range(0..p));
        let w = mul_mod(u, v, p);
        let tc = BeaverTriple {
            u: rng.gen_range(0..p),
            v: rng.gen_range(0..p),
            w: rng.gen_range(0..p),
        };
        s.push(BeaverTriple {
            u: sub_mod(u, tc.u, p),
            v: sub_mod(v, tc.v, p),
            w: sub_mod(w, tc.w, p),
        });
        c.push(tc);
    }
    (c, s)
}

struct Deposit {
    x_server: Vec<u64>,
    out_server: Vec<bool>,
}

/// Trusted party of the hybrid model: sees both shares of each DReLU
/// input and hands out XOR shares of the sign bit. Lives in-process, so it
/// only serves sessions whose two parties share an address space.
pub struct IdealDealer {
    p: u64,
    seed: u64,
    slots: Mutex<HashMap<u64, Deposit>>,
    ready: Condvar,
    poisoned: AtomicBool,
}

impl IdealDealer {
    pub fn new(p: u64, seed: u64) -> Arc<Self> {
        Arc::new(IdealDealer {
            p,
            seed: seed ^ 0x5eed_dea1,
            slots: Mutex::new(HashMap::new()),
            ready: Condvar::new(),
            poisoned: AtomicBool::new(false),
        })
    }

    /// Wake and fail any waiter; used when one party aborts.
    pub fn poison(&self) {
        self.poisoned.store(true, Ordering::SeqCst);
        self.ready.notify_all();
    }

    fn deposit(&self, call: u64, x_server: Vec<u64>, out_server: Vec<bool>) {
        let mut g = self.slots.lock().expect("dealer lock");
        g.insert(call, Deposit { x_server, out_server });
        self.ready.notify_all();
    }

    fn collect(&self, call: u64, x_client: &[u64]) -> Result<Vec<bool>> {
        let mut g = self.slots.lock().expect("dealer lock");
        let d = loop {
            if let Some(d) = g.remove(&call) {
                break d;
            }
            if self.poisoned.load(Ordering::SeqCst) {
                return Err(Error::Protocol("peer aborted during comparison".into()));
            }
            let (ng, to) = self
                .ready
                .wait_timeout(g, Duration::from_secs(120))
                .expect("dealer lock");
            g = ng;
            if to.timed_out() && !g.contains_key(&call) {
                return Err(Error::Protocol("comparison dealer timed out".into()));
            }
        };
        if d.x_server.len() != x_client.len() {
            return Err(Error::Shape(format!(
                "DReLU batch {} vs {}",
                x_client.len(),
                d.x_server.len()
            )));
        }
        let p = self.p;
        Ok(x_client
            .iter()
            .zip(&d.x_server)
            .zip(&d.out_server)
            .map(|((&c, &s), &o)| (signed_rep(add_mod(c, s, p), p) >= 0) ^ o)
            .collect())
    }
}

enum OtEndpoint {
    None,
    Sender(ExtSender),
    Receiver(ExtReceiver),
}

/// One party's comparison state.
pub struct Comparator {
    pub backend: ComparisonBackend,
    dealer: Option<Arc<IdealDealer>>,
    ot: OtEndpoint,
    calls: u64,
    triple_batch: u64,
    triples: VecDeque<BeaverTriple>,
}

impl Comparator {
    pub fn new(backend: ComparisonBackend, dealer: Option<Arc<IdealDealer>>) -> Result<Self> {
        backend.validate()?;
        if backend.kind == ComparisonKind::Ideal && dealer.is_none() {
            return Err(Error::Param(
                "ideal comparison backend needs an in-process dealer (loopback transport)".into(),
            ));
        }
        Ok(Comparator {
            backend,
            dealer,
            ot: OtEndpoint::None,
            calls: 0,
            triple_batch: 0,
            triples: VecDeque::new(),
        })
    }

    pub fn dealer(&self) -> Option<&Arc<IdealDealer>> {
        self.dealer.as_ref()
    }

    /// Triples prepared and not yet consumed.
    pub fn stocked(&self) -> usize {
        self.triples.len()
    }
}

fn bit_mod(b: bool) -> u64 {
    b as u64
}

impl Runtime {
    fn ensure_ot(&mut self) -> Result<()> {
        if matches!(self.cmp.ot, OtEndpoint::None) {
            self.cmp.ot = match self.role {
                Party::Client => OtEndpoint::Receiver(ExtReceiver::setup(&mut self.sess, &mut self.rng)?),
                Party::Server => OtEndpoint::Sender(ExtSender::setup(&mut self.sess, &mut self.rng)?),
            };
        }
        Ok(())
    }

    /// XOR shares of 1{signed x >= 0} for each element of this party's
    /// share vector. The server may fix its own output share in advance.
    pub fn drelu(&mut self, x: &[u64], pin: Option<&[bool]>) -> Result<Vec<bool>> {
        let c = self.counters().clone();
        Counters::bump(&c.drelu_calls, 1);
        Counters::bump(&c.drelu_elements, x.len() as u64);
        let out_server: Vec<bool> = match (self.role, pin) {
            (Party::Server, Some(pin)) => {
                if pin.len() != x.len() {
                    return Err(Error::Shape("DReLU pin length".into()));
                }
                pin.to_vec()
            }
            (Party::Server, None) => (0..x.len()).map(|_| self.rng.gen()).collect(),
            (Party::Client, _) => Vec::new(),
        };
        let call = self.cmp.calls;
        self.cmp.calls += 1;
        if x.is_empty() {
            return Ok(out_server);
        }
        match self.cmp.backend.kind {
            ComparisonKind::Ideal => {
                let dealer = self.cmp.dealer.clone().expect("checked at construction");
                match self.role {
                    Party::Server => {
                        dealer.deposit(call, x.to_vec(), out_server.clone());
                        Ok(out_server)
                    }
                    Party::Client => dealer.collect(call, x),
                }
            }
            ComparisonKind::Ot => {
                self.ensure_ot()?;
                let p = self.p();
                let width = self.cmp.backend.digit_width;
                let mut out = Vec::with_capacity(x.len());
                for (i, chunk) in x.chunks(millionaire::CHUNK).enumerate() {
                    match &mut self.cmp.ot {
                        OtEndpoint::Receiver(ext) => out.extend(millionaire::client_batch(
                            &mut self.sess,
                            ext,
                            chunk,
                            p,
                            width,
                            &mut self.rng,
                        )?),
                        OtEndpoint::Sender(ext) => {
                            let pin = &out_server[i * millionaire::CHUNK..][..chunk.len()];
                            millionaire::server_batch(&mut self.sess, ext, chunk, p, width, pin, &mut self.rng)?;
                            out.extend_from_slice(pin);
                        }
                        OtEndpoint::None => unreachable!("set up above"),
                    }
                }
                Ok(out)
            }
        }
    }

    /// Chosen-message 1-of-2 OT; the server sends, the client chooses.
    pub fn ot_send(&mut self, msgs: &[(Vec<u8>, Vec<u8>)]) -> Result<()> {
        self.ensure_ot()?;
        match &mut self.cmp.ot {
            OtEndpoint::Sender(ext) => ot::send_chosen(&mut self.sess, ext, msgs),
            _ => Err(Error::Protocol("only the server sends in OT".into())),
        }
    }

    pub fn ot_recv(&mut self, choices: &[bool], len: usize) -> Result<Vec<Vec<u8>>> {
        self.ensure_ot()?;
        match &mut self.cmp.ot {
            OtEndpoint::Receiver(ext) => ot::recv_chosen(&mut self.sess, ext, choices, len),
            _ => Err(Error::Protocol("only the client receives in OT".into())),
        }
    }

    /// Generate `count` triples now (offline) and stock them.
    pub fn prepare_triples(&mut self, count: usize) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let batch = self.cmp.triple_batch;
        self.cmp.triple_batch += 1;
        let fresh = match self.cmp.backend.kind {
            ComparisonKind::Ideal => {
                let d = self.cmp.dealer.as_ref().expect("checked at construction");
                let (c, s) = dealer_triples(d.p, d.seed, batch, count);
                match self.role {
                    Party::Client => c,
                    Party::Server => s,
                }
            }
            ComparisonKind::Ot => self.ot_triples(count)?,
        };
        self.cmp.triples.extend(fresh);
        Ok(())
    }

    /// Triples from OT-based products of the cross terms.
    fn ot_triples(&mut self, count: usize) -> Result<Vec<BeaverTriple>> {
        let p = self.p();
        let bits = (64 - p.leading_zeros()) as usize;
        let pow: Vec<u64> = (0..bits).map(|j| (1u64 << j) % p).collect();
        let mut out = Vec::with_capacity(count);
        let per = 4096;
        for start in (0..count).step_by(per) {
            let k = per.min(count - start);
            let uv: Vec<(u64, u64)> = (0..k)
                .map(|_| (self.rng.gen_range(0..p), self.rng.gen_range(0..p)))
                .collect();
            match self.role {
                Party::Client => {
                    let choices: Vec<bool> = uv
                        .iter()
                        .flat_map(|&(u, v)| (0..bits).map(move |j| u >> j & 1 == 1).chain((0..bits).map(move |j| v >> j & 1 == 1)))
                        .collect();
                    let got = self.ot_recv(&choices, 8)?;
                    for (t, &(u, v)) in uv.iter().enumerate() {
                        let mut w = mul_mod(u, v, p);
                        for g in &got[t * 2 * bits..(t + 1) * 2 * bits] {
                            w = add_mod(w, u64::from_le_bytes(g[..8].try_into().expect("8")), p);
                        }
                        out.push(BeaverTriple { u, v, w });
                    }
                }
                Party::Server => {
                    let mut msgs = Vec::with_capacity(k * 2 * bits);
                    for &(u, v) in &uv {
                        let mut w = mul_mod(u, v, p);
                        for (other, j) in (0..bits).map(|j| (v, j)).chain((0..bits).map(|j| (u, j))) {
                            let r = self.rng.gen_range(0..p);
                            w = sub_mod(w, r, p);
                            let m1 = add_mod(r, mul_mod(pow[j], other, p), p);
                            msgs.push((r.to_le_bytes().to_vec(), m1.to_le_bytes().to_vec()));
                        }
                        out.push(BeaverTriple { u, v, w });
                    }
                    self.ot_send(&msgs)?;
                }
            }
        }
        Ok(out)
    }

    fn take_triples(&mut self, count: usize) -> Result<Vec<BeaverTriple>> {
        if self.cmp.triples.len() < count {
            let short = count - self.cmp.triples.len();
            self.prepare_triples(short)?;
        }
        Ok(self.cmp.triples.drain(..count).collect())
    }

    /// Shares of bit * x for XOR-shared bits and additively shared x, one
    /// Beaver multiplication per element.
    pub fn mux(&mut self, bits: &[bool], x: &[u64]) -> Result<Vec<u64>> {
        if bits.len() != x.len() {
            return Err(Error::Shape("mux operand lengths".into()));
        }
        Counters::bump(&self.counters().mux_calls, x.len() as u64);
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.p();
        let t = self.take_triples(x.len())?;
        // bit = b_C + b_S - 2 b_C b_S. Multiply (b_C + b_S) by
        // (x_C (1 - 2 b_C) + x_S (1 - 2 b_S)) and correct with 2 b x locally.
        let ys: Vec<u64> = bits
            .iter()
            .zip(x)
            .map(|(&b, &v)| if b { sub_mod(0, v, p) } else { v })
            .collect();
        let mut open: Vec<u64> = bits
            .iter()
            .zip(&t)
            .map(|(&b, t)| sub_mod(bit_mod(b), t.u, p))
            .collect();
        open.extend(ys.iter().zip(&t).map(|(&y, t)| sub_mod(y, t.v, p)));
        self.sess.send_u64s(MsgType::TreeLevel, &open)?;
        let theirs = self.sess.recv_u64s(MsgType::TreeLevel)?;
        if theirs.len() != open.len() {
            return Err(Error::Protocol("mux opening length".into()));
        }
        let n = x.len();
        let party0 = self.is_client();
        Ok((0..n)
            .map(|i| {
                let e = add_mod(open[i], theirs[i], p);
                let f = add_mod(open[n + i], theirs[n + i], p);
                let mut z = add_mod(t[i].w, add_mod(mul_mod(e, t[i].v, p), mul_mod(f, t[i].u, p), p), p);
                if party0 {
                    z = add_mod(z, mul_mod(e, f, p), p);
                }
                if bits[i] {
                    z = add_mod(z, add_mod(x[i], x[i], p), p);
                }
                z
            })
            .collect())
    }

    /// Elementwise max of two shared vectors; ties keep `x`.
    pub fn comp_max(&mut self, x: &[u64], y: &[u64]) -> Result<Vec<u64>> {
        Counters::bump(&self.counters().comp_calls, x.len() as u64);
        let p = self.p();
        let diff: Vec<u64> = x.iter().zip(y).map(|(&a, &b)| sub_mod(a, b, p)).collect();
        let b = self.drelu(&diff, None)?;
        let m = self.mux(&b, &diff)?;
        Ok(y.iter().zip(m).map(|(&a, b)| add_mod(a, b, p)).collect())
    }

    /// Max of every group, all groups advancing one tree level at a time.
    pub fn tree_max(&mut self, groups: &[Vec<u64>]) -> Result<Vec<u64>> {
        let mut level: Vec<Vec<u64>> = groups.to_vec();
        if level.iter().any(|g| g.is_empty()) {
            return Err(Error::Shape("empty comparison group".into()));
        }
        while level.iter().any(|g| g.len() > 1) {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for g in &level {
                for pair in g.chunks_exact(2) {
                    xs.push(pair[0]);
                    ys.push(pair[1]);
                }
            }
            let mut maxes = self.comp_max(&xs, &ys)?.into_iter();
            for g in level.iter_mut() {
                let odd = (g.len() % 2 == 1).then(|| g[g.len() - 1]);
                let mut next: Vec<u64> = maxes.by_ref().take(g.len() / 2).collect();
                next.extend(odd);
                *g = next;
            }
        }
        Ok(level.into_iter().map(|g| g[0]).collect())
    }

    /// Index of the largest shared value, revealed to the client only;
    /// ties go to the lower index. Returns the client's view.
    pub fn tree_argmax(&mut self, vals: &[u64]) -> Result<Option<usize>> {
        if vals.is_empty() {
            return Err(Error::Shape("argmax over nothing".into()));
        }
        let p = self.p();
        let party0 = self.is_client();
        let mut level: Vec<(u64, u64)> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, if party0 { i as u64 } else { 0 }))
            .collect();
        while level.len() > 1 {
            let pairs: Vec<_> = level.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            Counters::bump(&self.counters().comp_calls, pairs.len() as u64);
            let dv: Vec<u64> = pairs.iter().map(|(a, b)| sub_mod(a.0, b.0, p)).collect();
            let di: Vec<u64> = pairs.iter().map(|(a, b)| sub_mod(a.1, b.1, p)).collect();
            let bits = self.drelu(&dv, None)?;
            let mut both = bits.clone();
            both.extend_from_slice(&bits);
            let mut operand = dv;
            operand.extend_from_slice(&di);
            let sel = self.mux(&both, &operand)?;
            let k = pairs.len();
            let mut next: Vec<(u64, u64)> = pairs
                .iter()
                .enumerate()
                .map(|(i, (_, b))| (add_mod(b.0, sel[i], p), add_mod(b.1, sel[k + i], p)))
                .collect();
            if level.len() % 2 == 1 {
                next.push(level[level.len() - 1]);
            }
            level = next;
        }
        let idx = level[0].1;
        match self.role {
            Party::Server => {
                self.sess.send_u64s(MsgType::Result, &[idx])?;
                Ok(None)
            }
            Party::Client => {
                let s = self.sess.recv_u64s(MsgType::Result)?;
                let s = *s.first().ok_or_else(|| Error::Protocol("empty result".into()))?;
                let i = add_mod(idx, s, p) as usize;
                if i >= vals.len() {
                    return Err(Error::Protocol(format!("argmax index {i} out of range")));
                }
                Ok(Some(i))
            }
        }
    }
}
