//! DReLU from digit-wise millionaires' comparisons.
//!
//! With shares x = x_C + x_S (mod p) and h = (p-1)/2, the integer sum
//! T = x_C + x_S lies in [0, 2p-2] and
//! DReLU = 1 ^ [T >= h+1] ^ [T >= p] ^ [T >= p+h+1].
//! Each threshold test T >= K is the comparison x_C + 1 > max(0, K - x_S)
//! between a client-held and a server-held integer. The server is the OT
//! sender throughout; all XOR shares of intermediate bits are combined with
//! a binary tree of AND gates evaluated on OT-generated bit triples.

use rayon::prelude::*;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::ot::{pack_bits, unpack_bits, ExtReceiver, ExtSender, Key};
use crate::error::{Error, Result};
use crate::ring::Prng;
use crate::transport::{MsgType, Session};

/// Elements per extension batch; bounds the size of one OT matrix.
pub const CHUNK: usize = 2048;
const THRESHOLDS: usize = 3;

#[derive(Clone, Copy, Debug)]
struct BitTriple {
    a: bool,
    b: bool,
    c: bool,
}

struct Layout {
    m: usize,
    digits: usize,
    width: u32,
    ands: usize,
}

impl Layout {
    fn new(m: usize, p: u64, width: u32) -> Self {
        let top = p + (p - 1) / 2 + 1;
        let bits = 64 - top.leading_zeros();
        let digits = bits.div_ceil(width) as usize;
        Layout {
            m,
            digits,
            width,
            ands: THRESHOLDS * m * 2 * (digits - 1),
        }
    }

    fn leaf_ots(&self) -> usize {
        self.m * self.digits * self.width as usize
    }

    fn entries(&self) -> usize {
        1 << self.width
    }

    fn digit(&self, v: u64, i: usize) -> usize {
        ((v >> (self.width as usize * i)) & ((1 << self.width) - 1)) as usize
    }
}

fn thresholds(p: u64) -> [u64; THRESHOLDS] {
    let h = (p - 1) / 2;
    [h + 1, p, p + h + 1]
}

fn leaf_pad(keys: &[&Key]) -> u8 {
    let mut h = Sha256::new();
    for k in keys {
        h.update(&k[..16]);
    }
    h.finalize()[0]
}

fn lsb(k: &Key) -> bool {
    k[31] & 1 == 1
}

/// Leaf bits of one comparison: (gt, eq) per digit, least significant first.
type Leaves = Vec<(bool, bool)>;

/// Evaluate the combine tree over XOR-shared leaves.
fn combine(
    sess: &mut Session,
    mut nodes: Vec<Leaves>,
    triples: &[BitTriple],
    party0: bool,
) -> Result<Vec<bool>> {
    let mut next_triple = 0;
    while nodes[0].len() > 1 {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for leaves in &nodes {
            for pair in leaves.chunks_exact(2) {
                let (lo, hi) = (pair[0], pair[1]);
                xs.push(hi.1);
                ys.push(lo.0);
                xs.push(hi.1);
                ys.push(lo.1);
            }
        }
        let t = &triples[next_triple..next_triple + xs.len()];
        next_triple += xs.len();
        let z = and_gates(sess, &xs, &ys, t, party0)?;
        let mut zi = 0;
        for leaves in nodes.iter_mut() {
            let mut merged = Vec::with_capacity(leaves.len().div_ceil(2));
            for pair in leaves.chunks(2) {
                if pair.len() == 2 {
                    let hi = pair[1];
                    merged.push((hi.0 ^ z[zi], z[zi + 1]));
                    zi += 2;
                } else {
                    merged.push(pair[0]);
                }
            }
            *leaves = merged;
        }
    }
    Ok(nodes.into_iter().map(|l| l[0].0).collect())
}

fn and_gates(
    sess: &mut Session,
    xs: &[bool],
    ys: &[bool],
    t: &[BitTriple],
    party0: bool,
) -> Result<Vec<bool>> {
    let mine: Vec<bool> = xs
        .iter()
        .zip(ys)
        .zip(t)
        .flat_map(|((x, y), t)| [x ^ t.a, y ^ t.b])
        .collect();
    sess.send(MsgType::OtExt, pack_bits(&mine))?;
    let theirs = unpack_bits(&sess.recv(MsgType::OtExt)?, mine.len())?;
    Ok(t.iter()
        .enumerate()
        .map(|(i, t)| {
            let d = mine[2 * i] ^ theirs[2 * i];
            let e = mine[2 * i + 1] ^ theirs[2 * i + 1];
            t.c ^ (d & t.b) ^ (e & t.a) ^ (party0 & d & e)
        })
        .collect())
}

fn finish(gts: &[bool], m: usize, party0: bool) -> Vec<bool> {
    (0..m)
        .map(|e| party0 ^ gts[e] ^ gts[m + e] ^ gts[2 * m + e])
        .collect()
}

/// Client side of one batch. `x` holds the client's shares.
pub fn client_batch(
    sess: &mut Session,
    ext: &mut ExtReceiver,
    x: &[u64],
    p: u64,
    width: u32,
    rng: &mut Prng,
) -> Result<Vec<bool>> {
    let lay = Layout::new(x.len(), p, width);
    let mut choices = Vec::with_capacity(lay.leaf_ots() + 2 * lay.ands);
    for &xc in x {
        let v = xc + 1;
        for i in 0..lay.digits {
            let d = lay.digit(v, i);
            choices.extend((0..width).map(|j| d >> j & 1 == 1));
        }
    }
    let ab: Vec<bool> = (0..2 * lay.ands).map(|_| rng.gen()).collect();
    choices.extend_from_slice(&ab);
    let keys = ext.extend(sess, &choices)?;

    let body = sess.recv(MsgType::OtExt)?;
    let table_len = lay.m * lay.digits * lay.entries();
    if body.len() != table_len + (2 * lay.ands).div_ceil(8) {
        return Err(Error::Protocol("comparison table length".into()));
    }
    let corr = unpack_bits(&body[table_len..], 2 * lay.ands)?;

    let w = width as usize;
    let mut nodes: Vec<Leaves> = vec![Vec::with_capacity(lay.digits); THRESHOLDS * lay.m];
    for (e, &xc) in x.iter().enumerate() {
        let v = xc + 1;
        for i in 0..lay.digits {
            let slot = e * lay.digits + i;
            let base = slot * w;
            let sel: Vec<&Key> = keys[base..base + w].iter().collect();
            let entry = body[slot * lay.entries() + lay.digit(v, i)] ^ leaf_pad(&sel);
            for k in 0..THRESHOLDS {
                nodes[k * lay.m + e].push((entry >> (2 * k) & 1 == 1, entry >> (2 * k + 1) & 1 == 1));
            }
        }
    }

    let off = lay.leaf_ots();
    let triples: Vec<BitTriple> = (0..lay.ands)
        .map(|t| {
            let (a, b) = (ab[2 * t], ab[2 * t + 1]);
            let t1 = lsb(&keys[off + 2 * t]) ^ (a & corr[2 * t]);
            let t2 = lsb(&keys[off + 2 * t + 1]) ^ (b & corr[2 * t + 1]);
            BitTriple { a, b, c: (a & b) ^ t1 ^ t2 }
        })
        .collect();

    let gts = combine(sess, nodes, &triples, true)?;
    let mut out = finish(&gts, lay.m, true);
    let delta = unpack_bits(&sess.recv(MsgType::OtExt)?, lay.m)?;
    for (o, d) in out.iter_mut().zip(delta) {
        *o ^= d;
    }
    Ok(out)
}

/// Server side of one batch. The server's output share is forced to `pin`.
pub fn server_batch(
    sess: &mut Session,
    ext: &mut ExtSender,
    x: &[u64],
    p: u64,
    width: u32,
    pin: &[bool],
    rng: &mut Prng,
) -> Result<()> {
    let lay = Layout::new(x.len(), p, width);
    let keys = ext.extend(sess, lay.leaf_ots() + 2 * lay.ands)?;
    let ks = thresholds(p);
    let w = width as usize;
    let entries = lay.entries();

    // Server-side leaf shares are random masks; the table hides them.
    let masks: Vec<u8> = (0..lay.m * lay.digits).map(|_| rng.gen::<u8>() & 0x3f).collect();
    let mut body = vec![0u8; lay.m * lay.digits * entries];
    body.par_chunks_mut(lay.digits * entries)
        .enumerate()
        .for_each(|(e, rows)| {
            let ys = ks.map(|k| k.saturating_sub(x[e]));
            for i in 0..lay.digits {
                let slot = e * lay.digits + i;
                let base = slot * w;
                let yd = ys.map(|y| lay.digit(y, i));
                for u in 0..entries {
                    let sel: Vec<&Key> = (0..w).map(|j| &keys[base + j][u >> j & 1]).collect();
                    let mut val = 0u8;
                    for (k, &y) in yd.iter().enumerate() {
                        val |= ((u > y) as u8) << (2 * k) | ((u == y) as u8) << (2 * k + 1);
                    }
                    rows[i * entries + u] = val ^ masks[slot] ^ leaf_pad(&sel);
                }
            }
        });

    let off = lay.leaf_ots();
    let mut corr = Vec::with_capacity(2 * lay.ands);
    let mut triples = Vec::with_capacity(lay.ands);
    for t in 0..lay.ands {
        let (a, b): (bool, bool) = (rng.gen(), rng.gen());
        let [k0, k1] = &keys[off + 2 * t];
        let [j0, j1] = &keys[off + 2 * t + 1];
        corr.push(lsb(k0) ^ lsb(k1) ^ b);
        corr.push(lsb(j0) ^ lsb(j1) ^ a);
        triples.push(BitTriple {
            a,
            b,
            c: (a & b) ^ lsb(k0) ^ lsb(j0),
        });
    }
    body.extend(pack_bits(&corr));
    sess.send(MsgType::OtExt, body)?;

    let mut nodes: Vec<Leaves> = vec![Vec::with_capacity(lay.digits); THRESHOLDS * lay.m];
    for e in 0..lay.m {
        for i in 0..lay.digits {
            let mask = masks[e * lay.digits + i];
            for k in 0..THRESHOLDS {
                nodes[k * lay.m + e].push((mask >> (2 * k) & 1 == 1, mask >> (2 * k + 1) & 1 == 1));
            }
        }
    }
    let gts = combine(sess, nodes, &triples, false)?;
    let own = finish(&gts, lay.m, false);
    let delta: Vec<bool> = own.iter().zip(pin).map(|(a, b)| a ^ b).collect();
    sess.send(MsgType::OtExt, pack_bits(&delta))
}
