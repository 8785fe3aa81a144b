//! Oblivious transfer. Base random OTs follow Chou-Orlandi over Ristretto;
//! bulk OTs are extended from 128 of them with a semi-honest IKNP-style
//! extension. The server is always the extension sender.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ring::Prng;
use crate::transport::{MsgType, Session};

pub type Key = [u8; 32];
pub const BASE_OTS: usize = 128;

fn hash_point(tag: u64, i: usize, p: &RistrettoPoint) -> Key {
    let mut h = Sha256::new();
    h.update(b"base-ot");
    h.update(tag.to_le_bytes());
    h.update((i as u64).to_le_bytes());
    h.update(p.compress().as_bytes());
    h.finalize().into()
}

/// Base random-OT sender: returns both keys of every instance.
pub fn base_send<R: RngCore + CryptoRng>(
    sess: &mut Session,
    count: usize,
    tag: u64,
    rng: &mut R,
) -> Result<Vec<[Key; 2]>> {
    let a = Scalar::random(rng);
    let big_a = RISTRETTO_BASEPOINT_TABLE * &a;
    sess.send(MsgType::OtBase, big_a.compress().as_bytes().to_vec())?;
    let bs = sess.recv(MsgType::OtBase)?;
    if bs.len() != 32 * count {
        return Err(Error::Protocol("base OT reply length".into()));
    }
    let a_big_a = a * big_a;
    bs.chunks_exact(32)
        .enumerate()
        .map(|(i, c)| {
            let b = CompressedRistretto::from_slice(c)
                .ok()
                .and_then(|c| c.decompress())
                .ok_or_else(|| Error::Protocol("invalid group element".into()))?;
            let ab = a * b;
            Ok([hash_point(tag, i, &ab), hash_point(tag, i, &(ab - a_big_a))])
        })
        .collect()
}

/// Base random-OT receiver: returns the key selected by each choice bit.
pub fn base_recv<R: RngCore + CryptoRng>(
    sess: &mut Session,
    choices: &[bool],
    tag: u64,
    rng: &mut R,
) -> Result<Vec<Key>> {
    let a_bytes = sess.recv(MsgType::OtBase)?;
    let big_a = CompressedRistretto::from_slice(&a_bytes)
        .ok()
        .and_then(|c| c.decompress())
        .ok_or_else(|| Error::Protocol("invalid group element".into()))?;
    let mut out = Vec::with_capacity(32 * choices.len());
    let mut keys = Vec::with_capacity(choices.len());
    for (i, &c) in choices.iter().enumerate() {
        let b = Scalar::random(rng);
        let mut big_b = RISTRETTO_BASEPOINT_TABLE * &b;
        if c {
            big_b += big_a;
        }
        out.extend_from_slice(big_b.compress().as_bytes());
        keys.push(hash_point(tag, i, &(b * big_a)));
    }
    sess.send(MsgType::OtBase, out)?;
    Ok(keys)
}

fn prg_bits(seed: &Key, batch: u64, m: usize) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(seed);
    h.update(batch.to_le_bytes());
    let mut g = Prng::from_seed(h.finalize().into());
    let mut v = vec![0u8; m.div_ceil(8)];
    g.fill_bytes(&mut v);
    v
}

fn row_key(batch: u64, i: usize, row: u128) -> Key {
    let mut h = Sha256::new();
    h.update(b"ext-ot");
    h.update(batch.to_le_bytes());
    h.update((i as u64).to_le_bytes());
    h.update(row.to_le_bytes());
    h.finalize().into()
}

/// Rows of the transposed 128 x m bit matrix.
fn transpose(cols: &[Vec<u8>], m: usize) -> Vec<u128> {
    let mut rows = vec![0u128; m];
    for (j, col) in cols.iter().enumerate() {
        let bit = 1u128 << j;
        for (byte_idx, &byte) in col.iter().enumerate() {
            if byte == 0 {
                continue;
            }
            for b in 0..8 {
                if byte >> b & 1 == 1 {
                    if let Some(r) = rows.get_mut(byte_idx * 8 + b) {
                        *r |= bit;
                    }
                }
            }
        }
    }
    rows
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut v = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            v[i / 8] |= 1 << (i % 8);
        }
    }
    v
}

pub fn unpack_bits(bytes: &[u8], m: usize) -> Result<Vec<bool>> {
    if bytes.len() != m.div_ceil(8) {
        return Err(Error::Protocol("bit vector length".into()));
    }
    Ok((0..m).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Extension state held by the server (sender side).
pub struct ExtSender {
    s: u128,
    seeds: Vec<Key>,
    batch: u64,
}

/// Extension state held by the client (receiver side).
pub struct ExtReceiver {
    seeds: Vec<[Key; 2]>,
    batch: u64,
}

impl ExtSender {
    pub fn setup(sess: &mut Session, rng: &mut Prng) -> Result<Self> {
        let s: u128 = rng.gen();
        let choices: Vec<bool> = (0..BASE_OTS).map(|j| s >> j & 1 == 1).collect();
        let seeds = base_recv(sess, &choices, 0, rng)?;
        Ok(ExtSender { s, seeds, batch: 0 })
    }

    /// Random OTs: both keys of `m` fresh instances.
    pub fn extend(&mut self, sess: &mut Session, m: usize) -> Result<Vec<[Key; 2]>> {
        self.batch += 1;
        let u = sess.recv(MsgType::OtExt)?;
        let col_len = m.div_ceil(8);
        if u.len() != BASE_OTS * col_len {
            return Err(Error::Protocol("extension matrix length".into()));
        }
        let cols: Vec<Vec<u8>> = (0..BASE_OTS)
            .map(|j| {
                let mut q = prg_bits(&self.seeds[j], self.batch, m);
                if self.s >> j & 1 == 1 {
                    for (x, y) in q.iter_mut().zip(&u[j * col_len..(j + 1) * col_len]) {
                        *x ^= y;
                    }
                }
                q
            })
            .collect();
        Ok(transpose(&cols, m)
            .into_iter()
            .enumerate()
            .map(|(i, q)| [row_key(self.batch, i, q), row_key(self.batch, i, q ^ self.s)])
            .collect())
    }
}

impl ExtReceiver {
    pub fn setup(sess: &mut Session, rng: &mut Prng) -> Result<Self> {
        let seeds = base_send(sess, BASE_OTS, 0, rng)?;
        Ok(ExtReceiver { seeds, batch: 0 })
    }

    pub fn extend(&mut self, sess: &mut Session, choices: &[bool]) -> Result<Vec<Key>> {
        self.batch += 1;
        let m = choices.len();
        let r = pack_bits(choices);
        let mut cols = Vec::with_capacity(BASE_OTS);
        let mut u = Vec::with_capacity(BASE_OTS * r.len());
        for [k0, k1] in &self.seeds {
            let t = prg_bits(k0, self.batch, m);
            let t1 = prg_bits(k1, self.batch, m);
            u.extend(t.iter().zip(&t1).zip(&r).map(|((a, b), c)| a ^ b ^ c));
            cols.push(t);
        }
        sess.send(MsgType::OtExt, u)?;
        Ok(transpose(&cols, m)
            .into_iter()
            .enumerate()
            .map(|(i, t)| row_key(self.batch, i, t))
            .collect())
    }
}

/// Stretch a key into `len` pad bytes.
pub fn pad(key: &Key, len: usize) -> Vec<u8> {
    if len <= 32 {
        return key[..len].to_vec();
    }
    let mut out = Vec::with_capacity(len);
    let mut ctr = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(key);
        h.update(ctr.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        ctr += 1;
    }
    out.truncate(len);
    out
}

/// Chosen-message 1-of-2 OT, sender side, over extended random OTs.
pub fn send_chosen(sess: &mut Session, ext: &mut ExtSender, msgs: &[(Vec<u8>, Vec<u8>)]) -> Result<()> {
    let keys = ext.extend(sess, msgs.len())?;
    let mut out = Vec::new();
    for ((m0, m1), [k0, k1]) in msgs.iter().zip(&keys) {
        if m0.len() != m1.len() {
            return Err(Error::Protocol("OT messages differ in length".into()));
        }
        out.extend(m0.iter().zip(pad(k0, m0.len())).map(|(a, b)| a ^ b));
        out.extend(m1.iter().zip(pad(k1, m1.len())).map(|(a, b)| a ^ b));
    }
    sess.send(MsgType::OtExt, out)
}

pub fn recv_chosen(
    sess: &mut Session,
    ext: &mut ExtReceiver,
    choices: &[bool],
    len: usize,
) -> Result<Vec<Vec<u8>>> {
    let keys = ext.extend(sess, choices)?;
    let body = sess.recv(MsgType::OtExt)?;
    if body.len() != 2 * len * choices.len() {
        return Err(Error::Protocol("OT payload length".into()));
    }
    Ok(choices
        .iter()
        .zip(&keys)
        .enumerate()
        .map(|(i, (&c, k))| {
            let off = 2 * len * i + if c { len } else { 0 };
            body[off..off + len]
                .iter()
                .zip(pad(k, len))
                .map(|(a, b)| a ^ b)
                .collect()
        })
        .collect())
}
