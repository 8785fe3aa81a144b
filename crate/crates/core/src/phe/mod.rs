//! Packed homomorphic encryption with two interchangeable backends: a
//! lattice scheme and a plaintext "counting" backend that follows the same
//! API, noise accounting and counters.

pub mod bfv;
pub mod ntt;

use std::sync::Arc;

use rand::{CryptoRng, Rng, RngCore};

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::ring::{add_mod, mul_mod, sub_mod, ProtocolParams};
use bfv::BfvParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Party {
    Client,
    Server,
}

impl Party {
    pub fn tag(self) -> u8 {
        match self {
            Party::Client => 0,
            Party::Server => 1,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Party::Client),
            1 => Ok(Party::Server),
            _ => Err(Error::Malformed(format!("owner tag {t}"))),
        }
    }

    pub fn peer(self) -> Self {
        match self {
            Party::Client => Party::Server,
            Party::Server => Party::Client,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Lattice,
    Counting,
}

#[derive(Clone, Debug)]
enum SecretInner {
    Lattice(bfv::SecretKey),
    Counting,
}

#[derive(Clone, Debug)]
enum PublicInner {
    Lattice(bfv::PublicKey),
    Counting,
}

#[derive(Clone, Debug)]
pub struct PublicKey {
    pub owner: Party,
    key_id: u64,
    inner: PublicInner,
}

#[derive(Clone, Debug)]
pub struct SecretKey {
    pub owner: Party,
    key_id: u64,
    inner: SecretInner,
}

#[derive(Clone, Debug)]
pub struct PheKeyMaterial {
    pub owner: Party,
    pub public: PublicKey,
    pub secret: SecretKey,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Lattice(bfv::Ct),
    Counting { key_id: u64, slots: Vec<u64> },
}

/// Encryption of an n-slot vector under one party's key.
#[derive(Clone, Debug, PartialEq)]
pub struct Ciphertext {
    pub owner: Party,
    /// Worst-case infinity norm of the noise term.
    pub noise: f64,
    body: Body,
}

/// Evaluator bound to one party's counter set.
#[derive(Clone)]
pub struct PheContext {
    pub kind: BackendKind,
    pub scheme: Arc<BfvParams>,
    counters: Arc<Counters>,
}

impl PheContext {
    pub fn new(kind: BackendKind, params: &ProtocolParams) -> Result<Self> {
        Self::with_counters(kind, params, Arc::new(Counters::default()))
    }

    pub fn with_counters(
        kind: BackendKind,
        params: &ProtocolParams,
        counters: Arc<Counters>,
    ) -> Result<Self> {
        params.validate()?;
        Ok(PheContext {
            kind,
            scheme: Arc::new(BfvParams::new(params.n, params.p)?),
            counters,
        })
    }

    /// Same scheme, separate counters (for the other party).
    pub fn fork(&self, counters: Arc<Counters>) -> Self {
        PheContext {
            kind: self.kind,
            scheme: self.scheme.clone(),
            counters,
        }
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn slots(&self) -> usize {
        self.scheme.n
    }

    pub fn p(&self) -> u64 {
        self.scheme.p
    }

    /// Remaining noise headroom in bits; decryption is correct while positive.
    pub fn budget_bits(&self, ct: &Ciphertext) -> f64 {
        self.scheme.noise_ceiling().log2() - ct.noise.max(1.0).log2()
    }

    pub fn keygen<R: RngCore + CryptoRng>(&self, owner: Party, rng: &mut R) -> PheKeyMaterial {
        let key_id = rng.next_u64();
        let (public, secret) = match self.kind {
            BackendKind::Lattice => {
                let (pk, sk) = self.scheme.keygen(rng);
                (PublicInner::Lattice(pk), SecretInner::Lattice(sk))
            }
            BackendKind::Counting => (PublicInner::Counting, SecretInner::Counting),
        };
        PheKeyMaterial {
            owner,
            public: PublicKey {
                owner,
                key_id,
                inner: public,
            },
            secret: SecretKey {
                owner,
                key_id,
                inner: secret,
            },
        }
    }

    fn check_len(&self, v: &[u64]) -> Result<()> {
        if v.len() != self.scheme.n {
            return Err(Error::Shape(format!(
                "{} slots given, {} expected",
                v.len(),
                self.scheme.n
            )));
        }
        Ok(())
    }

    pub fn encrypt<R: RngCore + CryptoRng>(
        &self,
        pk: &PublicKey,
        v: &[u64],
        rng: &mut R,
    ) -> Result<Ciphertext> {
        self.check_len(v)?;
        Counters::bump(&self.counters.enc, 1);
        let body = match &pk.inner {
            PublicInner::Lattice(k) => Body::Lattice(self.scheme.encrypt(k, v, rng)),
            PublicInner::Counting => Body::Counting {
                key_id: pk.key_id,
                slots: v.iter().map(|&x| x % self.scheme.p).collect(),
            },
        };
        Ok(Ciphertext {
            owner: pk.owner,
            noise: self.scheme.fresh_noise(),
            body,
        })
    }

    /// Decrypting under the wrong key yields unrelated values; this is not
    /// detected.
    pub fn decrypt(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<u64>> {
        Counters::bump(&self.counters.dec, 1);
        if ct.noise >= self.scheme.noise_ceiling() {
            return Err(Error::NoiseExhausted(self.budget_bits(ct)));
        }
        match (&sk.inner, &ct.body) {
            (SecretInner::Lattice(k), Body::Lattice(c)) => Ok(self.scheme.decrypt(k, c)),
            (SecretInner::Counting, Body::Counting { key_id, slots }) => {
                if *key_id == sk.key_id {
                    Ok(slots.clone())
                } else {
                    let mut rng = crate::ring::prng(key_id ^ sk.key_id, "wrong key");
                    Ok((0..slots.len()).map(|_| rng.gen_range(0..self.scheme.p)).collect())
                }
            }
            _ => Err(Error::Unsupported("key and ciphertext from different backends")),
        }
    }

    fn binary(
        &self,
        a: &Ciphertext,
        b: &Ciphertext,
        subtract: bool,
    ) -> Result<Ciphertext> {
        if a.owner != b.owner {
            return Err(Error::OwnerMismatch);
        }
        Counters::bump(&self.counters.add, 1);
        let p = self.scheme.p;
        let body = match (&a.body, &b.body) {
            (Body::Lattice(x), Body::Lattice(y)) => Body::Lattice(if subtract {
                self.scheme.sub(x, y)
            } else {
                self.scheme.add(x, y)
            }),
            (Body::Counting { key_id, slots: x }, Body::Counting { slots: y, .. }) => {
                Body::Counting {
                    key_id: *key_id,
                    slots: x
                        .iter()
                        .zip(y)
                        .map(|(&s, &t)| if subtract { sub_mod(s, t, p) } else { add_mod(s, t, p) })
                        .collect(),
                }
            }
            _ => return Err(Error::Unsupported("mixed backends")),
        };
        Ok(Ciphertext {
            owner: a.owner,
            noise: self.scheme.add_noise(a.noise, b.noise),
            body,
        })
    }

    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.binary(a, b, false)
    }

    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.binary(a, b, true)
    }

    fn plain_add(&self, a: &Ciphertext, v: &[u64], negate: bool) -> Result<Ciphertext> {
        self.check_len(v)?;
        Counters::bump(&self.counters.add, 1);
        let p = self.scheme.p;
        let body = match &a.body {
            Body::Lattice(x) => Body::Lattice(self.scheme.add_plain(x, v, negate)),
            Body::Counting { key_id, slots } => Body::Counting {
                key_id: *key_id,
                slots: slots
                    .iter()
                    .zip(v)
                    .map(|(&s, &t)| {
                        if negate {
                            sub_mod(s, t % p, p)
                        } else {
                            add_mod(s, t % p, p)
                        }
                    })
                    .collect(),
            },
        };
        Ok(Ciphertext {
            owner: a.owner,
            noise: self.scheme.add_plain_noise(a.noise),
            body,
        })
    }

    pub fn add_plain(&self, a: &Ciphertext, v: &[u64]) -> Result<Ciphertext> {
        self.plain_add(a, v, false)
    }

    pub fn sub_plain(&self, a: &Ciphertext, v: &[u64]) -> Result<Ciphertext> {
        self.plain_add(a, v, true)
    }

    pub fn mul_plain(&self, a: &Ciphertext, w: &[u64]) -> Result<Ciphertext> {
        self.check_len(w)?;
        Counters::bump(&self.counters.mul_plain, 1);
        let p = self.scheme.p;
        let body = match &a.body {
            Body::Lattice(x) => Body::Lattice(self.scheme.mul_plain(x, w)),
            Body::Counting { key_id, slots } => Body::Counting {
                key_id: *key_id,
                slots: slots.iter().zip(w).map(|(&s, &t)| mul_mod(s, t % p, p)).collect(),
            },
        };
        Ok(Ciphertext {
            owner: a.owner,
            noise: self.scheme.mul_plain_noise(a.noise),
            body,
        })
    }

    /// Cyclic left rotation by `l` slots; counting backend only.
    pub fn rotate(&self, a: &Ciphertext, l: usize) -> Result<Ciphertext> {
        match &a.body {
            Body::Lattice(_) => Err(Error::Unsupported("slot rotation on the lattice backend")),
            Body::Counting { key_id, slots } => {
                if l >= slots.len() {
                    return Err(Error::Shape(format!("rotation by {l}")));
                }
                Counters::bump(&self.counters.rot, 1);
                let mut s = slots.clone();
                s.rotate_left(l);
                Ok(Ciphertext {
                    owner: a.owner,
                    noise: a.noise,
                    body: Body::Counting {
                        key_id: *key_id,
                        slots: s,
                    },
                })
            }
        }
    }

    /// Wire form: "PHE1" | owner | N | modulus count | moduli | p | 2 polys
    /// of per-modulus coefficient residues, all little-endian. The counting
    /// backend uses the single modulus p, slots in the first polynomial and
    /// the key id in the first coefficient of the second.
    pub fn serialize(&self, ct: &Ciphertext) -> Vec<u8> {
        let n = self.scheme.n;
        let (moduli, polys): (Vec<u64>, Vec<Vec<u64>>) = match &ct.body {
            Body::Lattice(c) => {
                let [c0, c1] = self.scheme.to_coefficients(c);
                let [a, b] = c0;
                let [d, e] = c1;
                (self.scheme.moduli.to_vec(), vec![a, b, d, e])
            }
            Body::Counting { key_id, slots } => {
                let mut second = vec![0u64; n];
                second[0] = *key_id;
                (vec![self.scheme.p], vec![slots.clone(), second])
            }
        };
        let mut out = Vec::with_capacity(18 + 8 * moduli.len() + 8 * polys.len() * n);
        out.extend_from_slice(b"PHE1");
        out.push(ct.owner.tag());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(moduli.len() as u8);
        for m in &moduli {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&self.scheme.p.to_le_bytes());
        for poly in &polys {
            for c in poly {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(&self, bytes: &[u8], noise: f64) -> Result<Ciphertext> {
        let bad = |m: &str| Error::Malformed(format!("ciphertext: {m}"));
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("short"))? != b"PHE1" {
            return Err(bad("magic"));
        }
        let owner = Party::from_tag(r.u8().ok_or_else(|| bad("short"))?)?;
        let n = r.u32().ok_or_else(|| bad("short"))? as usize;
        if n != self.scheme.n {
            return Err(bad("ring degree"));
        }
        let count = r.u8().ok_or_else(|| bad("short"))? as usize;
        let moduli: Vec<u64> = (0..count)
            .map(|_| r.u64())
            .collect::<Option<_>>()
            .ok_or_else(|| bad("short"))?;
        let p = r.u64().ok_or_else(|| bad("short"))?;
        if p != self.scheme.p {
            return Err(bad("plaintext modulus"));
        }
        let mut polys = Vec::with_capacity(2 * count);
        for _ in 0..2 * count {
            let v: Vec<u64> = (0..n)
                .map(|_| r.u64())
                .collect::<Option<_>>()
                .ok_or_else(|| bad("short"))?;
            polys.push(v);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let body = match self.kind {
            BackendKind::Lattice => {
                if moduli != self.scheme.moduli {
                    return Err(bad("modulus chain"));
                }
                let mut it = polys.into_iter();
                let mut next = || it.next().expect("counted");
                Body::Lattice(
                    self.scheme
                        .from_coefficients([[next(), next()], [next(), next()]])?,
                )
            }
            BackendKind::Counting => {
                if moduli != [p] {
                    return Err(bad("modulus chain"));
                }
                if polys[0].iter().any(|&s| s >= p) {
                    return Err(bad("slot out of range"));
                }
                Body::Counting {
                    key_id: polys[1][0],
                    slots: polys[0].clone(),
                }
            }
        };
        Ok(Ciphertext { owner, noise, body })
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Option<&'a [u8]> {
        let s = self.b.get(self.pos..self.pos + k)?;
        self.pos += k;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        Some(self.take(1)?[0])
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}
