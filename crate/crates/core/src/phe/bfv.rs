//! Leveled RLWE scheme (BFV-style) with plaintext-slot batching, restricted
//! to the operations the protocol needs: add, subtract and multiplication by
//! plaintext. Ciphertexts live in the NTT domain of a two-prime RNS basis.

use rand::{CryptoRng, Rng, RngCore};

use super::ntt::NttTable;
use crate::error::{Error, Result};
use crate::ring::{add_mod, inv_mod, is_prime, mul_mod, sub_mod};

/// Bound of the centered binomial error distribution (eta = 21, sd ~ 3.24).
pub const ERROR_BOUND: u64 = 21;
const MODULUS_BITS: u32 = 54;

#[derive(Debug)]
pub struct BfvParams {
    pub n: usize,
    pub p: u64,
    pub moduli: [u64; 2],
    pub q: u128,
    pub delta: u128,
    /// q mod p; the protocol picks q so this is 1.
    pub q_mod_p: u64,
    delta_rns: [u64; 2],
    q1_inv_mod_q2: u64,
    tables: [NttTable; 2],
    plain: NttTable,
}

fn ntt_primes_below(bound: u64, n: usize) -> impl Iterator<Item = u64> {
    let m = 2 * n as u64;
    let start = (bound - 1) / m * m + 1;
    (0..)
        .map(move |k| start - k * m)
        .take_while(move |&q| q > bound >> 4)
        .filter(|&q| is_prime(q))
}

impl BfvParams {
    /// Picks q1, q2 < 2^54, both 1 mod 2n, with q1*q2 ≡ 1 (mod p) so that
    /// plaintext products add almost no rounding noise.
    pub fn new(n: usize, p: u64) -> Result<Self> {
        let plain = NttTable::new(p, n)
            .ok_or_else(|| Error::Param(format!("p = {p} admits no 2n-th root for n = {n}")))?;
        let m = 2 * n as u64;
        let big_m = m as u128 * p as u128;
        let bound = 1u64 << MODULUS_BITS;
        for q1 in ntt_primes_below(bound, n).take(64) {
            if q1 % p == 0 {
                continue;
            }
            let c = inv_mod(q1 % p, p);
            // t ≡ 1 (mod 2n), t ≡ c (mod p)
            let k = mul_mod(sub_mod(c, 1, p), inv_mod(m % p, p), p);
            let t = 1 + m as u128 * k as u128;
            if big_m >= bound as u128 {
                break;
            }
            let mut cand = t + (bound as u128 - 1 - t) / big_m * big_m;
            while cand > (bound >> 2) as u128 {
                let q2 = cand as u64;
                if q2 != q1 && is_prime(q2) {
                    return Self::with_moduli(n, p, [q1, q2], plain);
                }
                cand -= big_m;
            }
        }
        Err(Error::Param(format!(
            "no ciphertext modulus pair found for p = {p}, n = {n}"
        )))
    }

    fn with_moduli(n: usize, p: u64, moduli: [u64; 2], plain: NttTable) -> Result<Self> {
        let q = moduli[0] as u128 * moduli[1] as u128;
        let delta = q / p as u128;
        let tables = [
            NttTable::new(moduli[0], n).expect("ntt prime"),
            NttTable::new(moduli[1], n).expect("ntt prime"),
        ];
        Ok(BfvParams {
            n,
            p,
            moduli,
            q,
            delta,
            q_mod_p: (q % p as u128) as u64,
            delta_rns: [(delta % moduli[0] as u128) as u64, (delta % moduli[1] as u128) as u64],
            q1_inv_mod_q2: inv_mod(moduli[0] % moduli[1], moduli[1]),
            tables,
            plain,
        })
    }

    /// Largest noise magnitude that still decrypts correctly.
    pub fn noise_ceiling(&self) -> f64 {
        (self.delta / 2) as f64
    }

    pub fn fresh_noise(&self) -> f64 {
        ((2 * self.n + 1) as u64 * ERROR_BOUND) as f64
    }

    pub fn add_noise(&self, a: f64, b: f64) -> f64 {
        a + b + self.q_mod_p as f64
    }

    pub fn add_plain_noise(&self, a: f64) -> f64 {
        a + self.q_mod_p as f64
    }

    /// Worst case for a plaintext of centered coefficients up to p/2.
    pub fn mul_plain_noise(&self, a: f64) -> f64 {
        let w = (self.n as u64 * (self.p / 2)) as f64;
        w * a + self.q_mod_p as f64 * (w + 1.0)
    }

    /// Slots to plaintext polynomial, coefficients in [0, p).
    pub fn encode(&self, slots: &[u64]) -> Vec<u64> {
        let mut m = slots.to_vec();
        self.plain.inverse(&mut m);
        m
    }

    pub fn decode(&self, poly: &[u64]) -> Vec<u64> {
        let mut m = poly.to_vec();
        self.plain.forward(&mut m);
        m
    }

    fn lift_centered(&self, poly: &[u64], i: usize) -> Vec<u64> {
        let (p, q) = (self.p, self.moduli[i]);
        poly.iter()
            .map(|&c| if c > p / 2 { q - (p - c) } else { c })
            .collect()
    }

    fn small_to_ntt(&self, coeffs: &[i64], i: usize) -> Vec<u64> {
        let q = self.moduli[i];
        let mut v: Vec<u64> = coeffs
            .iter()
            .map(|&c| if c < 0 { q - (-c) as u64 } else { c as u64 })
            .collect();
        self.tables[i].forward(&mut v);
        v
    }
}

fn sample_ternary<R: RngCore + CryptoRng>(n: usize, rng: &mut R) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(-1i64..=1)).collect()
}

fn sample_cbd<R: RngCore + CryptoRng>(n: usize, rng: &mut R) -> Vec<i64> {
    (0..n)
        .map(|_| {
            let x = rng.next_u64();
            let a = (x & ((1 << ERROR_BOUND) - 1)).count_ones() as i64;
            let b = ((x >> 32) & ((1 << ERROR_BOUND) - 1)).count_ones() as i64;
            a - b
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SecretKey {
    s: [Vec<u64>; 2],
}

#[derive(Clone, Debug)]
pub struct PublicKey {
    b: [Vec<u64>; 2],
    a: [Vec<u64>; 2],
}

/// (c0, c1) per RNS modulus, evaluation domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ct {
    pub c0: [Vec<u64>; 2],
    pub c1: [Vec<u64>; 2],
}

impl BfvParams {
    pub fn keygen<R: RngCore + CryptoRng>(&self, rng: &mut R) -> (PublicKey, SecretKey) {
        let s_small = sample_ternary(self.n, rng);
        let e_small = sample_cbd(self.n, rng);
        let mut sk = [Vec::new(), Vec::new()];
        let mut pk_a = [Vec::new(), Vec::new()];
        let mut pk_b = [Vec::new(), Vec::new()];
        for i in 0..2 {
            let q = self.moduli[i];
            let s = self.small_to_ntt(&s_small, i);
            let e = self.small_to_ntt(&e_small, i);
            // uniform in the evaluation domain is uniform in the coefficient domain
            let a: Vec<u64> = (0..self.n).map(|_| rng.gen_range(0..q)).collect();
            let b: Vec<u64> = (0..self.n)
                .map(|k| {
                    let as_ = mul_mod(a[k], s[k], q);
                    sub_mod(0, add_mod(as_, e[k], q), q)
                })
                .collect();
            sk[i] = s;
            pk_a[i] = a;
            pk_b[i] = b;
        }
        (PublicKey { a: pk_a, b: pk_b }, SecretKey { s: sk })
    }

    pub fn encrypt<R: RngCore + CryptoRng>(&self, pk: &PublicKey, slots: &[u64], rng: &mut R) -> Ct {
        let m = self.encode(slots);
        let u = sample_ternary(self.n, rng);
        let e1 = sample_cbd(self.n, rng);
        let e2 = sample_cbd(self.n, rng);
        let mut c0 = [Vec::new(), Vec::new()];
        let mut c1 = [Vec::new(), Vec::new()];
        for i in 0..2 {
            let q = self.moduli[i];
            let t = &self.tables[i];
            let u_ntt = self.small_to_ntt(&u, i);
            let mut msg: Vec<u64> = m
                .iter()
                .zip(&e1)
                .map(|(&mc, &e)| {
                    let dm = mul_mod(self.delta_rns[i], mc, q);
                    let e = if e < 0 { q - (-e) as u64 } else { e as u64 };
                    add_mod(dm, e, q)
                })
                .collect();
            t.forward(&mut msg);
            let e2_ntt = self.small_to_ntt(&e2, i);
            c0[i] = (0..self.n)
                .map(|k| add_mod(mul_mod(u_ntt[k], pk.b[i][k], q), msg[k], q))
                .collect();
            c1[i] = (0..self.n)
                .map(|k| add_mod(mul_mod(u_ntt[k], pk.a[i][k], q), e2_ntt[k], q))
                .collect();
        }
        Ct { c0, c1 }
    }

    /// c0 + c1*s as CRT-composed coefficients in [0, q).
    fn phase(&self, sk: &SecretKey, ct: &Ct) -> Vec<u128> {
        let mut res = [Vec::new(), Vec::new()];
        for i in 0..2 {
            let q = self.moduli[i];
            let mut x: Vec<u64> = (0..self.n)
                .map(|k| add_mod(ct.c0[i][k], mul_mod(ct.c1[i][k], sk.s[i][k], q), q))
                .collect();
            self.tables[i].inverse(&mut x);
            res[i] = x;
        }
        let (q1, q2) = (self.moduli[0], self.moduli[1]);
        (0..self.n)
            .map(|k| {
                let (x1, x2) = (res[0][k], res[1][k]);
                let h = mul_mod(sub_mod(x2, x1 % q2, q2), self.q1_inv_mod_q2, q2);
                x1 as u128 + q1 as u128 * h as u128
            })
            .collect()
    }

    pub fn decrypt(&self, sk: &SecretKey, ct: &Ct) -> Vec<u64> {
        let p = self.p as u128;
        let half = self.delta / 2;
        let poly: Vec<u64> = self
            .phase(sk, ct)
            .into_iter()
            .map(|x| (((x + half) / self.delta) % p) as u64)
            .collect();
        self.decode(&poly)
    }

    /// Actual infinity norm of the noise, for diagnostics.
    pub fn measure_noise(&self, sk: &SecretKey, ct: &Ct) -> f64 {
        let p = self.p as u128;
        let half = self.delta / 2;
        self.phase(sk, ct)
            .into_iter()
            .map(|x| {
                let m = ((x + half) / self.delta) % p;
                let dm = self.delta * m;
                let v = if x >= dm { x - dm } else { dm - x };
                let v = v % self.q;
                v.min(self.q - v) as f64
            })
            .fold(0.0, f64::max)
    }

    fn zip_ct(&self, a: &Ct, b: &Ct, op: fn(u64, u64, u64) -> u64) -> Ct {
        let f = |x: &[Vec<u64>; 2], y: &[Vec<u64>; 2]| -> [Vec<u64>; 2] {
            let mut out = [Vec::new(), Vec::new()];
            for i in 0..2 {
                let q = self.moduli[i];
                out[i] = x[i].iter().zip(&y[i]).map(|(&s, &t)| op(s, t, q)).collect();
            }
            out
        };
        Ct {
            c0: f(&a.c0, &b.c0),
            c1: f(&a.c1, &b.c1),
        }
    }

    pub fn add(&self, a: &Ct, b: &Ct) -> Ct {
        self.zip_ct(a, b, add_mod)
    }

    pub fn sub(&self, a: &Ct, b: &Ct) -> Ct {
        self.zip_ct(a, b, sub_mod)
    }

    fn scaled_plain(&self, slots: &[u64]) -> [Vec<u64>; 2] {
        let m = self.encode(slots);
        let mut out = [Vec::new(), Vec::new()];
        for i in 0..2 {
            let q = self.moduli[i];
            let mut v: Vec<u64> = m.iter().map(|&c| mul_mod(self.delta_rns[i], c, q)).collect();
            self.tables[i].forward(&mut v);
            out[i] = v;
        }
        out
    }

    pub fn add_plain(&self, a: &Ct, slots: &[u64], negate: bool) -> Ct {
        let pt = self.scaled_plain(slots);
        let mut out = a.clone();
        for i in 0..2 {
            let q = self.moduli[i];
            for (x, &y) in out.c0[i].iter_mut().zip(&pt[i]) {
                *x = if negate { sub_mod(*x, y, q) } else { add_mod(*x, y, q) };
            }
        }
        out
    }

    pub fn mul_plain(&self, a: &Ct, slots: &[u64]) -> Ct {
        let m = self.encode(slots);
        let mut out = a.clone();
        for i in 0..2 {
            let mut w = self.lift_centered(&m, i);
            self.tables[i].forward(&mut w);
            let q = self.moduli[i];
            for k in 0..self.n {
                out.c0[i][k] = mul_mod(out.c0[i][k], w[k], q);
                out.c1[i][k] = mul_mod(out.c1[i][k], w[k], q);
            }
        }
        out
    }

    /// Coefficient-domain residues for (de)serialization.
    pub fn to_coefficients(&self, ct: &Ct) -> [[Vec<u64>; 2]; 2] {
        let conv = |x: &[Vec<u64>; 2]| {
            let mut out = x.clone();
            for (i, v) in out.iter_mut().enumerate() {
                self.tables[i].inverse(v);
            }
            out
        };
        [conv(&ct.c0), conv(&ct.c1)]
    }

    pub fn from_coefficients(&self, polys: [[Vec<u64>; 2]; 2]) -> Result<Ct> {
        let [mut c0, mut c1] = polys;
        for i in 0..2 {
            for v in [&mut c0[i], &mut c1[i]] {
                if v.len() != self.n || v.iter().any(|&c| c >= self.moduli[i]) {
                    return Err(Error::Malformed("ciphertext residue out of range".into()));
                }
                self.tables[i].forward(v);
            }
        }
        Ok(Ct { c0, c1 })
    }
}
