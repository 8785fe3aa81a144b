//! Negacyclic number-theoretic transform over Z_q[X]/(X^n + 1).

use crate::ring::{inv_mod, mul_mod, pow_mod};

#[inline]
fn shoup(w: u64, q: u64) -> u64 {
    (((w as u128) << 64) / q as u128) as u64
}

/// a * w mod q with a precomputed Shoup quotient for w; needs q < 2^63.
#[inline]
fn mul_shoup(a: u64, w: u64, w_shoup: u64, q: u64) -> u64 {
    let hi = ((a as u128 * w_shoup as u128) >> 64) as u64;
    let r = a.wrapping_mul(w).wrapping_sub(hi.wrapping_mul(q));
    if r >= q {
        r - q
    } else {
        r
    }
}

#[derive(Clone, Debug)]
pub struct NttTable {
    pub q: u64,
    pub n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    ipsi_rev: Vec<u64>,
    ipsi_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// A primitive 2n-th root of unity mod q, if q ≡ 1 (mod 2n).
pub fn primitive_root(q: u64, n: usize) -> Option<u64> {
    let m = 2 * n as u64;
    if (q - 1) % m != 0 {
        return None;
    }
    (2..q.min(1 << 20))
        .map(|x| pow_mod(x, (q - 1) / m, q))
        .find(|&g| pow_mod(g, n as u64, q) == q - 1)
}

impl NttTable {
    pub fn new(q: u64, n: usize) -> Option<Self> {
        if q >= 1 << 62 || !n.is_power_of_two() {
            return None;
        }
        let psi = primitive_root(q, n)?;
        let ipsi = inv_mod(psi, q);
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0; n];
        let mut ipsi_rev = vec![0; n];
        let (mut pw, mut ipw) = (1u64, 1u64);
        for i in 0..n {
            let r = bit_reverse(i, bits);
            psi_rev[r] = pw;
            ipsi_rev[r] = ipw;
            pw = mul_mod(pw, psi, q);
            ipw = mul_mod(ipw, ipsi, q);
        }
        let n_inv = inv_mod(n as u64 % q, q);
        Some(NttTable {
            q,
            n,
            psi_rev_shoup: psi_rev.iter().map(|&w| shoup(w, q)).collect(),
            ipsi_rev_shoup: ipsi_rev.iter().map(|&w| shoup(w, q)).collect(),
            psi_rev,
            ipsi_rev,
            n_inv,
            n_inv_shoup: shoup(n_inv, q),
        })
    }

    pub fn forward(&self, a: &mut [u64]) {
        let q = self.q;
        let n = self.n;
        let mut t = n;
        let mut m = 1;
        while m < n {
            t /= 2;
            for i in 0..m {
                let j1 = 2 * i * t;
                let (w, ws) = (self.psi_rev[m + i], self.psi_rev_shoup[m + i]);
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = mul_shoup(a[j + t], w, ws, q);
                    let s = u + v;
                    a[j] = if s >= q { s - q } else { s };
                    a[j + t] = if u >= v { u - v } else { u + q - v };
                }
            }
            m *= 2;
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        let q = self.q;
        let n = self.n;
        let mut t = 1;
        let mut m = n;
        while m > 1 {
            let h = m / 2;
            let mut j1 = 0;
            for i in 0..h {
                let (w, ws) = (self.ipsi_rev[h + i], self.ipsi_rev_shoup[h + i]);
                for j in j1..j1 + t {
                    let u = a[j];
                    let v = a[j + t];
                    let s = u + v;
                    a[j] = if s >= q { s - q } else { s };
                    let d = if u >= v { u - v } else { u + q - v };
                    a[j + t] = mul_shoup(d, w, ws, q);
                }
                j1 += 2 * t;
            }
            t *= 2;
            m = h;
        }
        for x in a.iter_mut() {
            *x = mul_shoup(*x, self.n_inv, self.n_inv_shoup, q);
        }
    }

    /// Pointwise product in the evaluation domain.
    pub fn pointwise(&self, a: &[u64], b: &[u64]) -> Vec<u64> {
        a.iter().zip(b).map(|(&x, &y)| mul_mod(x, y, self.q)).collect()
    }
}
