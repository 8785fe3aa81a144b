//! Arithmetic over the plaintext ring Z_p: modular helpers, protocol
//! parameters, fixed-point embedding and dense tensors.

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic CSPRNG used for every random draw in the crate.
pub type Prng = ChaCha20Rng;

/// Derive an independent generator from a 64-bit seed and a label.
pub fn prng(seed: u64, label: &str) -> Prng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    Prng::from_seed(h.finalize().into())
}

#[inline]
pub fn add_mod(a: u64, b: u64, p: u64) -> u64 {
    let s = a as u128 + b as u128;
    let p = p as u128;
    (if s >= p { s - p } else { s }) as u64
}

#[inline]
pub fn sub_mod(a: u64, b: u64, p: u64) -> u64 {
    if a >= b {
        a - b
    } else {
        (a as u128 + p as u128 - b as u128) as u64
    }
}

#[inline]
pub fn neg_mod(a: u64, p: u64) -> u64 {
    if a == 0 {
        0
    } else {
        p - a
    }
}

#[inline]
pub fn mul_mod(a: u64, b: u64, p: u64) -> u64 {
    ((a as u128 * b as u128) % p as u128) as u64
}

pub fn pow_mod(mut b: u64, mut e: u64, p: u64) -> u64 {
    let mut r = 1 % p;
    b %= p;
    while e > 0 {
        if e & 1 == 1 {
            r = mul_mod(r, b, p);
        }
        b = mul_mod(b, b, p);
        e >>= 1;
    }
    r
}

/// Inverse modulo a prime.
pub fn inv_mod(a: u64, p: u64) -> u64 {
    pow_mod(a, p - 2, p)
}

/// Reduce a signed integer into [0, p).
#[inline]
pub fn from_signed(v: i64, p: u64) -> u64 {
    let r = (v as i128).rem_euclid(p as i128);
    r as u64
}

/// Deterministic Miller-Rabin, valid for every u64.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for sp in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n % sp == 0 {
            return n == sp;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest prime `p >= min` with `p ≡ 1 (mod 2n)`.
pub fn batching_prime_at_least(min: u64, n: usize) -> u64 {
    let m = 2 * n as u64;
    let mut p = min.saturating_sub(1).div_ceil(m) * m + 1;
    while !is_prime(p) {
        p += m;
    }
    p
}

/// Canonical signed representative in (-p/2, p/2].
#[inline]
pub fn signed_rep(e: u64, p: u64) -> i64 {
    if e <= p / 2 {
        e as i64
    } else {
        -((p - e) as i64)
    }
}

/// round(x * 2^f) mod p.
pub fn fixed_encode(x: f64, frac_bits: u32, p: u64) -> Result<u64> {
    let scaled = x * (1u64 << frac_bits) as f64;
    if !scaled.is_finite() || scaled.abs() >= p as f64 / 2.0 {
        return Err(Error::Overflow(format!(
            "{x} does not fit at {frac_bits} fraction bits mod {p}"
        )));
    }
    Ok(from_signed(scaled.round() as i64, p))
}

pub fn fixed_decode(e: u64, frac_bits: u32, p: u64) -> f64 {
    signed_rep(e, p) as f64 / (1u64 << frac_bits) as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolParams {
    /// Slot count of one packed ciphertext.
    pub n: usize,
    /// Plaintext prime.
    pub p: u64,
    /// Fixed-point fraction bits.
    pub f: u32,
    /// OT security parameter in bits.
    pub kappa: u32,
    pub seed: Option<u64>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        let n = 4096;
        ProtocolParams {
            n,
            p: batching_prime_at_least(1 << 25, n),
            f: 6,
            kappa: 128,
            seed: None,
        }
    }
}

impl ProtocolParams {
    pub fn new(n: usize, p: u64, f: u32) -> Result<Self> {
        let params = ProtocolParams {
            n,
            p,
            f,
            kappa: 128,
            seed: None,
        };
        params.validate()?;
        Ok(params)
    }

    /// Parameters with the smallest batching prime of at least `bits` bits.
    pub fn with_prime_bits(n: usize, bits: u32, f: u32) -> Result<Self> {
        if !(2..=62).contains(&bits) {
            return Err(Error::Param(format!("prime size {bits} bits out of range")));
        }
        Self::new(n, batching_prime_at_least(1u64 << bits, n), f)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || !self.n.is_power_of_two() {
            return Err(Error::Param(format!(
                "slot count {} must be a power of two >= 8",
                self.n
            )));
        }
        if self.p >= 1 << 62 || !is_prime(self.p) || self.p == 2 {
            return Err(Error::Param(format!("{} is not an odd prime below 2^62", self.p)));
        }
        if self.p % (2 * self.n as u64) != 1 {
            return Err(Error::Param(format!(
                "p = {} is not 1 mod 2n = {}",
                self.p,
                2 * self.n
            )));
        }
        if 2 * self.f + 4 >= 62 || self.p <= 1u64 << (2 * self.f + 4) {
            return Err(Error::Param(format!(
                "p = {} too small for {} fraction bits",
                self.p, self.f
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: f64) -> Result<u64> {
        fixed_encode(x, self.f, self.p)
    }

    pub fn decode(&self, e: u64) -> f64 {
        fixed_decode(e, self.f, self.p)
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"params/v1");
        h.update((self.n as u64).to_le_bytes());
        h.update(self.p.to_le_bytes());
        h.update(self.f.to_le_bytes());
        h.update(self.kappa.to_le_bytes());
        h.finalize().into()
    }

    /// Generator for a given purpose; seeded runs are reproducible.
    pub fn rng(&self, label: &str) -> Prng {
        match self.seed {
            Some(s) => prng(s, label),
            None => Prng::from_entropy(),
        }
    }
}

/// Dense tensor of canonical Z_p elements in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u64>,
    pub modulus: u64,
    /// Fraction bits currently carried by the values.
    pub scale: u32,
}

impl RingTensor {
    pub fn zeros(shape: &[usize], modulus: u64) -> Self {
        RingTensor {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
            modulus,
            scale: 0,
        }
    }

    pub fn new(shape: &[usize], data: Vec<u64>, modulus: u64) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&e| e >= modulus) {
            return Err(Error::Shape(format!("element {bad} not reduced mod {modulus}")));
        }
        Ok(RingTensor {
            shape: shape.to_vec(),
            data,
            modulus,
            scale: 0,
        })
    }

    pub fn from_signed(shape: &[usize], vals: &[i64], modulus: u64) -> Result<Self> {
        Self::new(
            shape,
            vals.iter().map(|&v| from_signed(v, modulus)).collect(),
            modulus,
        )
    }

    pub fn with_scale(mut self, scale: u32) -> Self {
        self.scale = scale;
        self
    }

    pub fn random<R: RngCore + CryptoRng>(shape: &[usize], modulus: u64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        RingTensor {
            shape: shape.to_vec(),
            data: (0..len).map(|_| rng.gen_range(0..modulus)).collect(),
            modulus,
            scale: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.data.iter().map(|&e| signed_rep(e, self.modulus)).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn zip(&self, other: &Self, op: impl Fn(u64, u64, u64) -> u64) -> Result<Self> {
        if self.shape != other.shape || self.modulus != other.modulus {
            return Err(Error::Shape(format!(
                "operands {:?} mod {} and {:?} mod {} differ",
                self.shape, self.modulus, other.shape, other.modulus
            )));
        }
        let p = self.modulus;
        Ok(RingTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op(a, b, p))
                .collect(),
            modulus: p,
            scale: self.scale,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, add_mod)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, sub_mod)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, mul_mod)
    }

    pub fn scalar_mul(&self, k: u64) -> Self {
        let p = self.modulus;
        RingTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| mul_mod(a, k, p)).collect(),
            modulus: p,
            scale: self.scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(fixed_encode(0.0, 2, 97).unwrap(), 0);
        assert_eq!(fixed_encode(1.5, 2, 97).unwrap(), 6);
        assert_eq!(fixed_encode(-1.5, 2, 97).unwrap(), 91);
        assert!(fixed_encode(12.25, 2, 97).is_err());
    }

    #[test]
    fn signed_rep_examples() {
        assert_eq!(signed_rep(3, 7), 3);
        assert_eq!(signed_rep(4, 7), -3);
        assert_eq!(signed_rep(0, 7), 0);
    }

    #[test]
    fn signed_rep_is_a_bijection() {
        for p in [7u64, 17, 257] {
            let mut seen: Vec<i64> = (0..p).map(|e| signed_rep(e, p)).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len() as u64, p);
            let half = p as i64 / 2;
            assert!(seen.iter().all(|&v| -half <= v && v <= half));
            for e in 0..p {
                assert_eq!(from_signed(signed_rep(e, p), p), e);
            }
        }
    }

    #[test]
    fn default_prime_search() {
        let pp = ProtocolParams::default();
        assert!(pp.validate().is_ok());
        assert!(pp.p >= 1 << 25);
        assert_eq!(pp.p % 8192, 1);
        // nothing smaller qualifies
        let mut q = (1u64 << 25) + 1;
        while q < pp.p {
            assert!(q % 8192 != 1 || !is_prime(q));
            q += 1;
        }
    }

    #[test]
    fn param_validation() {
        assert!(ProtocolParams::new(4096, 7, 6).is_err());
        assert!(ProtocolParams::new(8, 257, 2).is_ok());
        assert!(ProtocolParams::new(8, 257, 3).is_err());
        assert!(ProtocolParams::new(12, 97, 0).is_err());
    }

    #[test]
    fn primality() {
        let small: Vec<u64> = (0..60).filter(|&n| is_prime(n)).collect();
        assert_eq!(
            small,
            vec![2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59]
        );
        assert!(!is_prime((1 << 25) + 1));
        assert!(is_prime(18446744073709551557));
        assert!(!is_prime(3215031751));
    }

    proptest! {
        #[test]
        fn fixed_round_trip(x in -1000.0f64..1000.0) {
            let pp = ProtocolParams::default();
            let e = pp.encode(x).unwrap();
            let back = pp.decode(e);
            prop_assert_eq!(back, (x * 64.0).round() / 64.0);
        }

        #[test]
        fn tensor_add_sub_inverse(v in proptest::collection::vec(0u64..97, 1..20), w in 0u64..97) {
            let a = RingTensor::new(&[v.len()], v.clone(), 97).unwrap();
            let b = RingTensor::new(&[v.len()], vec![w; v.len()], 97).unwrap();
            prop_assert_eq!(a.add(&b).unwrap().sub(&b).unwrap(), a);
        }
    }
}
