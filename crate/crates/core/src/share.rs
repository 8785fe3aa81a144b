//! Additive secret sharing and local share truncation.

use rand::{CryptoRng, RngCore};

use crate::error::{Error, Result};
use crate::ring::RingTensor;

/// Client and server halves of a secret over Z_p (or Z_2 for bits).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharePair {
    pub client: RingTensor,
    pub server: RingTensor,
}

impl SharePair {
    pub fn new(client: RingTensor, server: RingTensor) -> Result<Self> {
        if client.shape != server.shape || client.modulus != server.modulus {
            return Err(Error::Shape("share halves disagree on shape or modulus".into()));
        }
        Ok(SharePair { client, server })
    }

    pub fn modulus(&self) -> u64 {
        self.client.modulus
    }

    pub fn shape(&self) -> &[usize] {
        &self.client.shape
    }

    pub fn reconstruct(&self) -> RingTensor {
        let mut t = self.client.add(&self.server).expect("halves agree");
        t.scale = self.client.scale;
        t
    }
}

/// Split `x` with a uniformly random client half.
pub fn share<R: RngCore + CryptoRng>(x: &RingTensor, rng: &mut R) -> SharePair {
    let client = RingTensor::random(&x.shape, x.modulus, rng).with_scale(x.scale);
    share_with(x, client).expect("same shape")
}

/// Split `x` around a caller-chosen client half.
pub fn share_with(x: &RingTensor, client: RingTensor) -> Result<SharePair> {
    let server = x.sub(&client)?;
    SharePair::new(client.with_scale(x.scale), server.with_scale(x.scale))
}

#[inline]
pub fn truncate_client(c: u64, bits: u32) -> u64 {
    c >> bits
}

#[inline]
pub fn truncate_server(s: u64, bits: u32, p: u64) -> u64 {
    let neg = (p - s) % p;
    (p - (neg >> bits)) % p
}

/// Divide a shared value by 2^bits without interaction. The result is
/// floor(y / 2^bits) or one more, except with probability about |y|/p.
pub fn local_truncate(s: &SharePair, bits: u32) -> SharePair {
    let p = s.modulus();
    let scale = s.client.scale.saturating_sub(bits);
    let client = RingTensor {
        shape: s.client.shape.clone(),
        data: s.client.data.iter().map(|&c| truncate_client(c, bits)).collect(),
        modulus: p,
        scale,
    };
    let server = RingTensor {
        shape: s.server.shape.clone(),
        data: s.server.data.iter().map(|&v| truncate_server(v, bits, p)).collect(),
        modulus: p,
        scale,
    };
    SharePair { client, server }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::{prng, signed_rep, ProtocolParams};
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(v: u64, p: u64) -> RingTensor {
        RingTensor::new(&[1], vec![v], p).unwrap()
    }

    #[test]
    fn share_examples() {
        let s = share_with(&scalar(3, 7), scalar(5, 7)).unwrap();
        assert_eq!(s.server.data, vec![5]);
        let s = share_with(&scalar(0, 7), scalar(4, 7)).unwrap();
        assert_eq!(s.server.data, vec![3]);
        let s = share_with(&scalar(0, 7), scalar(0, 7)).unwrap();
        assert_eq!(s.server.data, vec![0]);
        let s = share_with(&scalar(1, 2), scalar(1, 2)).unwrap();
        assert_eq!(s.server.data, vec![0]);
    }

    #[test]
    fn truncate_examples() {
        let s = SharePair::new(scalar(50, 101), scalar(63, 101)).unwrap();
        let t = local_truncate(&s, 2);
        assert_eq!((t.client.data[0], t.server.data[0]), (12, 92));
        assert_eq!(t.reconstruct().data[0], 3);
        let z = SharePair::new(scalar(0, 101), scalar(0, 101)).unwrap();
        let t = local_truncate(&z, 2);
        assert_eq!((t.client.data[0], t.server.data[0]), (0, 0));
    }

    #[test]
    fn truncate_monte_carlo() {
        let pp = ProtocolParams::default();
        let p = pp.p;
        let mut rng = prng(1, "trunc");
        let mut good = 0;
        for _ in 0..1000 {
            let y: i64 = rng.gen_range(-(1 << 14)..(1 << 14));
            let x = RingTensor::from_signed(&[1], &[y], p).unwrap();
            let t = local_truncate(&share(&x, &mut rng), pp.f);
            let got = signed_rep(t.reconstruct().data[0], p);
            if (got - y.div_euclid(1 << pp.f)).abs() <= 1 {
                good += 1;
            }
        }
        assert!(good >= 999, "{good}");
    }

    #[test]
    fn client_shares_look_uniform() {
        let p = ProtocolParams::default().p;
        let mut rng = prng(2, "uniform");
        let x = scalar(12345, p);
        let mut buckets = [0usize; 16];
        let trials = 100_000;
        for _ in 0..trials {
            let c = share(&x, &mut rng).client.data[0];
            buckets[(c as u128 * 16 / p as u128) as usize] += 1;
        }
        for b in buckets {
            let frac = b as f64 / trials as f64;
            assert!((0.04..=0.09).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn reconstruct_many() {
        let p = ProtocolParams::default().p;
        let mut rng = prng(3, "rec");
        let x = RingTensor::random(&[100_000], p, &mut rng);
        assert_eq!(share(&x, &mut rng).reconstruct(), x);
    }

    proptest! {
        // Error is 0 or +1 except when the server half sits within |y| of zero.
        #[test]
        fn truncation_error_contract(y in -(1i64 << 20)..(1 << 20), c in 0u64..(1 << 30), bits in 1u32..12) {
            let p = 1_073_750_017u64;
            let x = RingTensor::from_signed(&[1], &[y], p).unwrap();
            let c = c % p;
            let s = share_with(&x, scalar(c, p)).unwrap();
            let server = signed_rep(s.server.data[0], p);
            let t = local_truncate(&s, bits);
            let got = signed_rep(t.reconstruct().data[0], p);
            let want = y.div_euclid(1 << bits);
            if server.unsigned_abs() > y.unsigned_abs() {
                prop_assert!(got == want || got == want + 1, "{} vs {}", got, want);
            }
        }
    }
}
