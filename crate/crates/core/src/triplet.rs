//! ReLU without a multiplexer. With DReLU bits shared as b_C ^ b_S and the
//! activation as a_C + a_S, the product bit * a splits into
//!
//!   h1 = a_C b_C - r_C        h2 = a_C (1 - 2 b_C)     h3 = b_S
//!   h4 = a_S (1 - 2 b_S)      h5 = b_C                  h6 = a_S b_S
//!   h7 = r_C
//!
//! so that (h6 + h7) + (h1 + h2 h3 + h4 h5) = ReLU(a). h3, h4, h6 and h7
//! depend only on pre-sampled values; the server encrypts h3 and h4 under
//! its key, the client encrypts h7 under its key, both offline. Online the
//! client folds its terms into encryptions of h9 = h1 + h2 h3 + h4 h5, the
//! server decrypts h9 and adds it to Enc_C(h6 + h7) to hold Enc_C(ReLU(a)).

use rand::{CryptoRng, Rng, RngCore};

use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::packing::{decode_psi, encode_psi};
use crate::phe::{Ciphertext, PheContext, PheKeyMaterial, SecretKey};
use crate::ring::{add_mod, mul_mod, sub_mod, RingTensor};

fn lift(b: bool) -> u64 {
    b as u64
}

/// x (1 - 2b) for a bit b.
fn flip(x: u64, b: bool, p: u64) -> u64 {
    if b {
        sub_mod(0, x, p)
    } else {
        x
    }
}

/// Client terms (h1, h2, h5).
pub fn client_terms(a_c: &[u64], bits_c: &[bool], r_c: &[u64], p: u64) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let h1 = a_c
        .iter()
        .zip(bits_c)
        .zip(r_c)
        .map(|((&a, &b), &r)| sub_mod(mul_mod(a, lift(b), p), r, p))
        .collect();
    let h2 = a_c.iter().zip(bits_c).map(|(&a, &b)| flip(a, b, p)).collect();
    let h5 = bits_c.iter().map(|&b| lift(b)).collect();
    (h1, h2, h5)
}

/// Server terms (h3, h4, h6).
pub fn server_terms(a_s: &[u64], bits_s: &[bool], p: u64) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let h3 = bits_s.iter().map(|&b| lift(b)).collect();
    let h4 = a_s.iter().zip(bits_s).map(|(&a, &b)| flip(a, b, p)).collect();
    let h6 = a_s
        .iter()
        .zip(bits_s)
        .map(|(&a, &b)| mul_mod(a, lift(b), p))
        .collect();
    (h3, h4, h6)
}

/// Plaintext h9 = h1 + h2 h3 + h4 h5.
pub fn h9_plain(h1: u64, h2: u64, h3: u64, h4: u64, h5: u64, p: u64) -> u64 {
    add_mod(h1, add_mod(mul_mod(h2, h3, p), mul_mod(h4, h5, p), p), p)
}

pub struct ClientOfflineBundle {
    /// Mask r_C, which is also h7.
    pub r_c: RingTensor,
    /// Encryptions of the packed, expanded mask under the client key.
    pub ct_h: Vec<Ciphertext>,
}

pub struct ServerOfflineBundle {
    pub a_hat_s: Vec<bool>,
    /// Server share of the activation, known before the session starts.
    pub a_s: RingTensor,
    pub r_s: Vec<Vec<u64>>,
    pub ct_hbar: Vec<Ciphertext>,
    pub ct_htilde: Vec<Ciphertext>,
    /// Enc_C(h6 + h7) in the packed layout, once the client's ct_H arrived.
    pub ct_hcheck: Option<Vec<Ciphertext>>,
    /// Server share of the layer output.
    pub y_share_s: RingTensor,
}

pub fn gen_client_offline<R: RngCore + CryptoRng>(
    phe: &PheContext,
    keys: &PheKeyMaterial,
    lin: &Linear,
    in_shape: &[usize],
    rng: &mut R,
) -> Result<ClientOfflineBundle> {
    let r_c = RingTensor::random(in_shape, phe.p(), rng);
    let ct_h = lin
        .encode_input(&r_c)?
        .iter()
        .map(|row| phe.encrypt(&keys.public, row, rng))
        .collect::<Result<_>>()?;
    Ok(ClientOfflineBundle { r_c, ct_h })
}

/// Everything the server can do before the client's ct_H arrives.
pub fn gen_server_offline<R: RngCore + CryptoRng>(
    phe: &PheContext,
    keys: &PheKeyMaterial,
    lin: &Linear,
    a_s: &RingTensor,
    bias: &RingTensor,
    rng: &mut R,
) -> Result<ServerOfflineBundle> {
    let p = phe.p();
    let n = phe.slots();
    let a_hat_s: Vec<bool> = (0..a_s.len()).map(|_| rng.gen()).collect();
    let (h3, h4, _) = server_terms(&a_s.data, &a_hat_s, p);
    let enc_rows = |v: Vec<u64>, rng: &mut R| -> Result<Vec<Ciphertext>> {
        let t = RingTensor::new(&[v.len()], v, p)?;
        encode_psi(&t, n)
            .rows
            .iter()
            .map(|row| phe.encrypt(&keys.public, row, rng))
            .collect()
    };
    let ct_hbar = enc_rows(h3, rng)?;
    let ct_htilde = enc_rows(h4, rng)?;
    let (r_s, y_share_s) = lin.sample_mask(n, bias, rng)?;
    Ok(ServerOfflineBundle {
        a_hat_s,
        a_s: a_s.clone(),
        r_s,
        ct_hbar,
        ct_htilde,
        ct_hcheck: None,
        y_share_s,
    })
}

impl ServerOfflineBundle {
    /// ct_Hcheck_j = pack(h6)_j + ct_H_j.
    pub fn attach_client(&mut self, phe: &PheContext, lin: &Linear, ct_h: &[Ciphertext]) -> Result<()> {
        if ct_h.len() != lin.input_rows() {
            return Err(Error::Shape(format!(
                "{} mask ciphertexts, layer expects {}",
                ct_h.len(),
                lin.input_rows()
            )));
        }
        let (_, _, h6) = server_terms(&self.a_s.data, &self.a_hat_s, phe.p());
        let h6 = RingTensor::new(&self.a_s.shape, h6, phe.p())?;
        let rows = lin.encode_input(&h6)?;
        self.ct_hcheck = Some(
            ct_h.iter()
                .zip(&rows)
                .map(|(ct, row)| phe.add_plain(ct, row))
                .collect::<Result<_>>()?,
        );
        Ok(())
    }
}

/// Client step right after DReLU: Enc_S(h9) row by row.
pub fn client_online_h9(
    phe: &PheContext,
    a_c: &RingTensor,
    bits_c: &[bool],
    r_c: &RingTensor,
    ct_hbar: &[Ciphertext],
    ct_htilde: &[Ciphertext],
) -> Result<Vec<Ciphertext>> {
    let p = phe.p();
    let n = phe.slots();
    if bits_c.len() != a_c.len() || r_c.len() != a_c.len() {
        return Err(Error::Shape("DReLU bits and mask must match the activation".into()));
    }
    let (h1, h2, h5) = client_terms(&a_c.data, bits_c, &r_c.data, p);
    let psi = |v: Vec<u64>| -> Result<Vec<Vec<u64>>> {
        Ok(encode_psi(&RingTensor::new(&[v.len()], v, p)?, n).rows)
    };
    let (h1, h2, h5) = (psi(h1)?, psi(h2)?, psi(h5)?);
    if ct_hbar.len() != h1.len() || ct_htilde.len() != h1.len() {
        return Err(Error::Shape("server triplet does not cover the activation".into()));
    }
    (0..h1.len())
        .map(|nu| {
            let t = phe.add(&phe.mul_plain(&ct_hbar[nu], &h2[nu])?, &phe.mul_plain(&ct_htilde[nu], &h5[nu])?)?;
            phe.add_plain(&t, &h1[nu])
        })
        .collect()
}

/// Server: decrypt h9 and assemble Enc_C(ReLU(a)) in the packed layout.
pub fn server_decrypt_assemble(
    phe: &PheContext,
    sk: &SecretKey,
    lin: &Linear,
    bundle: &ServerOfflineBundle,
    ct_hacute: &[Ciphertext],
) -> Result<Vec<Ciphertext>> {
    let hcheck = bundle
        .ct_hcheck
        .as_ref()
        .ok_or_else(|| Error::Protocol("client mask ciphertexts never arrived".into()))?;
    let rows = ct_hacute
        .iter()
        .map(|ct| phe.decrypt(sk, ct))
        .collect::<Result<Vec<_>>>()?;
    let h9 = decode_psi(&rows, &bundle.a_s.shape, phe.p())?;
    let packed = lin.encode_input(&h9)?;
    hcheck
        .iter()
        .zip(&packed)
        .map(|(ct, row)| phe.add_plain(ct, row))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::signed_rep;

    fn relu_via_terms(a: u64, split: u64, bc: bool, bs: bool, r: u64, p: u64) -> u64 {
        let ac = split;
        let as_ = sub_mod(a, split, p);
        let (h1, h2, h5) = client_terms(&[ac], &[bc], &[r], p);
        let (h3, h4, h6) = server_terms(&[as_], &[bs], p);
        let h9 = h9_plain(h1[0], h2[0], h3[0], h4[0], h5[0], p);
        add_mod(add_mod(h6[0], r, p), h9, p)
    }

    #[test]
    fn scalar_example_at_seven() {
        let p = 7;
        let (h1, h2, h5) = client_terms(&[5], &[true], &[2], p);
        assert_eq!((h1[0], h2[0], h5[0]), (3, 2, 1));
        let (h3, h4, h6) = server_terms(&[5], &[false], p);
        let h9 = h9_plain(h1[0], h2[0], h3[0], h4[0], h5[0], p);
        assert_eq!(h9, 1);
        assert_eq!(add_mod(h6[0], 2, p), 2);
        assert_eq!(add_mod(add_mod(h6[0], 2, p), h9, p), 3);
    }

    #[test]
    fn zero_bits_reduce_server_terms() {
        let (h3, h4, h6) = server_terms(&[4, 9], &[false, false], 17);
        assert_eq!((h3, h4, h6), (vec![0, 0], vec![4, 9], vec![0, 0]));
    }

    #[test]
    fn identity_exhaustive_at_seventeen() {
        let p = 17;
        for a in 0..p {
            let want = if signed_rep(a, p) >= 0 { a } else { 0 };
            for split in 0..p {
                for r in 0..p {
                    for bc in [false, true] {
                        // The server bit completes the true DReLU bit.
                        let bs = bc ^ (signed_rep(a, p) >= 0);
                        assert_eq!(relu_via_terms(a, split, bc, bs, r, p), want);
                    }
                }
            }
        }
    }
}
