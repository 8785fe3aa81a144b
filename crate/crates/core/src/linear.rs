//! How a linear layer consumes an activation tensor under encryption:
//! convolution via im2col and column packing, or FC via input replication.
//! Both return masked products without slot rotations.

use rayon::prelude::*;
use rand::{CryptoRng, Rng, RngCore};

use crate::error::{Error, Result};
use crate::packing::{
    decode_conv_shares, decode_fc, encode_fc_input, encode_fc_weights, encode_iota, encode_kernel,
    im2col, sum_pool, ConvGeometry, FcGeometry,
};
use crate::phe::{Ciphertext, PheContext};
use crate::ring::{add_mod, RingTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Linear {
    /// `fold` > 1 sums fold x fold windows of the activation first.
    Conv { geom: ConvGeometry, fold: usize },
    Fc(FcGeometry),
}

/// Plaintext weight rows, pre-encoded for slotwise products.
pub enum WeightRows {
    /// Indexed [j][beta].
    Conv(Vec<Vec<Vec<u64>>>),
    Fc(Vec<Vec<u64>>),
}

impl Linear {
    /// Rows of the packed activation (d for conv, 1 for FC).
    pub fn input_rows(&self) -> usize {
        match self {
            Linear::Conv { geom, .. } => geom.d(),
            Linear::Fc(_) => 1,
        }
    }

    /// Masked output rows (c_o for conv, d1 for FC).
    pub fn output_rows(&self) -> usize {
        match self {
            Linear::Conv { geom, .. } => geom.c_o,
            Linear::Fc(g) => g.d1(),
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            Linear::Conv { geom, .. } => geom.output_shape().to_vec(),
            Linear::Fc(g) => vec![g.n_o],
        }
    }

    /// Slot layout the encrypted products expect for an activation.
    pub fn encode_input(&self, t: &RingTensor) -> Result<Vec<Vec<u64>>> {
        match self {
            Linear::Conv { geom, fold } => {
                let pooled;
                let src = if *fold > 1 {
                    pooled = sum_pool(t, *fold)?;
                    &pooled
                } else {
                    t
                };
                Ok(encode_iota(&im2col(src, geom)?, geom)?.rows)
            }
            Linear::Fc(g) => {
                if t.len() != g.n_i {
                    return Err(Error::Shape(format!("FC input of {} values, {} expected", t.len(), g.n_i)));
                }
                Ok(vec![encode_fc_input(&t.data, g)])
            }
        }
    }

    pub fn encode_weights(&self, w: &RingTensor) -> Result<WeightRows> {
        Ok(match self {
            Linear::Conv { geom, .. } => WeightRows::Conv(encode_kernel(w, geom)?),
            Linear::Fc(g) => WeightRows::Fc(encode_fc_weights(w, g)?),
        })
    }

    /// Fresh output masks and the server's resulting output share, with the
    /// per-output-channel bias folded in.
    pub fn sample_mask<R: RngCore + CryptoRng>(
        &self,
        n: usize,
        bias: &RingTensor,
        rng: &mut R,
    ) -> Result<(Vec<Vec<u64>>, RingTensor)> {
        let p = bias.modulus;
        let channels = self.output_shape()[0];
        if bias.len() != channels {
            return Err(Error::Shape(format!("{} bias values for {channels} outputs", bias.len())));
        }
        let r: Vec<Vec<u64>> = (0..self.output_rows())
            .map(|_| (0..n).map(|_| rng.gen_range(0..p)).collect())
            .collect();
        let mut share = self.decode_output(&r, p)?;
        let per = share.len() / channels;
        for (i, v) in share.data.iter_mut().enumerate() {
            *v = add_mod(*v, bias.data[i / per], p);
        }
        Ok((r, share))
    }

    pub fn decode_output(&self, rows: &[Vec<u64>], p: u64) -> Result<RingTensor> {
        match self {
            Linear::Conv { geom, .. } => decode_conv_shares(rows, geom, p),
            Linear::Fc(g) => decode_fc(rows, g, p),
        }
    }

    /// Encrypted products minus masks: per output row, the sum over input
    /// rows of slotwise ciphertext-plaintext products.
    pub fn apply(
        &self,
        phe: &PheContext,
        ct_a: &[Ciphertext],
        w: &WeightRows,
        masks: &[Vec<u64>],
    ) -> Result<Vec<Ciphertext>> {
        if ct_a.len() != self.input_rows() || masks.len() != self.output_rows() {
            return Err(Error::Shape("encrypted operand count does not match layer".into()));
        }
        match w {
            WeightRows::Conv(k) => (0..self.output_rows())
                .into_par_iter()
                .map(|b| {
                    let mut acc = phe.mul_plain(&ct_a[0], &k[0][b])?;
                    for (j, ct) in ct_a.iter().enumerate().skip(1) {
                        acc = phe.add(&acc, &phe.mul_plain(ct, &k[j][b])?)?;
                    }
                    phe.sub_plain(&acc, &masks[b])
                })
                .collect(),
            WeightRows::Fc(rows) => rows
                .par_iter()
                .zip(masks)
                .map(|(row, m)| phe.sub_plain(&phe.mul_plain(&ct_a[0], row)?, m))
                .collect(),
        }
    }
}
