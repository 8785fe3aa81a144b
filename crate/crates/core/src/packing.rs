//! Slot layouts: im2col, the column packing used for convolution inputs,
//! kernel replication, tight row-major packing, and the FC variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{add_mod, mul_mod, RingTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub c_i: usize,
    pub h_i: usize,
    pub w_i: usize,
    pub c_o: usize,
    pub f_h: usize,
    pub f_w: usize,
    pub s: usize,
    pub pad: usize,
    /// Slots per ciphertext.
    pub n: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        (c_i, h_i, w_i): (usize, usize, usize),
        (c_o, f_h, f_w): (usize, usize, usize),
        s: usize,
        pad: usize,
    ) -> Result<Self> {
        let g = ConvGeometry {
            c_i,
            h_i,
            w_i,
            c_o,
            f_h,
            f_w,
            s,
            pad,
            n,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.c_i, self.h_i, self.w_i, self.c_o, self.f_h, self.f_w, self.s]
            .contains(&0)
        {
            return Err(Error::Shape(format!("degenerate geometry {self:?}")));
        }
        if self.h_i + 2 * self.pad < self.f_h || self.w_i + 2 * self.pad < self.f_w {
            return Err(Error::Shape(format!("kernel larger than padded input: {self:?}")));
        }
        if self.xi() == 0 {
            return Err(Error::Shape(format!(
                "output map of {} positions exceeds {} slots",
                self.out_len(),
                self.n
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.h_i + 2 * self.pad - self.f_h) / self.s + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w_i + 2 * self.pad - self.f_w) / self.s + 1
    }

    /// Output positions per channel.
    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Receptive-field length c_i * f_h * f_w.
    pub fn field(&self) -> usize {
        self.c_i * self.f_h * self.f_w
    }

    /// Output maps per ciphertext row.
    pub fn xi(&self) -> usize {
        self.n / self.out_len()
    }

    /// Rows of the column-packed input.
    pub fn d(&self) -> usize {
        self.field().div_ceil(self.xi())
    }

    /// Rows of the tight packing of the input tensor.
    pub fn sigma(&self) -> usize {
        (self.c_i * self.h_i * self.w_i).div_ceil(self.n)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.c_i, self.h_i, self.w_i]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.c_o, self.out_h(), self.out_w()]
    }
}

/// Row-major dense matrix over Z_p.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }

    /// Plain matrix product mod p.
    pub fn dot(&self, other: &Matrix, p: u64) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut data = vec![0u64; self.rows * other.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0 {
                    continue;
                }
                for j in 0..other.cols {
                    let cell = &mut data[i * other.cols + j];
                    *cell = add_mod(*cell, mul_mod(a, other.get(k, j), p), p);
                }
            }
        }
        Matrix {
            rows: self.rows,
            cols: other.cols,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Iota,
    Psi,
    Fc,
}

/// Rows of n slots each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedMatrix {
    pub rows: Vec<Vec<u64>>,
    pub layout: Layout,
}

fn check_input(a: &RingTensor, g: &ConvGeometry) -> Result<()> {
    if a.shape != g.input_shape() {
        return Err(Error::Shape(format!(
            "tensor {:?} does not match geometry input {:?}",
            a.shape,
            g.input_shape()
        )));
    }
    Ok(())
}

/// Receptive-field matrix: one row per output position, columns ordered
/// (channel, kernel row, kernel column) like a flattened kernel.
pub fn im2col(a: &RingTensor, g: &ConvGeometry) -> Result<Matrix> {
    check_input(a, g)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.field();
    let mut data = vec![0u64; oh * ow * cols];
    for y in 0..oh {
        for x in 0..ow {
            let row = &mut data[(y * ow + x) * cols..][..cols];
            for c in 0..g.c_i {
                for kh in 0..g.f_h {
                    let iy = (y * g.s + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_i as isize {
                        continue;
                    }
                    for kw in 0..g.f_w {
                        let ix = (x * g.s + kw) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w_i as isize {
                            continue;
                        }
                        row[(c * g.f_h + kh) * g.f_w + kw] =
                            a.data[(c * g.h_i + iy as usize) * g.w_i + ix as usize];
                    }
                }
            }
        }
    }
    Ok(Matrix {
        rows: oh * ow,
        cols,
        data,
    })
}

/// Kernel c_o x c_i x f_h x f_w as the field x c_o matrix.
pub fn kernel_matrix(k: &RingTensor, g: &ConvGeometry) -> Result<Matrix> {
    if k.shape != [g.c_o, g.c_i, g.f_h, g.f_w] {
        return Err(Error::Shape(format!("kernel {:?} vs geometry {g:?}", k.shape)));
    }
    let cols = g.field();
    let mut data = vec![0u64; cols * g.c_o];
    for b in 0..g.c_o {
        for l in 0..cols {
            data[l * g.c_o + b] = k.data[b * cols + l];
        }
    }
    Ok(Matrix {
        rows: cols,
        cols: g.c_o,
        data,
    })
}

/// Output matrix (positions x channels) back to c_o x h' x w'.
pub fn col2im_output(y: &Matrix, g: &ConvGeometry, p: u64) -> Result<RingTensor> {
    let hw = g.out_len();
    if y.rows != hw || y.cols != g.c_o {
        return Err(Error::Shape("output matrix does not match geometry".into()));
    }
    let mut data = vec![0u64; g.c_o * hw];
    for b in 0..g.c_o {
        for t in 0..hw {
            data[b * hw + t] = y.get(t, b);
        }
    }
    RingTensor::new(&g.output_shape(), data, p)
}

pub fn encode_iota(a: &Matrix, g: &ConvGeometry) -> Result<EncodedMatrix> {
    let hw = g.out_len();
    let xi = g.xi();
    if xi == 0 {
        return Err(Error::Shape("no output map fits in one row".into()));
    }
    if a.rows != hw || a.cols != g.field() {
        return Err(Error::Shape("receptive-field matrix does not match geometry".into()));
    }
    let rows = (0..g.d())
        .map(|j| {
            let mut row = vec![0u64; g.n];
            for (z, slot) in row.iter_mut().enumerate().take(hw * xi) {
                let l = j * xi + z / hw;
                if l < a.cols {
                    *slot = a.get(z % hw, l);
                }
            }
            row
        })
        .collect();
    Ok(EncodedMatrix {
        rows,
        layout: Layout::Iota,
    })
}

/// Replicated kernel rows, indexed [j][beta].
pub fn encode_kernel(k: &RingTensor, g: &ConvGeometry) -> Result<Vec<Vec<Vec<u64>>>> {
    let km = kernel_matrix(k, g)?;
    let hw = g.out_len();
    let xi = g.xi();
    Ok((0..g.d())
        .map(|j| {
            (0..g.c_o)
                .map(|b| {
                    let mut row = vec![0u64; g.n];
                    for (z, slot) in row.iter_mut().enumerate().take(hw * xi) {
                        let l = j * xi + z / hw;
                        if l < km.rows {
                            *slot = km.get(l, b);
                        }
                    }
                    row
                })
                .collect()
        })
        .collect())
}

/// Multiply a kernel by per-output-channel factors and/or a global factor.
pub fn scale_kernel(k: &RingTensor, per_channel: Option<&[u64]>, factor: Option<u64>) -> RingTensor {
    let p = k.modulus;
    let per = k.len() / k.shape[0].max(1);
    let mut out = k.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        if let Some(mu) = per_channel {
            *v = mul_mod(*v, mu[i / per], p);
        }
        if let Some(f) = factor {
            *v = mul_mod(*v, f, p);
        }
    }
    out
}

/// Sum the xi segments of each returned row and reshape to c_o x h' x w'.
pub fn decode_conv_shares(rows: &[Vec<u64>], g: &ConvGeometry, p: u64) -> Result<RingTensor> {
    if rows.len() != g.c_o {
        return Err(Error::Shape(format!("{} rows for {} channels", rows.len(), g.c_o)));
    }
    let hw = g.out_len();
    let mut data = vec![0u64; g.c_o * hw];
    for (b, row) in rows.iter().enumerate() {
        for chi in 0..g.xi() {
            for t in 0..hw {
                let cell = &mut data[b * hw + t];
                *cell = add_mod(*cell, row[chi * hw + t], p);
            }
        }
    }
    RingTensor::new(&g.output_shape(), data, p)
}

/// Flat row-major split into rows of n slots, zero tail.
pub fn encode_psi(t: &RingTensor, n: usize) -> EncodedMatrix {
    let rows = t
        .data
        .chunks(n)
        .map(|c| {
            let mut row = c.to_vec();
            row.resize(n, 0);
            row
        })
        .collect();
    EncodedMatrix {
        rows,
        layout: Layout::Psi,
    }
}

pub fn decode_psi(rows: &[Vec<u64>], shape: &[usize], p: u64) -> Result<RingTensor> {
    let len: usize = shape.iter().product();
    let flat: Vec<u64> = rows.iter().flatten().copied().take(len).collect();
    RingTensor::new(shape, flat, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FcGeometry {
    pub n_i: usize,
    pub n_o: usize,
    pub n: usize,
}

impl FcGeometry {
    pub fn new(n: usize, n_i: usize, n_o: usize) -> Result<Self> {
        if n_i == 0 || n_o == 0 {
            return Err(Error::Shape("empty FC layer".into()));
        }
        if n_i > n {
            return Err(Error::Shape(format!("FC input {n_i} exceeds {n} slots")));
        }
        Ok(FcGeometry { n_i, n_o, n })
    }

    pub fn xi(&self) -> usize {
        self.n / self.n_i
    }

    /// Packed weight rows.
    pub fn d1(&self) -> usize {
        self.n_o.div_ceil(self.xi())
    }

    pub fn sigma(&self) -> usize {
        self.n_i.div_ceil(self.n)
    }
}

/// xi copies of the input vector, zero tail.
pub fn encode_fc_input(a: &[u64], g: &FcGeometry) -> Vec<u64> {
    let mut row = vec![0u64; g.n];
    for l in 0..g.xi() {
        row[l * g.n_i..(l + 1) * g.n_i].copy_from_slice(a);
    }
    row
}

/// Weight rows: row tau holds W rows tau*xi .. tau*xi + xi - 1 back to back.
pub fn encode_fc_weights(w: &RingTensor, g: &FcGeometry) -> Result<Vec<Vec<u64>>> {
    if w.shape != [g.n_o, g.n_i] {
        return Err(Error::Shape(format!("weights {:?} vs {g:?}", w.shape)));
    }
    let xi = g.xi();
    Ok((0..g.d1())
        .map(|tau| {
            let mut row = vec![0u64; g.n];
            for l in 0..xi {
                let b = tau * xi + l;
                if b < g.n_o {
                    row[l * g.n_i..(l + 1) * g.n_i]
                        .copy_from_slice(&w.data[b * g.n_i..(b + 1) * g.n_i]);
                }
            }
            row
        })
        .collect())
}

pub fn decode_fc(rows: &[Vec<u64>], g: &FcGeometry, p: u64) -> Result<RingTensor> {
    if rows.len() != g.d1() {
        return Err(Error::Shape(format!("{} rows, {} expected", rows.len(), g.d1())));
    }
    let xi = g.xi();
    let data = (0..g.n_o)
        .map(|b| {
            let row = &rows[b / xi];
            let base = g.n_i * (b % xi);
            row[base..base + g.n_i].iter().fold(0, |acc, &v| add_mod(acc, v, p))
        })
        .collect();
    RingTensor::new(&[g.n_o], data, p)
}

/// Window sums with ceiling windows: c x h x w to c x ceil(h/s) x ceil(w/s).
pub fn sum_pool(t: &RingTensor, s: usize) -> Result<RingTensor> {
    let [c, h, w] = shape3(t)?;
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let p = t.modulus;
    let mut data = vec![0u64; c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let cell = &mut data[(ch * oh + y / s) * ow + x / s];
                *cell = add_mod(*cell, t.data[(ch * h + y) * w + x], p);
            }
        }
    }
    Ok(RingTensor::new(&[c, oh, ow], data, p)?.with_scale(t.scale))
}

pub fn shape3(t: &RingTensor) -> Result<[usize; 3]> {
    t.shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a 3-d tensor, got {:?}", t.shape)))
}
