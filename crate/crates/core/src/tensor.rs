//! Dense row-major 2-d arrays and the handful of element-wise ops the model
//! needs. Double precision throughout: the finite-difference oracle that
//! validates every backward pass needs it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense matrix, row-major. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("len {}", data.len()),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, data }
    }

    /// Row vector from a slice.
    pub fn row_vector(v: &[f64]) -> Self {
        Tensor2 {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor2 {
        Tensor2::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "add_assign",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * u v^T`. Used by backward passes to accumulate outer
    /// products into weight gradients.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(self.rows, u.len());
        debug_assert_eq!(self.cols, v.len());
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let f = s * ur;
            if f != 0.0 {
                for (x, &vc) in row.iter_mut().zip(v) {
                    *x += f * vc;
                }
            }
        }
    }

    /// `A x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect()
    }

    /// `A^T x` for a vector `x` of length `rows`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows, x.len());
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                for (o, &a) in out.iter_mut().zip(self.row(r)) {
                    *o += xr * a;
                }
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product.
pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik != 0.0 {
                let brow = b.row(k);
                let orow = out.row_mut(i);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }
    Ok(out)
}

/// Element-wise max(0, x).
pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

pub fn relu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the entries of `values` indexed by `selected`, with
/// max-subtraction for stability. Returns one weight per selected index,
/// in the order given.
pub fn softmax_masked(values: &[f64], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::Input("softmax_masked: empty selection".into()));
    }
    let max = selected
        .iter()
        .map(|&i| values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&i| (values[i] - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode the
/// input passes through untouched.
pub fn dropout(x: &Tensor2, p: f64, training: bool, rng: &mut Rng) -> Result<Tensor2> {
    let mask = dropout_mask(x.len(), p, training, rng)?;
    let mut out = x.clone();
    for (v, m) in out.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok(out)
}

/// The multiplicative mask behind [`dropout`]; kept separate so backward
/// passes can reuse the exact mask from the forward pass.
pub fn dropout_mask(len: usize, p: f64, training: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} not in [0,1)")));
    }
    if !training || p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect())
}
