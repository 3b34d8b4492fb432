//! Dense row-major tensors and the raw math kernels the autodiff graph
//! records. Tensors are immutable after construction; cloning is cheap
//! (shared storage).

use std::fmt;
use std::sync::Arc;

use crate::error::{MctError, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MctError::shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of the same element count. Shares storage.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(MctError::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(MctError::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(MctError::shape(format!(
            "{what} expects rank-2 tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// C = A (m×k) · B (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_2d(a, "matmul lhs")?;
    check_2d(b, "matmul rhs")?;
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(MctError::shape(format!(
            "matmul inner dims differ: lhs {:?} vs rhs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    check_2d(a, "transpose")?;
    let (m, n) = (a.rows(), a.cols());
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Rows [lo, hi) of a rank-2 tensor.
pub fn slice_rows(a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    check_2d(a, "slice_rows")?;
    if lo > hi || hi > a.rows() {
        return Err(MctError::shape(format!(
            "row slice [{lo},{hi}) out of bounds for {:?}",
            a.shape()
        )));
    }
    let n = a.cols();
    Tensor::new(vec![hi - lo, n], a.data()[lo * n..hi * n].to_vec())
}

/// Columns [lo, hi) of a rank-2 tensor.
pub fn slice_cols(a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    check_2d(a, "slice_cols")?;
    if lo > hi || hi > a.cols() {
        return Err(MctError::shape(format!(
            "col slice [{lo},{hi}) out of bounds for {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.rows(), a.cols());
    let w = hi - lo;
    let ad = a.data();
    let mut out = Vec::with_capacity(m * w);
    for i in 0..m {
        out.extend_from_slice(&ad[i * n + lo..i * n + hi]);
    }
    Tensor::new(vec![m, w], out)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(MctError::shape("concat_rows of zero tensors".to_string()));
    }
    let n = parts[0].cols();
    let mut rows = 0;
    for p in parts {
        check_2d(p, "concat_rows")?;
        if p.cols() != n {
            return Err(MctError::shape(format!(
                "concat_rows column mismatch: {:?} vs {} cols",
                p.shape(),
                n
            )));
        }
        rows += p.rows();
    }
    let mut out = Vec::with_capacity(rows * n);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, n], out)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(MctError::shape("concat_cols of zero tensors".to_string()));
    }
    let m = parts[0].rows();
    let mut width = 0;
    for p in parts {
        check_2d(p, "concat_cols")?;
        if p.rows() != m {
            return Err(MctError::shape(format!(
                "concat_cols row mismatch: {:?} vs {} rows",
                p.shape(),
                m
            )));
        }
        width += p.cols();
    }
    let mut out = Vec::with_capacity(m * width);
    for i in 0..m {
        for p in parts {
            let n = p.cols();
            out.extend_from_slice(&p.data()[i * n..(i + 1) * n]);
        }
    }
    Tensor::new(vec![m, width], out)
}

/// x (r×c) + b (c) broadcast over rows. The only broadcast pattern supported.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_2d(x, "add_row_bias")?;
    if b.rank() != 1 || b.len() != x.cols() {
        return Err(MctError::shape(format!(
            "bias {:?} does not match row width of {:?}",
            b.shape(),
            x.shape()
        )));
    }
    let (m, n) = (x.rows(), x.cols());
    let xd = x.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(xd[i * n + j] + bd[j]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax, stabilized by row-max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    check_2d(x, "softmax_rows")?;
    let (m, n) = (x.rows(), x.cols());
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Per-row mean/inv-std caches from layer_norm, reused by its backward.
pub struct LayerNormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// y = (x - mean) / sqrt(var + eps) * gain + bias, per row. Biased variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    check_2d(x, "layer_norm")?;
    let (m, n) = (x.rows(), x.cols());
    if gain.rank() != 1 || gain.len() != n || bias.rank() != 1 || bias.len() != n {
        return Err(MctError::shape(format!(
            "layer_norm gain {:?} / bias {:?} do not match width of {:?}",
            gain.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0; m * n];
    let mut mean = vec![0.0; m];
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mu: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        mean[i] = mu;
        inv_std[i] = inv;
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mu) * inv * gd[j] + bd[j];
        }
    }
    Ok((Tensor::new(vec![m, n], out)?, LayerNormCache { mean, inv_std }))
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zero-padded stride-1 convolution: x (D×N×N), w (C×D×k×k), b (C) -> (C×N×N).
/// Kernel size must be odd; padding is (k-1)/2 so spatial dims are preserved.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(MctError::shape(format!(
            "conv2d expects x rank 3, w rank 4, b rank 1; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oc, ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ic != d || kh != kw || kh % 2 == 0 || b.len() != oc {
        return Err(MctError::shape(format!(
            "conv2d weight {:?} / bias {:?} incompatible with input {:?} (odd square kernel required)",
            w.shape(),
            b.shape(),
            x.shape()
        )));
    }
    let pad = kh / 2;
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    let mut out = vec![0.0; oc * h * wd];
    for o in 0..oc {
        for oy in 0..h {
            for ox in 0..wd {
                let mut acc = bd[o];
                for c in 0..d {
                    for ky in 0..kh {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xd[(c * h + iy as usize) * wd + ix as usize]
                                * wdat[((o * d + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * h + oy) * wd + ox] = acc;
            }
        }
    }
    Tensor::new(vec![oc, h, wd], out)
}

/// Descending ranking per column of a (rows×cols) tensor; ties broken by the
/// lower row index. Returned as, per column, the row indices in rank order.
pub fn rank_columns_desc(p: &Tensor) -> Vec<Vec<usize>> {
    let (m, c) = (p.rows(), p.cols());
    let pd = p.data();
    (0..c)
        .map(|col| {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| {
                pd[b * c + col]
                    .partial_cmp(&pd[a * c + col])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

/// Geometric rank weights lambda^(j-1) / S(lambda), j = 1..=m, with 0^0 = 1.
pub fn gwrp_weights(m: usize, lambda: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(m);
    let mut pw = 1.0;
    let mut s = 0.0;
    for _ in 0..m {
        w.push(pw);
        s += pw;
        pw *= lambda;
    }
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_exact() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let c = matmul(&a, &eye).unwrap();
        assert_eq!(c.data(), a.data());

        let eye2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c2 = matmul(&eye2, &a).unwrap();
        assert_eq!(c2.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&big).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_two_logit_case() {
        // sigmoid oracle: softmax([1,2]) = [1-s, s] with s = sigmoid(1)
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        let sig = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((s.data()[0] - (1.0 - sig)).abs() < 1e-12);
        assert!((s.data()[1] - sig).abs() < 1e-12);
        assert!((s.data()[0] - 0.26894).abs() < 1e-5);
        assert!((s.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[1, 4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let (y, _) = layer_norm(
            &Tensor::full(&[1, 4], 3.0),
            &Tensor::full(&[4], 1.0),
            &zero,
            1e-6,
        )
        .unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0); // constant row: zero variance limit
        }
        let _ = ones;

        // mean/var by hand: row [1,3] -> [-1, 1] as eps -> 0
        let (y, _) = layer_norm(
            &Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap(),
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);

        // gain = 0 -> bias broadcast
        let bias = Tensor::new(vec![2], vec![5.0, -2.0]).unwrap();
        let (y, _) = layer_norm(
            &Tensor::new(vec![2, 2], vec![1.0, 3.0, -4.0, 9.0]).unwrap(),
            &Tensor::zeros(&[2]),
            &bias,
            1e-6,
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0, -2.0, 5.0, -2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn conv2d_zero_weights_give_bias() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| i as f64 * 0.1);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        for c in 0..3 {
            for i in 0..16 {
                assert_eq!(y.data()[c * 16 + i], b.data()[c]);
            }
        }
    }

    #[test]
    fn conv2d_single_pixel_uses_center_tap() {
        // 1x1 image with a 3x3 kernel: zero padding leaves only the center tap.
        let x = Tensor::new(vec![2, 1, 1], vec![3.0, -2.0]).unwrap();
        let mut wdat = vec![0.0; 1 * 2 * 3 * 3];
        for (c, v) in [(0usize, 10.0), (1usize, 100.0)] {
            wdat[(c * 3 + 1) * 3 + 1] = v; // center position (1,1)
        }
        // also set a corner tap that must be ignored
        wdat[0] = 999.0;
        let w = Tensor::new(vec![1, 2, 3, 3], wdat).unwrap();
        let b = Tensor::new(vec![1], vec![0.25]).unwrap();
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert!((y.data()[0] - (3.0 * 10.0 + (-2.0) * 100.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn gwrp_weights_limits() {
        let w = gwrp_weights(4, 1.0);
        for &v in &w {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let w = gwrp_weights(4, 0.0);
        assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_columns_breaks_ties_by_lower_index() {
        let p = Tensor::new(vec![3, 1], vec![2.0, 5.0, 2.0]).unwrap();
        let r = rank_columns_desc(&p);
        assert_eq!(r[0], vec![1, 0, 2]);
    }
}
