//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order on a [`Graph`]; `backward`
//! replays them in exact reverse order, accumulating gradients additively
//! over fan-out. A graph is single-threaded; tensors it hands out are
//! immutable and safe to share. Independent graphs are independent.

use std::cell::RefCell;

use crate::error::{MctError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in one [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by one backward pass, keyed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when `v` was not reached.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Tracked leaf: gradients will be accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_node(value, vec![], None, true)
    }

    /// Untracked input (data, labels, masks): no gradient is kept.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, vec![], None, false)
    }

    /// Current value of a node (cheap clone, shared storage).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn push_node(&self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>, leaf_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = if back.is_none() {
            leaf_grad
        } else {
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        nodes.push(Node {
            value,
            parents,
            back,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, value: Tensor, parents: Vec<Var>, back: BackFn) -> Var {
        self.push_node(value, parents.iter().map(|v| v.0).collect(), Some(back), false)
    }

    /// Reverse pass from a scalar root. Visits nodes in exact reverse
    /// execution order; accumulation is additive over fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(MctError::shape(format!(
                "backward root must be scalar, got {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.value.all_finite() {
            return Err(MctError::numerical(
                "backward called on non-finite loss".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad && node.back.is_some() {
                continue;
            }
            let Some(back) = node.back.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let parent_grads = back(&gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let parent = &nodes[pid];
                if !parent.needs_grad {
                    continue;
                }
                if pg.shape() != parent.value.shape() {
                    return Err(MctError::shape(format!(
                        "gradient shape {:?} does not match value shape {:?}",
                        pg.shape(),
                        parent.value.shape()
                    )));
                }
                grads[pid] = Some(match grads[pid].take() {
                    Some(cur) => cur.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise and linear ops -------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.push_op(out, vec![a, b], Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(|g| vec![g.clone(), g.scale(-1.0)]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.mul(&bv)?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |g| {
                vec![
                    g.mul(&bv).expect("shape checked"),
                    g.mul(&av).expect("shape checked"),
                ]
            }),
        ))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push_op(out, vec![a], Box::new(move |g| vec![g.scale(k)]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = tensor::matmul(&av, &bv)?;
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |g| {
                let bt = tensor::transpose(&bv).expect("checked");
                let at = tensor::transpose(&av).expect("checked");
                vec![
                    tensor::matmul(g, &bt).expect("checked"),
                    tensor::matmul(&at, g).expect("checked"),
                ]
            }),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = tensor::transpose(&self.value(a))?;
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(|g| vec![tensor::transpose(g).expect("checked")]),
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let old_shape = av.shape().to_vec();
        let out = av.reshape(shape)?;
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g| vec![g.reshape(&old_shape).expect("checked")]),
        ))
    }

    pub fn slice_rows(&self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let av = self.value(a);
        let out = tensor::slice_rows(&av, lo, hi)?;
        let full = av.shape().to_vec();
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g| {
                let n = full[1];
                let mut buf = vec![0.0; full[0] * n];
                buf[lo * n..hi * n].copy_from_slice(g.data());
                vec![Tensor::new(full.clone(), buf).expect("checked")]
            }),
        ))
    }

    pub fn slice_cols(&self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let av = self.value(a);
        let out = tensor::slice_cols(&av, lo, hi)?;
        let full = av.shape().to_vec();
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |g| {
                let (m, n) = (full[0], full[1]);
                let w = hi - lo;
                let mut buf = vec![0.0; m * n];
                for i in 0..m {
                    buf[i * n + lo..i * n + hi].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Tensor::new(full.clone(), buf).expect("checked")]
            }),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = tensor::concat_rows(&refs)?;
        let row_counts: Vec<usize> = values.iter().map(|t| t.rows()).collect();
        Ok(self.push_op(
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0;
                row_counts
                    .iter()
                    .map(|&r| {
                        let part = tensor::slice_rows(g, offset, offset + r).expect("checked");
                        offset += r;
                        part
                    })
                    .collect()
            }),
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = tensor::concat_cols(&refs)?;
        let col_counts: Vec<usize> = values.iter().map(|t| t.cols()).collect();
        Ok(self.push_op(
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0;
                col_counts
                    .iter()
                    .map(|&c| {
                        let part = tensor::slice_cols(g, offset, offset + c).expect("checked");
                        offset += c;
                        part
                    })
                    .collect()
            }),
        ))
    }

    pub fn add_row_bias(&self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = tensor::add_row_bias(&xv, &self.value(b))?;
        let (m, n) = (xv.rows(), xv.cols());
        Ok(self.push_op(
            out,
            vec![x, b],
            Box::new(move |g| {
                let gd = g.data();
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += gd[i * n + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![n], db).expect("checked")]
            }),
        ))
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(&self.value(x))?;
        let y = out.clone();
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g| {
                let (m, n) = (y.rows(), y.cols());
                let yd = y.data();
                let gd = g.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &yd[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Tensor::new(vec![m, n], dx).expect("checked")]
            }),
        ))
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let (out, cache) = tensor::layer_norm(&xv, &gv, &self.value(bias), eps)?;
        let (m, n) = (xv.rows(), xv.cols());
        Ok(self.push_op(
            out,
            vec![x, gain, bias],
            Box::new(move |g| {
                let xd = xv.data();
                let gaind = gv.data();
                let gd = g.data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let mu = cache.mean[i];
                    let inv = cache.inv_std[i];
                    let xr = &xd[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    // dxhat, and accumulate the gain/bias gradients
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_d = 0.0;
                    for j in 0..n {
                        let xhat = (xr[j] - mu) * inv;
                        let dxhat = gr[j] * gaind[j];
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_d += dxhat * (xr[j] - mu);
                    }
                    let dvar = sum_dxhat_d * (-0.5) * inv * inv * inv;
                    let dmu = -inv * sum_dxhat;
                    for j in 0..n {
                        let d = xr[j] - mu;
                        let dxhat = gr[j] * gaind[j];
                        dx[i * n + j] = dxhat * inv + dvar * 2.0 * d / n as f64 + dmu / n as f64;
                    }
                }
                vec![
                    Tensor::new(vec![m, n], dx).expect("checked"),
                    Tensor::new(vec![n], dgain).expect("checked"),
                    Tensor::new(vec![n], dbias).expect("checked"),
                ]
            }),
        ))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(tensor::gelu);
        self.push_op(
            out,
            vec![x],
            Box::new(move |g| {
                vec![g
                    .zip_map(&xv, |gv, v| gv * tensor::gelu_deriv(v))
                    .expect("checked")]
            }),
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(tensor::sigmoid);
        let y = out.clone();
        self.push_op(
            out,
            vec![x],
            Box::new(move |g| {
                vec![g.zip_map(&y, |gv, s| gv * s * (1.0 - s)).expect("checked")]
            }),
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.push_op(
            out,
            vec![x],
            Box::new(move |g| vec![Tensor::full(&shape, g.item())]),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum() / n);
        self.push_op(
            out,
            vec![x],
            Box::new(move |g| vec![Tensor::full(&shape, g.item() / n)]),
        )
    }

    /// Row means of a rank-2 tensor: (r×c) -> (r).
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(MctError::shape(format!(
                "mean_rows expects rank-2 tensor, got {:?}",
                xv.shape()
            )));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let xd = xv.data();
        let out = Tensor::new(
            vec![m],
            (0..m)
                .map(|i| xd[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                .collect(),
        )?;
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let v = gd[i] / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = v;
                    }
                }
                vec![Tensor::new(vec![m, n], dx).expect("checked")]
            }),
        ))
    }

    // ---- structured ops -------------------------------------------------

    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let out = tensor::conv2d(&xv, &wv, &self.value(b))?;
        Ok(self.push_op(
            out,
            vec![x, w, b],
            Box::new(move |g| {
                let (d, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oc, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let pad = kh / 2;
                let xd = xv.data();
                let wdat = wv.data();
                let gd = g.data();
                let mut dx = vec![0.0; d * h * wd];
                let mut dw = vec![0.0; oc * d * kh * kw];
                let mut db = vec![0.0; oc];
                for o in 0..oc {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let go = gd[(o * h + oy) * wd + ox];
                            db[o] += go;
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
                                        let xi = (c * h + iy as usize) * wd + ix as usize;
                                        let wi = ((o * d + c) * kh + ky) * kw + kx;
                                        dx[xi] += go * wdat[wi];
                                        dw[wi] += go * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(xv.shape().to_vec(), dx).expect("checked"),
                    Tensor::new(wv.shape().to_vec(), dw).expect("checked"),
                    Tensor::new(vec![oc], db).expect("checked"),
                ]
            }),
        ))
    }

    /// Global weighted rank pooling over columns: p (m×c) -> (c).
    /// Per column, values are ranked descending (ties: lower row index first)
    /// and combined with geometric weights lambda^(j-1)/S(lambda), 0^0 = 1 so
    /// lambda = 0 is column max and lambda = 1 the column mean. The backward
    /// pass routes each rank weight to the position frozen at forward time.
    pub fn gwrp_cols(&self, p: Var, lambda: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MctError::config(format!(
                "gwrp lambda must lie in [0,1], got {lambda}"
            )));
        }
        let pv = self.value(p);
        if pv.rank() != 2 {
            return Err(MctError::shape(format!(
                "gwrp_cols expects rank-2 tensor, got {:?}",
                pv.shape()
            )));
        }
        let (m, c) = (pv.rows(), pv.cols());
        let ranking = tensor::rank_columns_desc(&pv);
        let weights = tensor::gwrp_weights(m, lambda);
        let pd = pv.data();
        let mut out = vec![0.0; c];
        for col in 0..c {
            let mut acc = 0.0;
            for (j, &row) in ranking[col].iter().enumerate() {
                acc += weights[j] * pd[row * c + col];
            }
            out[col] = acc;
        }
        Ok(self.push_op(
            Tensor::new(vec![c], out)?,
            vec![p],
            Box::new(move |g| {
                let gd = g.data();
                let mut dp = vec![0.0; m * c];
                for col in 0..c {
                    for (j, &row) in ranking[col].iter().enumerate() {
                        dp[row * c + col] = weights[j] * gd[col];
                    }
                }
                vec![Tensor::new(vec![m, c], dp).expect("checked")]
            }),
        ))
    }

    /// Multi-label soft margin loss of logits (C) against a fixed multi-hot
    /// target: -(1/C) sum_i [y_i log s_i + (1-y_i) log(1-s_i)] with the
    /// sigmoid clamped into [1e-12, 1-1e-12] before the logs.
    pub fn mlsm_loss(&self, logits: Var, labels: &Tensor) -> Result<Var> {
        const LO: f64 = 1e-12;
        const HI: f64 = 1.0 - 1e-12;
        let xv = self.value(logits);
        if xv.rank() != 1 || labels.rank() != 1 || xv.len() != labels.len() {
            return Err(MctError::shape(format!(
                "mlsm_loss logits {:?} vs labels {:?}",
                xv.shape(),
                labels.shape()
            )));
        }
        for &y in labels.data() {
            if y != 0.0 && y != 1.0 {
                return Err(MctError::config(format!(
                    "mlsm labels must be multi-hot 0/1, got {y}"
                )));
            }
        }
        let c = xv.len();
        let yv = labels.clone();
        let mut loss = 0.0;
        for i in 0..c {
            let s = tensor::sigmoid(xv.data()[i]).clamp(LO, HI);
            let y = yv.data()[i];
            loss -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
        }
        loss /= c as f64;
        Ok(self.push_op(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g| {
                let go = g.item();
                let mut dx = vec![0.0; c];
                for i in 0..c {
                    let s = tensor::sigmoid(xv.data()[i]);
                    // clamped region contributes a constant to the loss
                    if s > LO && s < HI {
                        dx[i] = go * (s - yv.data()[i]) / c as f64;
                    }
                }
                vec![Tensor::new(vec![c], dx).expect("checked")]
            }),
        ))
    }

    /// Row-wise softmax cross-entropy of a square score matrix against the
    /// identity target (row i's positive class is column i), averaged over
    /// rows: (1/C) sum_i [logsumexp(S_i) - S_ii].
    pub fn softmax_ce_identity(&self, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.rank() != 2 || sv.rows() != sv.cols() {
            return Err(MctError::shape(format!(
                "softmax_ce_identity expects a square matrix, got {:?}",
                sv.shape()
            )));
        }
        let c = sv.rows();
        let sd = sv.data();
        let mut loss = 0.0;
        for i in 0..c {
            let row = &sd[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[i];
        }
        loss /= c as f64;
        let soft = tensor::softmax_rows(&sv)?;
        Ok(self.push_op(
            Tensor::scalar(loss),
            vec![s],
            Box::new(move |g| {
                let go = g.item();
                let pd = soft.data();
                let mut ds = vec![0.0; c * c];
                for i in 0..c {
                    for j in 0..c {
                        let target = if i == j { 1.0 } else { 0.0 };
                        ds[i * c + j] = go * (pd[i * c + j] - target) / c as f64;
                    }
                }
                vec![Tensor::new(vec![c, c], ds).expect("checked")]
            }),
        ))
    }
}
