//! The multi-class-token transformer encoder: patch embedding, C learnable
//! class tokens, learned positional embeddings, and L pre-norm encoder
//! layers whose per-head attention maps are captured at every layer.
//!
//! Token layout contract: indices [0, C) are class tokens, [C, C+M) are
//! patch tokens in row-major grid order. Nothing in the residual stream
//! permutes tokens, so the layout holds at every layer boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{MctError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Per-layer, per-head token-to-token attention maps, each (C+M)x(C+M),
/// captured before attention dropout.
#[derive(Clone)]
pub struct AttentionStack {
    pub maps: Vec<Vec<Tensor>>,
}

impl AttentionStack {
    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn num_heads(&self) -> usize {
        self.maps.first().map_or(0, |l| l.len())
    }
}

/// Final encoder tokens plus the index layout they obey.
pub struct TokenState {
    pub tokens: Tensor,
    pub num_classes: usize,
}

impl TokenState {
    pub fn class_tokens(&self) -> Result<Tensor> {
        crate::tensor::slice_rows(&self.tokens, 0, self.num_classes)
    }

    pub fn patch_tokens(&self) -> Result<Tensor> {
        crate::tensor::slice_rows(&self.tokens, self.num_classes, self.tokens.rows())
    }
}

#[derive(Debug)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    // key projection carries no bias: a shared key offset shifts every
    // attention logit in a row equally, which softmax cancels exactly
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// All trainable tensors of the model (encoder plus CAM head).
#[derive(Debug)]
pub struct Params {
    pub patch_embed_w: Tensor,
    pub patch_embed_b: Tensor,
    pub class_tokens: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        // resample outside two standard deviations
        let z = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        data.push(z * std);
    }
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}

impl Params {
    /// Deterministic initialization: weight matrices and embeddings are
    /// truncated-normal(0, 0.02), LayerNorm gains one, all biases zero.
    /// All C class tokens start from one shared random vector.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Params> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let patch_dim = 3 * cfg.patch_size() * cfg.patch_size();
        let std = 0.02;

        let patch_embed_w = trunc_normal(&mut rng, &[patch_dim, d], std);
        let patch_embed_b = Tensor::zeros(&[d]);
        let shared = trunc_normal(&mut rng, &[d], std);
        let class_tokens = Tensor::from_fn(&[cfg.num_classes, d], |i| shared.data()[i % d]);
        let pos_embed = trunc_normal(&mut rng, &[cfg.seq_len(), d], std);

        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: trunc_normal(&mut rng, &[d, d], std),
                bq: Tensor::zeros(&[d]),
                wk: trunc_normal(&mut rng, &[d, d], std),
                wv: trunc_normal(&mut rng, &[d, d], std),
                bv: Tensor::zeros(&[d]),
                wo: trunc_normal(&mut rng, &[d, d], std),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                mlp_w1: trunc_normal(&mut rng, &[d, cfg.mlp_dim()], std),
                mlp_b1: Tensor::zeros(&[cfg.mlp_dim()]),
                mlp_w2: trunc_normal(&mut rng, &[cfg.mlp_dim(), d], std),
                mlp_b2: Tensor::zeros(&[d]),
            });
        }

        let k = cfg.conv_kernel;
        let conv_w = trunc_normal(&mut rng, &[cfg.num_classes, d, k, k], std);
        let conv_b = Tensor::zeros(&[cfg.num_classes]);

        Ok(Params {
            patch_embed_w,
            patch_embed_b,
            class_tokens,
            pos_embed,
            layers,
            conv_w,
            conv_b,
        })
    }

    /// Tensors with their canonical names, in canonical order. Checkpoint
    /// layout and optimizer state both follow this order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch_embed_w".to_string(), self.patch_embed_w.clone()),
            ("patch_embed_b".to_string(), self.patch_embed_b.clone()),
            ("class_tokens".to_string(), self.class_tokens.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let mut push = |suffix: &str, t: &Tensor| {
                out.push((format!("layer{i:02}_{suffix}"), t.clone()));
            };
            push("ln1_gain", &l.ln1_gain);
            push("ln1_bias", &l.ln1_bias);
            push("wq", &l.wq);
            push("bq", &l.bq);
            push("wk", &l.wk);
            push("wv", &l.wv);
            push("bv", &l.bv);
            push("wo", &l.wo);
            push("bo", &l.bo);
            push("ln2_gain", &l.ln2_gain);
            push("ln2_bias", &l.ln2_bias);
            push("mlp_w1", &l.mlp_w1);
            push("mlp_b1", &l.mlp_b1);
            push("mlp_w2", &l.mlp_w2);
            push("mlp_b2", &l.mlp_b2);
        }
        out.push(("conv_w".to_string(), self.conv_w.clone()));
        out.push(("conv_b".to_string(), self.conv_b.clone()));
        out
    }

    /// Visits tensors mutably in the same order as [`Params::named`].
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        let mut idx = 0;
        let mut visit = |t: &mut Tensor| {
            f(idx, t);
            idx += 1;
        };
        visit(&mut self.patch_embed_w);
        visit(&mut self.patch_embed_b);
        visit(&mut self.class_tokens);
        visit(&mut self.pos_embed);
        for l in self.layers.iter_mut() {
            visit(&mut l.ln1_gain);
            visit(&mut l.ln1_bias);
            visit(&mut l.wq);
            visit(&mut l.bq);
            visit(&mut l.wk);
            visit(&mut l.wv);
            visit(&mut l.bv);
            visit(&mut l.wo);
            visit(&mut l.bo);
            visit(&mut l.ln2_gain);
            visit(&mut l.ln2_bias);
            visit(&mut l.mlp_w1);
            visit(&mut l.mlp_b1);
            visit(&mut l.mlp_w2);
            visit(&mut l.mlp_b2);
        }
        visit(&mut self.conv_w);
        visit(&mut self.conv_b);
    }

    /// Rebuilds a Params from tensors in canonical order (shapes trusted to
    /// the caller; use after gradcheck perturbation or checkpoint load).
    pub fn from_ordered(cfg: &ModelConfig, tensors: &[Tensor]) -> Result<Params> {
        let expect = 4 + cfg.layers * 15 + 2;
        if tensors.len() != expect {
            return Err(MctError::format(format!(
                "expected {expect} parameter tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.iter().cloned();
        let mut next = || it.next().expect("length checked");
        let patch_embed_w = next();
        let patch_embed_b = next();
        let class_tokens = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                mlp_w1: next(),
                mlp_b1: next(),
                mlp_w2: next(),
                mlp_b2: next(),
            });
        }
        let conv_w = next();
        let conv_b = next();
        Ok(Params {
            patch_embed_w,
            patch_embed_b,
            class_tokens,
            pos_embed,
            layers,
            conv_w,
            conv_b,
        })
    }
}

/// Leaf [`Var`]s for all parameters on one graph, in canonical order.
pub struct GraphParams {
    pub vars: Vec<Var>,
    pub layers: usize,
}

impl GraphParams {
    pub fn from_params(g: &Graph, params: &Params) -> GraphParams {
        let vars = params.named().into_iter().map(|(_, t)| g.leaf(t)).collect();
        GraphParams {
            vars,
            layers: params.layers.len(),
        }
    }

    pub fn from_ordered_vars(cfg: &ModelConfig, vars: &[Var]) -> Result<GraphParams> {
        let expect = 4 + cfg.layers * 15 + 2;
        if vars.len() != expect {
            return Err(MctError::format(format!(
                "expected {expect} parameter vars, got {}",
                vars.len()
            )));
        }
        Ok(GraphParams {
            vars: vars.to_vec(),
            layers: cfg.layers,
        })
    }

    pub fn patch_embed_w(&self) -> Var {
        self.vars[0]
    }
    pub fn patch_embed_b(&self) -> Var {
        self.vars[1]
    }
    pub fn class_tokens(&self) -> Var {
        self.vars[2]
    }
    pub fn pos_embed(&self) -> Var {
        self.vars[3]
    }
    fn layer_base(&self, l: usize) -> usize {
        4 + l * 15
    }
    pub fn layer(&self, l: usize, field: usize) -> Var {
        self.vars[self.layer_base(l) + field]
    }
    pub fn conv_w(&self) -> Var {
        self.vars[4 + self.layers * 15]
    }
    pub fn conv_b(&self) -> Var {
        self.vars[4 + self.layers * 15 + 1]
    }
}

// field offsets within a layer's 16 tensors
const LN1_GAIN: usize = 0;
const LN1_BIAS: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const WV: usize = 5;
const BV: usize = 6;
const WO: usize = 7;
const BO: usize = 8;
const LN2_GAIN: usize = 9;
const LN2_BIAS: usize = 10;
const MLP_W1: usize = 11;
const MLP_B1: usize = 12;
const MLP_W2: usize = 13;
const MLP_B2: usize = 14;

/// Rearranges an image (3 x S x S) into per-patch rows (M x 3*p*p).
/// Patch i covers grid cell (i / N, i % N); within a patch the pixels are
/// flattened channel-major, then row-major.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape() != [3, s, s] {
        return Err(MctError::config(format!(
            "image shape {:?} does not match configured 3x{s}x{s}",
            image.shape()
        )));
    }
    let p = cfg.patch_size();
    let n = cfg.grid;
    let data = image.data();
    let mut out = Vec::with_capacity(n * n * 3 * p * p);
    for gy in 0..n {
        for gx in 0..n {
            for c in 0..3 {
                for py in 0..p {
                    let y = gy * p + py;
                    let row = &data[(c * s + y) * s + gx * p..(c * s + y) * s + gx * p + p];
                    out.extend_from_slice(row);
                }
            }
        }
    }
    Tensor::new(vec![n * n, 3 * p * p], out)
}

/// Linear patch embedding: M tokens of width D.
pub fn embed_patches(g: &Graph, image: &Tensor, cfg: &ModelConfig, w: Var, b: Var) -> Result<Var> {
    let x = g.constant(patchify(image, cfg)?);
    let proj = g.matmul(x, w)?;
    g.add_row_bias(proj, b)
}

pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

pub struct Forward {
    /// Tokens right after class-token concatenation and positional add.
    pub tokens_in: Var,
    /// Final tokens, (C+M) x D.
    pub tokens_out: Var,
    /// Output class tokens (C x D) of every layer, in layer order.
    pub class_tokens_per_layer: Vec<Var>,
    pub attention: AttentionStack,
}

/// Full encoder pass. Captures every layer's per-head attention map and the
/// output class tokens of every layer.
pub fn forward(
    g: &Graph,
    p: &GraphParams,
    image: &Tensor,
    cfg: &ModelConfig,
    mode: &Mode,
) -> Result<Forward> {
    cfg.validate()?;
    let c = cfg.num_classes;
    let t = cfg.seq_len();
    let dh = cfg.head_dim();
    let scale_dim = if cfg.scale_full_dim {
        cfg.embed_dim as f64
    } else {
        dh as f64
    };
    let scale = 1.0 / scale_dim.sqrt();

    let patches = embed_patches(g, image, cfg, p.patch_embed_w(), p.patch_embed_b())?;
    let seq = g.concat_rows(&[p.class_tokens(), patches])?;
    let tokens_in = g.add(seq, p.pos_embed())?;

    let mut dropout_rng = match mode {
        Mode::Train { dropout_seed } if cfg.attn_dropout > 0.0 => {
            Some(ChaCha8Rng::seed_from_u64(*dropout_seed))
        }
        _ => None,
    };

    let mut x = tokens_in;
    let mut stack = Vec::with_capacity(cfg.layers);
    let mut class_tokens_per_layer = Vec::with_capacity(cfg.layers);

    for l in 0..cfg.layers {
        let h = g.layer_norm(x, p.layer(l, LN1_GAIN), p.layer(l, LN1_BIAS), LN_EPS)?;
        let q = g.add_row_bias(g.matmul(h, p.layer(l, WQ))?, p.layer(l, BQ))?;
        let k = g.matmul(h, p.layer(l, WK))?;
        let v = g.add_row_bias(g.matmul(h, p.layer(l, WV))?, p.layer(l, BV))?;

        let mut head_outs = Vec::with_capacity(cfg.heads);
        let mut head_maps = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let (lo, hi) = (hh * dh, (hh + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let logits = g.scale(g.matmul(qh, kt)?, scale);
            let attn = g.softmax_rows(logits)?;
            head_maps.push(g.value(attn));
            let attn_used = match dropout_rng.as_mut() {
                Some(rng) => {
                    let keep = 1.0 - cfg.attn_dropout;
                    let mask = Tensor::from_fn(&[t, t], |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    g.mul(attn, g.constant(mask))?
                }
                None => attn,
            };
            head_outs.push(g.matmul(attn_used, vh)?);
        }
        stack.push(head_maps);

        let merged = g.concat_cols(&head_outs)?;
        let proj = g.add_row_bias(g.matmul(merged, p.layer(l, WO))?, p.layer(l, BO))?;
        x = g.add(x, proj)?;

        let h2 = g.layer_norm(x, p.layer(l, LN2_GAIN), p.layer(l, LN2_BIAS), LN_EPS)?;
        let m1 = g.add_row_bias(g.matmul(h2, p.layer(l, MLP_W1))?, p.layer(l, MLP_B1))?;
        let act = g.gelu(m1);
        let m2 = g.add_row_bias(g.matmul(act, p.layer(l, MLP_W2))?, p.layer(l, MLP_B2))?;
        x = g.add(x, m2)?;

        if !g.value(x).all_finite() {
            return Err(MctError::numerical(format!(
                "non-finite activation after encoder layer {l}"
            )));
        }
        class_tokens_per_layer.push(g.slice_rows(x, 0, c)?);
    }

    Ok(Forward {
        tokens_in,
        tokens_out: x,
        class_tokens_per_layer,
        attention: AttentionStack { maps: stack },
    })
}

/// Plain-tensor convenience: runs the encoder and returns detached outputs.
pub fn forward_eval(params: &Params, image: &Tensor, cfg: &ModelConfig) -> Result<(TokenState, AttentionStack)> {
    let g = Graph::new();
    let gp = GraphParams::from_params(&g, params);
    let fwd = forward(&g, &gp, image, cfg, &Mode::Eval)?;
    Ok((
        TokenState {
            tokens: g.value(fwd.tokens_out),
            num_classes: cfg.num_classes,
        },
        fwd.attention,
    ))
}
