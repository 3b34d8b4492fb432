//! Classification heads and training losses: class-token pooling, the
//! patch-token CAM head with GAP/GMP/GWRP pooling, the contrastive
//! class-token regularizer, and the composed total loss.

use crate::config::{ModelConfig, Pooling};
use crate::encoder::{Forward, GraphParams};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Class scores from the output class tokens: y[c] = mean_j T_cls[c, j].
pub fn class_token_scores(g: &Graph, class_tokens: Var) -> Result<Var> {
    g.mean_rows(class_tokens)
}

/// Effective GWRP decay for a pooling mode. GAP and GMP are the lambda = 1
/// and lambda = 0 special cases of the same ranking-pool code path, so the
/// reduction identities hold bit-for-bit.
pub fn pooling_lambda(cfg: &ModelConfig) -> f64 {
    match cfg.pooling {
        Pooling::Gap => 1.0,
        Pooling::Gmp => 0.0,
        Pooling::Gwrp => cfg.gwrp_lambda,
    }
}

/// CAM head: patch tokens (M x D) -> conv feature maps F (C x N x N).
pub fn cam_feature(g: &Graph, patch_tokens: Var, p: &GraphParams, cfg: &ModelConfig) -> Result<Var> {
    let n = cfg.grid;
    let d = cfg.embed_dim;
    let grid = g.transpose(patch_tokens)?; // D x M
    let spatial = g.reshape(grid, &[d, n, n])?;
    g.conv2d(spatial, p.conv_w(), p.conv_b())
}

/// Pools feature maps F (C x N x N) into class scores with the configured
/// pooling: F is vectorized channel-wise to (M x C) and rank-pooled per column.
pub fn pooled_scores(g: &Graph, f: Var, cfg: &ModelConfig) -> Result<Var> {
    let c = cfg.num_classes;
    let m = cfg.num_patches();
    let flat = g.reshape(f, &[c, m])?;
    let p = g.transpose(flat)?; // M x C
    g.gwrp_cols(p, pooling_lambda(cfg))
}

/// CAM head end to end: (F, y_patch).
pub fn cam_head(g: &Graph, patch_tokens: Var, p: &GraphParams, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let f = cam_feature(g, patch_tokens, p, cfg)?;
    let y = pooled_scores(g, f, cfg)?;
    Ok((f, y))
}

/// Contrastive class-token regularizer over the output class tokens of the
/// top `depth` layers: per layer, S = T T^t (C x C) gets a row-wise softmax
/// cross-entropy against the identity target; terms are averaged over the
/// applied layers. depth = 0 yields a constant zero.
pub fn cct_loss(g: &Graph, class_tokens_per_layer: &[Var], depth: usize) -> Result<Var> {
    let l = class_tokens_per_layer.len();
    let depth = depth.min(l);
    if depth == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for &tokens in &class_tokens_per_layer[l - depth..] {
        let tt = g.transpose(tokens)?;
        let s = g.matmul(tokens, tt)?;
        let term = g.softmax_ce_identity(s)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.scale(acc.expect("depth > 0"), 1.0 / depth as f64))
}

/// The individual loss terms and their weighted sum.
pub struct LossVars {
    pub total: Var,
    pub cls_class: Var,
    pub cls_patch: Var,
    pub cct: Var,
}

/// total = alpha * mlsm(y_cls) + beta * mlsm(y_patch) + gamma * cct.
pub fn total_loss(
    g: &Graph,
    fwd: &Forward,
    p: &GraphParams,
    labels: &Tensor,
    cfg: &ModelConfig,
) -> Result<LossVars> {
    let c = cfg.num_classes;
    let cls_tokens = g.slice_rows(fwd.tokens_out, 0, c)?;
    let patch_tokens = g.slice_rows(fwd.tokens_out, c, cfg.seq_len())?;

    let y_cls = class_token_scores(g, cls_tokens)?;
    let cls_class = g.mlsm_loss(y_cls, labels)?;

    let (_, y_patch) = cam_head(g, patch_tokens, p, cfg)?;
    let cls_patch = g.mlsm_loss(y_patch, labels)?;

    let cct = cct_loss(g, &fwd.class_tokens_per_layer, cfg.cct_depth)?;

    let a = g.scale(cls_class, cfg.alpha);
    let b = g.scale(cls_patch, cfg.beta);
    let ab = g.add(a, b)?;
    let gterm = g.scale(cct, cfg.gamma);
    let total = g.add(ab, gterm)?;

    Ok(LossVars {
        total,
        cls_class,
        cls_patch,
        cct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{forward, Mode, Params};

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default();
        cfg.num_classes = 3;
        cfg.grid = 2;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.layers = 2;
        cfg.image_size = 8;
        cfg.cct_depth = 2;
        cfg.fuse_layers = 2;
        cfg
    }

    #[test]
    fn class_token_scores_cases() {
        let g = Graph::new();
        // constant row value v -> score v
        let t = g.leaf(Tensor::full(&[3, 4], 2.5));
        let y = class_token_scores(&g, t).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 2.5, 2.5]);

        // hand mean oracle: [[1,3],[2,6]] -> [2,4]
        let t = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 6.0]).unwrap());
        let y = class_token_scores(&g, t).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0]);
        assert_eq!(g.value(y).shape(), &[2]);
    }

    #[test]
    fn cam_head_zero_weights_score_equals_bias_under_any_pooling() {
        let mut cfg = tiny_cfg();
        let image = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.1).sin() * 0.5 + 0.5);
        for pooling in [Pooling::Gap, Pooling::Gmp, Pooling::Gwrp] {
            cfg.pooling = pooling;
            let mut params = Params::init(&cfg, 3).unwrap();
            params.conv_w = Tensor::zeros(params.conv_w.shape());
            params.conv_b = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
            let g = Graph::new();
            let gp = GraphParams::from_params(&g, &params);
            let fwd = forward(&g, &gp, &image, &cfg, &Mode::Eval).unwrap();
            let patch_tokens = g.slice_rows(fwd.tokens_out, cfg.num_classes, cfg.seq_len()).unwrap();
            let (f, y) = cam_head(&g, patch_tokens, &gp, &cfg).unwrap();
            assert_eq!(g.value(f).shape(), &[3, 2, 2]);
            let yv = g.value(y);
            for (got, want) in yv.data().iter().zip(params.conv_b.data()) {
                assert!((got - want).abs() < 1e-12, "{pooling}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn gwrp_lambda_one_equals_gap_bit_for_bit() {
        let cfg = tiny_cfg();
        let params = Params::init(&cfg, 17).unwrap();
        let image = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.31).cos() * 0.5 + 0.5);

        let run = |pooling: Pooling, lambda: f64| {
            let mut cfg = cfg.clone();
            cfg.pooling = pooling;
            cfg.gwrp_lambda = lambda;
            let g = Graph::new();
            let gp = GraphParams::from_params(&g, &params);
            let fwd = forward(&g, &gp, &image, &cfg, &Mode::Eval).unwrap();
            let patch_tokens = g.slice_rows(fwd.tokens_out, cfg.num_classes, cfg.seq_len()).unwrap();
            let (_, y) = cam_head(&g, patch_tokens, &gp, &cfg).unwrap();
            g.value(y).data().to_vec()
        };

        assert_eq!(run(Pooling::Gwrp, 1.0), run(Pooling::Gap, 0.5));
        assert_eq!(run(Pooling::Gwrp, 0.0), run(Pooling::Gmp, 0.5));
    }

    #[test]
    fn cct_loss_anchors() {
        let g = Graph::new();
        let c = 4;
        // identical class tokens at every layer -> ln C exactly
        let t = g.leaf(Tensor::from_fn(&[c, 6], |i| ((i % 6) as f64 * 0.3).sin()));
        let same = Tensor::from_fn(&[c, 6], |i| ((i % 6) as f64 * 0.3).sin());
        let t2 = g.leaf(same);
        let loss = cct_loss(&g, &[t, t2], 2).unwrap();
        assert!((g.value(loss).item() - (c as f64).ln()).abs() < 1e-9);

        // scaled orthonormal rows: S = 100 I -> loss < 1e-6
        let g = Graph::new();
        let orth = Tensor::from_fn(&[c, 8], |i| if i / 8 == i % 8 { 10.0 } else { 0.0 });
        let t = g.leaf(orth);
        let loss = cct_loss(&g, &[t], 1).unwrap();
        assert!(g.value(loss).item() < 1e-6);
    }

    #[test]
    fn cct_loss_invariant_under_simultaneous_permutation() {
        let g = Graph::new();
        let c = 4;
        let d = 5;
        let base = Tensor::from_fn(&[c, d], |i| ((i * 7 % 11) as f64 - 5.0) * 0.4);
        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_fn(&[c, d], |i| {
            let (r, col) = (i / d, i % d);
            base.data()[perm[r] * d + col]
        });
        let l1 = cct_loss(&g, &[g.leaf(base)], 1).unwrap();
        let l2 = cct_loss(&g, &[g.leaf(permuted)], 1).unwrap();
        // permuting rows permutes S rows and columns together; the diagonal
        // set is preserved, so the loss is unchanged up to summation order
        assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-12);
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_nonnegative_diagonal() {
        let g = Graph::new();
        let t = g.leaf(Tensor::from_fn(&[4, 6], |i| ((i as f64) * 0.77).sin()));
        let tt = g.transpose(t).unwrap();
        let s = g.matmul(t, tt).unwrap();
        let sv = g.value(s);
        for i in 0..4 {
            assert!(sv.at2(i, i) >= 0.0);
            for j in 0..4 {
                assert!((sv.at2(i, j) - sv.at2(j, i)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_weights() {
        let cfg = tiny_cfg();
        let params = Params::init(&cfg, 23).unwrap();
        let image = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.17).sin() * 0.5 + 0.5);
        let labels = Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap();

        let eval = |alpha: f64, beta: f64, gamma: f64| {
            let mut cfg = cfg.clone();
            cfg.alpha = alpha;
            cfg.beta = beta;
            cfg.gamma = gamma;
            let g = Graph::new();
            let gp = GraphParams::from_params(&g, &params);
            let fwd = forward(&g, &gp, &image, &cfg, &Mode::Eval).unwrap();
            let losses = total_loss(&g, &fwd, &gp, &labels, &cfg).unwrap();
            (
                g.value(losses.total).item(),
                g.value(losses.cls_class).item(),
                g.value(losses.cls_patch).item(),
                g.value(losses.cct).item(),
            )
        };

        // all weights zero -> 0
        let (t0, ..) = eval(0.0, 0.0, 0.0);
        assert_eq!(t0, 0.0);

        // gamma = 0 reproduces the two-term classification loss exactly
        let (t, a, b, _) = eval(1.0, 1.0, 0.0);
        assert!((t - (a + b)).abs() < 1e-15);

        // doubling gamma doubles the cct contribution
        let (t1, a1, b1, c1) = eval(1.0, 1.0, 1.0);
        let (t2, a2, b2, c2) = eval(1.0, 1.0, 2.0);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(c1, c2);
        assert!(((t2 - (a2 + b2)) - 2.0 * (t1 - (a1 + b1))).abs() < 1e-12);
        let _ = c1;
    }

    #[test]
    fn total_loss_is_nonnegative_and_cct_depth_zero_matches_gamma_zero() {
        let mut cfg = tiny_cfg();
        let params = Params::init(&cfg, 29).unwrap();
        let image = Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.41).cos() * 0.5 + 0.5);
        let labels = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();

        let run = |cfg: &ModelConfig| {
            let g = Graph::new();
            let gp = GraphParams::from_params(&g, &params);
            let fwd = forward(&g, &gp, &image, cfg, &Mode::Eval).unwrap();
            let losses = total_loss(&g, &fwd, &gp, &labels, cfg).unwrap();
            g.value(losses.total).item()
        };

        let with_cct = run(&cfg);
        assert!(with_cct >= 0.0);
        cfg.cct_depth = 0;
        let depth0 = run(&cfg);
        cfg.cct_depth = 2;
        cfg.gamma = 0.0;
        let gamma0 = run(&cfg);
        assert!((depth0 - gamma0).abs() < 1e-15);
    }
}
