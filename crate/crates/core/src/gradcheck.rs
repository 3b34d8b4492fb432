//! Central finite-difference validation of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MctError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default step for 64-bit central differences.
pub const DEFAULT_H: f64 = 1e-5;

/// Relative-error tolerance for gradient checks in 64-bit mode.
pub const GRAD_TOL: f64 = 1e-4;

/// Resolution floor of the central-difference estimate itself: with a loss
/// of order one and f64 rounding, (f(x+h)-f(x-h))/2h carries absolute noise
/// well below this bound. Analytic/numeric differences under the floor are
/// beneath what the method can measure and do not count as mismatches.
pub const FD_ABS_FLOOR: f64 = 1e-9;

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// "tensor_name[flat_index]" of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
}

/// Checks the analytic gradient of a scalar-valued computation against
/// central differences, coordinate by coordinate.
///
/// `build` must construct the loss from leaf vars handed over in the same
/// order as `params`. `sample_per_tensor` limits how many coordinates of
/// each tensor are probed (None = all); the selection is deterministic for
/// a fixed `seed`. The relative error uses max(|analytic|, |numeric|, 1e-8)
/// as denominator; the maximum over all probed coordinates is returned.
pub fn check_gradients<F>(
    build: F,
    params: &[(String, Tensor)],
    h: f64,
    sample_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &vars)?;
        let v = g.value(loss);
        if v.len() != 1 {
            return Err(MctError::shape(format!(
                "gradcheck target must be scalar, got {:?}",
                v.shape()
            )));
        }
        if !v.all_finite() {
            return Err(MctError::numerical(
                "non-finite loss during gradient check".to_string(),
            ));
        }
        Ok(v.item())
    };

    // Analytic pass.
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let g = Graph::new();
    let vars: Vec<Var> = base.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&g, &vars)?;
    if !g.value(loss).all_finite() {
        return Err(MctError::numerical(
            "non-finite loss during gradient check".to_string(),
        ));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = params
        .iter()
        .zip(&vars)
        .map(|((_, t), &v)| grads.wrt_or_zeros(v, t.shape()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let len = tensor.len();
        let coords: Vec<usize> = match sample_per_tensor {
            Some(k) if k < len => rand::seq::index::sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for ci in coords {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut dp = tensor.data().to_vec();
            let mut dm = dp.clone();
            dp[ci] += h;
            dm[ci] -= h;
            plus[pi] = Tensor::new(tensor.shape().to_vec(), dp)?;
            minus[pi] = Tensor::new(tensor.shape().to_vec(), dm)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            checked += 1;
            if (a - numeric).abs() < FD_ABS_FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{ci}]");
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        coords_checked: checked,
    })
}

/// Deterministic random multi-hot labels with at least one positive.
fn random_labels(c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let data: Vec<f64> = (0..c)
            .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        if data.iter().any(|&v| v == 1.0) {
            return Tensor::new(vec![c], data).expect("shape matches");
        }
    }
}

/// Gradient check of the full training loss (both classification terms and
/// the contrastive regularizer) on a random image and random multi-hot
/// labels derived from `seed`.
pub fn full_loss_check(
    cfg: &crate::config::ModelConfig,
    seed: u64,
    sample_per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let params = crate::encoder::Params::init(cfg, seed)?;
    let mut img_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let s = cfg.image_size;
    let image = Tensor::from_fn(&[3, s, s], |_| img_rng.random::<f64>());
    let labels = random_labels(cfg.num_classes, seed.wrapping_add(2));
    let cfg = cfg.clone();
    check_gradients(
        move |g, vars| {
            let gp = crate::encoder::GraphParams::from_ordered_vars(&cfg, vars)?;
            let fwd = crate::encoder::forward(g, &gp, &image, &cfg, &crate::encoder::Mode::Eval)?;
            let losses = crate::heads::total_loss(g, &fwd, &gp, &labels, &cfg)?;
            Ok(losses.total)
        },
        &params.named(),
        DEFAULT_H,
        sample_per_tensor,
        seed.wrapping_add(3),
    )
}

/// Exhaustive small-tensor checks, one per differentiable primitive.
pub fn op_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize], scale: f64| {
        Tensor::from_fn(shape, |_| (rng.random::<f64>() - 0.5) * 2.0 * scale)
    };
    let mut out = Vec::new();
    let mut run = |name: &str,
                   params: Vec<(String, Tensor)>,
                   f: Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>|
     -> Result<()> {
        let report = check_gradients(|g, vars| f(g, vars), &params, DEFAULT_H, None, seed)?;
        out.push((name.to_string(), report));
        Ok(())
    };

    run(
        "matmul",
        vec![
            ("a".into(), rand_t(&[3, 4], 1.0)),
            ("b".into(), rand_t(&[4, 2], 1.0)),
        ],
        Box::new(|g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum_all(c))
        }),
    )?;
    run(
        "softmax_rows",
        vec![("x".into(), rand_t(&[3, 5], 2.0))],
        Box::new(|g, v| {
            let s = g.softmax_rows(v[0])?;
            let w = g.mul(s, v[0])?; // weight so the gradient is nontrivial
            Ok(g.sum_all(w))
        }),
    )?;
    run(
        "layer_norm",
        vec![
            ("x".into(), rand_t(&[4, 6], 1.5)),
            ("gain".into(), rand_t(&[6], 1.0)),
            ("bias".into(), rand_t(&[6], 0.5)),
        ],
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        }),
    )?;
    run(
        "gelu",
        vec![("x".into(), rand_t(&[10], 2.0))],
        Box::new(|g, v| {
            let y = g.gelu(v[0]);
            Ok(g.sum_all(y))
        }),
    )?;
    run(
        "sigmoid",
        vec![("x".into(), rand_t(&[10], 3.0))],
        Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }),
    )?;
    run(
        "conv2d",
        vec![
            ("x".into(), rand_t(&[2, 4, 4], 1.0)),
            ("w".into(), rand_t(&[3, 2, 3, 3], 0.5)),
            ("b".into(), rand_t(&[3], 0.5)),
        ],
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            let sq = g.mul(y, y)?;
            Ok(g.mean_all(sq))
        }),
    )?;
    run(
        "gwrp",
        vec![("p".into(), rand_t(&[8, 3], 1.0))],
        Box::new(|g, v| {
            let y = g.gwrp_cols(v[0], 0.9)?;
            Ok(g.sum_all(y))
        }),
    )?;
    let labels = random_labels(6, seed.wrapping_add(11));
    run(
        "mlsm_loss",
        vec![("logits".into(), rand_t(&[6], 2.0))],
        Box::new(move |g, v| g.mlsm_loss(v[0], &labels)),
    )?;
    run(
        "softmax_ce_identity",
        vec![("s".into(), rand_t(&[4, 4], 2.0))],
        Box::new(|g, v| g.softmax_ce_identity(v[0])),
    )?;
    run(
        "mean_rows",
        vec![("x".into(), rand_t(&[3, 7], 1.0))],
        Box::new(|g, v| {
            let y = g.mean_rows(v[0])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        }),
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 1.0);
        let report = check_gradients(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                Ok(g.sum_all(sq))
            },
            &[("x".to_string(), x)],
            DEFAULT_H,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 6);
    }

    #[test]
    fn mlsm_loss_gradient_matches_finite_differences() {
        let logits = Tensor::from_fn(&[5], |i| (i as f64 * 1.3).sin() * 2.0);
        let labels = Tensor::from_fn(&[5], |i| (i % 2) as f64);
        let report = check_gradients(
            |g, vars| g.mlsm_loss(vars[0], &labels),
            &[("logits".to_string(), logits)],
            DEFAULT_H,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < GRAD_TOL, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_ops_gradient_matches_finite_differences() {
        // touches matmul, bias, layer_norm, softmax, gelu, gwrp, ce-identity
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let w = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.9).sin() * 0.5);
        let gain = Tensor::from_fn(&[4], |i| 1.0 + 0.1 * i as f64);
        let bias = Tensor::from_fn(&[4], |i| 0.05 * i as f64);
        let params = vec![
            ("x".to_string(), x),
            ("w".to_string(), w),
            ("gain".to_string(), gain),
            ("bias".to_string(), bias),
        ];
        let report = check_gradients(
            |g, vars| {
                let ln = g.layer_norm(vars[0], vars[2], vars[3], 1e-6)?;
                let act = g.gelu(ln);
                let y = g.matmul(act, vars[1])?; // 3x3
                let sm = g.softmax_rows(y)?;
                let ce = g.softmax_ce_identity(y)?;
                let pooled = g.gwrp_cols(sm, 0.6)?; // 3 cols
                let p = g.sum_all(pooled);
                let both = g.add(ce, p)?;
                Ok(g.mean_all(both))
            },
            &params,
            DEFAULT_H,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < GRAD_TOL, "worst {} rel {}", report.worst, report.max_rel_err);
    }

    #[test]
    fn non_finite_loss_is_reported_as_numerical_error() {
        let x = Tensor::scalar(0.0);
        let err = check_gradients(
            |g, vars| {
                let inv = g.value(vars[0]).map(|v| 1.0 / v); // inf at 0
                Ok(g.leaf(inv))
            },
            &[("x".to_string(), x)],
            DEFAULT_H,
            None,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, MctError::Numerical(_)));
    }
}
