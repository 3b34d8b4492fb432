//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Training-backed criteria share cached runs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mct_core::config::{ModelConfig, Pooling};
use mct_core::data::{generate, Dataset, DatasetSpec};
use mct_core::encoder::{forward, forward_eval, GraphParams, Mode, Params};
use mct_core::gradcheck::{full_loss_check, op_suite, GRAD_TOL};
use mct_core::graph::Graph;
use mct_core::heads::cct_loss;
use mct_core::maps::{
    refine, slice_class_to_patch, slice_patch_block, LocalizationMaps, MapKind, PatchAffinity,
};
use mct_core::metrics::{sweep_threshold, ConfusionAccum, SweepAccum, SWEEP_POINTS};
use mct_core::pipeline::{evaluate_variants, EvalOptions, SeedVariant};
use mct_core::tensor::Tensor;
use mct_core::train::{train, TrainConfig, TrainResult};
use mct_cli::{run_eval, run_gen, run_maps, run_train, EvalArgs, GenArgs, MapsArgs, TrainArgs};

/// Default training length for the ordering criteria.
const DEFAULT_EPOCHS: usize = 40;

fn default_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk_default();
    cfg.num_classes = 3; // matches the default dataset
    cfg
}

fn default_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate(&DatasetSpec::default()).expect("default dataset generates"))
}

/// Cache of training runs shared between the ordering criteria.
fn trained(label: &str, cfg: &ModelConfig) -> Arc<TrainResult> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<TrainResult>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    if let Some(hit) = guard.get(label) {
        return Arc::clone(hit);
    }
    let tc = TrainConfig {
        epochs: DEFAULT_EPOCHS,
        seed: 0,
        ..TrainConfig::default()
    };
    let result = Arc::new(train(default_dataset(), cfg, &tc).expect("training run"));
    guard.insert(label.to_string(), Arc::clone(&result));
    result
}

fn seed_miou(result: &TrainResult, cfg: &ModelConfig, variant: SeedVariant) -> f64 {
    let opts = EvalOptions::from_config(cfg);
    evaluate_variants(&result.params, cfg, default_dataset(), &opts, &[variant])
        .expect("evaluation")[0]
        .miou
}

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    for (name, report) in op_suite(0).expect("op suite runs") {
        assert!(
            report.max_rel_err < GRAD_TOL,
            "op {name}: rel err {}",
            report.max_rel_err
        );
    }
    let cfg = ModelConfig::desk_default();
    let report = full_loss_check(&cfg, 0, Some(12)).expect("full-loss gradcheck runs");
    let elapsed = start.elapsed();
    assert!(
        report.max_rel_err < GRAD_TOL,
        "full loss rel err {} at {}",
        report.max_rel_err,
        report.worst
    );
    assert!(
        elapsed.as_secs() < 60,
        "gradient suite took {elapsed:?}, budget is 60 s"
    );
    println!(
        "ACCEPTANCE 01 gradient-suite: PASS (max rel err {:.3e} over {} coords, {:.1?})",
        report.max_rel_err, report.coords_checked, elapsed
    );
}

#[test]
fn c02_attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked_rows = 0usize;
    for trial in 0..200 {
        let mut cfg = ModelConfig::desk_default();
        cfg.num_classes = rng.random_range(2..=5);
        cfg.grid = rng.random_range(2..=4);
        cfg.heads = [1, 2, 4][rng.random_range(0..3)];
        cfg.embed_dim = cfg.heads * rng.random_range(2..=4);
        cfg.layers = rng.random_range(2..=4);
        cfg.fuse_layers = cfg.layers.min(3);
        cfg.cct_depth = cfg.layers;
        cfg.image_size = cfg.grid * 4;
        cfg.mlp_ratio = 2.0;
        let params = Params::init(&cfg, trial).expect("init");
        let image = {
            let s = cfg.image_size;
            let mut r = ChaCha8Rng::seed_from_u64(1000 + trial);
            Tensor::from_fn(&[3, s, s], |_| r.random::<f64>())
        };
        let (_, stack) = forward_eval(&params, &image, &cfg).expect("forward");
        let t = cfg.seq_len();
        assert_eq!(stack.num_layers(), cfg.layers);
        assert_eq!(stack.num_heads(), cfg.heads);
        for layer in &stack.maps {
            for head in layer {
                assert_eq!(head.shape(), &[t, t]);
                for r in 0..t {
                    let row = &head.data()[r * t..(r + 1) * t];
                    let sum: f64 = row.iter().sum();
                    assert!(
                        (sum - 1.0).abs() <= 1e-5,
                        "row sum {sum} off by more than 1e-5"
                    );
                    assert!(row.iter().all(|&v| v >= 0.0));
                    checked_rows += 1;
                }
            }
        }
        // index-marking oracle: slicing must return exactly the marked blocks
        let c = cfg.num_classes;
        let marked = Tensor::from_fn(&[t, t], |i| (i / t) as f64 * 10_000.0 + (i % t) as f64);
        let c2p = slice_class_to_patch(&marked, c).expect("slice");
        for row in 0..c {
            for col in 0..t - c {
                assert_eq!(c2p.at2(row, col), row as f64 * 10_000.0 + (c + col) as f64);
            }
        }
        let p2p = slice_patch_block(&marked, c).expect("slice");
        for row in 0..t - c {
            for col in 0..t - c {
                assert_eq!(
                    p2p.at2(row, col),
                    (c + row) as f64 * 10_000.0 + (c + col) as f64
                );
            }
        }
    }
    println!("ACCEPTANCE 02 attention-invariants: PASS (200 forwards, {checked_rows} rows, slices exact)");
}

#[test]
fn c03_pooling_reductions() {
    // bit-for-bit dispatch identities on a real forward pass
    let cfg = default_model_config();
    let params = Params::init(&cfg, 3).expect("init");
    let image = Tensor::from_fn(&[3, 64, 64], |i| ((i as f64) * 0.0173).sin() * 0.5 + 0.5);
    let pooled = |pooling: Pooling, lambda: f64| -> Vec<f64> {
        let mut cfg = cfg.clone();
        cfg.pooling = pooling;
        cfg.gwrp_lambda = lambda;
        let g = Graph::new();
        let gp = GraphParams::from_params(&g, &params);
        let fwd = forward(&g, &gp, &image, &cfg, &Mode::Eval).expect("forward");
        let patch = g
            .slice_rows(fwd.tokens_out, cfg.num_classes, cfg.seq_len())
            .expect("slice");
        let (_, y) = mct_core::heads::cam_head(&g, patch, &gp, &cfg).expect("cam head");
        g.value(y).data().to_vec()
    };
    let gwrp1 = pooled(Pooling::Gwrp, 1.0);
    let gap = pooled(Pooling::Gap, 0.5);
    assert_eq!(gwrp1, gap, "gwrp(1) != GAP bit-for-bit");
    let gwrp0 = pooled(Pooling::Gwrp, 0.0);
    let gmp = pooled(Pooling::Gmp, 0.5);
    assert_eq!(gwrp0, gmp, "gwrp(0) != GMP bit-for-bit");

    // independent oracles and monotonicity on 1000 random columns
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let lambdas = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.96, 1.0];
    for _ in 0..1000 {
        let m = rng.random_range(2..=24);
        let col: Vec<f64> = (0..m).map(|_| (rng.random::<f64>() - 0.5) * 8.0).collect();
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![m, 1], col.clone()).expect("shape"));
        let mean = col.iter().sum::<f64>() / m as f64;
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let at = |lambda: f64| g.value(g.gwrp_cols(p, lambda).expect("gwrp")).item();
        assert!((at(1.0) - mean).abs() < 1e-12);
        assert_eq!(at(0.0), max);
        let mut prev = f64::INFINITY;
        for &l in &lambdas {
            let v = at(l);
            assert!(
                v <= prev + 1e-12,
                "gwrp not non-increasing at lambda {l}: {v} > {prev}"
            );
            prev = v;
        }
    }
    println!("ACCEPTANCE 03 pooling-reductions: PASS (dispatch bit-exact, 1000 columns monotone)");
}

#[test]
fn c04_cct_anchors() {
    for c in [2usize, 3, 5, 8] {
        let d = 16;
        let g = Graph::new();
        let row: Vec<f64> = (0..d).map(|j| ((j as f64) * 0.37).sin()).collect();
        let same = Tensor::from_fn(&[c, d], |i| row[i % d]);
        let layers: Vec<_> = (0..3).map(|_| g.leaf(same.clone())).collect();
        let loss = cct_loss(&g, &layers, 3).expect("cct");
        let got = g.value(loss).item();
        assert!(
            (got - (c as f64).ln()).abs() < 1e-9,
            "identical tokens: loss {got} vs ln {c}"
        );

        let orth = Tensor::from_fn(&[c, d], |i| if i / d == i % d { 10.0 } else { 0.0 });
        let g = Graph::new();
        let v = g.leaf(orth);
        let loss = cct_loss(&g, &[v], 1).expect("cct");
        assert!(g.value(loss).item() < 1e-6, "orthonormal anchor");
    }
    println!("ACCEPTANCE 04 cct-anchors: PASS (ln C within 1e-9, orthonormal < 1e-6)");
}

#[test]
fn c05_metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let c = 3usize;
    for trial in 0..1000 {
        // random 8x8 masks and scores
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..=c) as u8).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..=c) as u8).collect();
        let scores = Tensor::from_fn(&[c, 8, 8], |_| rng.random::<f64>());

        // implementation path
        let mut conf = ConfusionAccum::new(c);
        conf.add_image(&pred, &gt).expect("conf");
        let impl_iou = conf.per_class_iou();
        let impl_miou = conf.miou();
        let (impl_fp, impl_fn) = conf.fp_fn();
        let mut sweep = SweepAccum::new(c);
        sweep.add_image(&scores, &gt).expect("sweep");
        let impl_piou = sweep.piou_per_class();
        let impl_pxap = sweep.pxap_per_class();

        // brute-force oracle: direct pixel counting
        let mut ious = Vec::new();
        for cls in 0..=c {
            let inter = pred
                .iter()
                .zip(&gt)
                .filter(|(&p, &g)| p as usize == cls && g as usize == cls)
                .count() as u64;
            let pn = pred.iter().filter(|&&p| p as usize == cls).count() as u64;
            let gn = gt.iter().filter(|&&g| g as usize == cls).count() as u64;
            let union = pn + gn - inter;
            let oracle = if union == 0 {
                None
            } else {
                Some(inter as f64 / union as f64)
            };
            assert_eq!(impl_iou[cls], oracle, "trial {trial} class {cls}");
            if let Some(v) = oracle {
                ious.push(v);
            }
        }
        let oracle_miou = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!(impl_miou, oracle_miou, "trial {trial} miou");

        let mut fp = 0u64;
        let mut fneg = 0u64;
        for cls in 1..=c {
            fp += pred
                .iter()
                .zip(&gt)
                .filter(|(&p, &g)| p as usize == cls && g as usize != cls)
                .count() as u64;
            fneg += pred
                .iter()
                .zip(&gt)
                .filter(|(&p, &g)| p as usize != cls && g as usize == cls)
                .count() as u64;
        }
        assert_eq!(impl_fp, fp as f64 / 64.0, "trial {trial} fp");
        assert_eq!(impl_fn, fneg as f64 / 64.0, "trial {trial} fn");

        for cls in 0..c {
            let gt_pos = gt.iter().filter(|&&g| g as usize == cls + 1).count() as u64;
            if gt_pos == 0 {
                assert_eq!(impl_piou[cls], None);
                assert_eq!(impl_pxap[cls], None);
                continue;
            }
            let plane = &scores.data()[cls * 64..(cls + 1) * 64];
            let mut best = 0.0f64;
            let mut points = vec![(0.0, 1.0)];
            for k in (0..SWEEP_POINTS).rev() {
                let t = sweep_threshold(k);
                let tp = plane
                    .iter()
                    .zip(&gt)
                    .filter(|(&s, &g)| s >= t && g as usize == cls + 1)
                    .count() as u64;
                let pp = plane.iter().filter(|&&s| s >= t).count() as u64;
                let union = pp + gt_pos - tp;
                if union > 0 {
                    best = best.max(tp as f64 / union as f64);
                }
                let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
                points.push((tp as f64 / gt_pos as f64, precision));
            }
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut area = 0.0;
            for pair in points.windows(2) {
                area += (pair[1].0 - pair[0].0) * (pair[0].1 + pair[1].1) / 2.0;
            }
            assert_eq!(impl_piou[cls], Some(best), "trial {trial} piou class {cls}");
            assert_eq!(impl_pxap[cls], Some(area), "trial {trial} pxap class {cls}");
        }
    }
    println!("ACCEPTANCE 05 metric-oracles: PASS (1000 random 8x8 trials, exact)");
}

#[test]
fn c06_refinement_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    // identity affinity leaves maps unchanged, exactly
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let c = rng.random_range(1..=4);
        let m = n * n;
        let maps = LocalizationMaps {
            maps: Tensor::from_fn(&[c, n, n], |_| rng.random::<f64>()),
            kind: MapKind::Fused,
            class_filter: vec![true; c],
        };
        let eye = Tensor::from_fn(&[m, m], |i| if i / m == i % m { 1.0 } else { 0.0 });
        let refined = refine(&maps, &PatchAffinity { a: eye }, 1).expect("refine");
        assert_eq!(refined.maps.data(), maps.maps.data());
    }
    // row-stochastic affinity keeps outputs within [min, max] of the input
    for trial in 0..500 {
        let n = rng.random_range(2..=6);
        let m = n * n;
        let maps = LocalizationMaps {
            maps: Tensor::from_fn(&[2, n, n], |_| rng.random::<f64>()),
            kind: MapKind::MctAttention,
            class_filter: vec![true; 2],
        };
        let mut aff = vec![0.0; m * m];
        for r in 0..m {
            let mut sum = 0.0;
            for col in 0..m {
                let v = rng.random::<f64>();
                aff[r * m + col] = v;
                sum += v;
            }
            for col in 0..m {
                aff[r * m + col] /= sum;
            }
        }
        let refined = refine(
            &maps,
            &PatchAffinity {
                a: Tensor::new(vec![m, m], aff).expect("shape"),
            },
            1 + trial % 2,
        )
        .expect("refine");
        for cls in 0..2 {
            let plane = &maps.maps.data()[cls * m..(cls + 1) * m];
            let mn = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &refined.maps.data()[cls * m..(cls + 1) * m] {
                assert!(
                    v >= mn - 1e-12 && v <= mx + 1e-12,
                    "trial {trial}: {v} outside [{mn},{mx}]"
                );
            }
        }
    }
    println!("ACCEPTANCE 06 refinement-contracts: PASS (identity exact, 500 convex cases)");
}

#[test]
fn c07_pipeline_ordering() {
    let cfg = default_model_config();
    let start = Instant::now();
    let result = trained("default", &cfg);
    let train_time = start.elapsed();
    assert!(
        train_time.as_secs() <= 600,
        "default training took {train_time:?}, budget 10 min"
    );
    let opts = EvalOptions::from_config(&cfg);
    let reports = evaluate_variants(
        &result.params,
        &cfg,
        default_dataset(),
        &opts,
        &[
            SeedVariant::Kind(MapKind::MctAttention),
            SeedVariant::Kind(MapKind::Fused),
            SeedVariant::Kind(MapKind::Refined),
            SeedVariant::RefinedAttention,
        ],
    )
    .expect("evaluation");
    let attention = reports[0].miou;
    let fused = reports[1].miou;
    let refined = reports[2].miou;
    let refined_attention = reports[3].miou;
    println!(
        "ACCEPTANCE 07 pipeline-ordering: attention={attention:.4} attention+affinity={refined_attention:.4} fused={fused:.4} fused+refined={refined:.4} (train {train_time:.0?})"
    );
    assert!(
        fused >= attention + 0.02,
        "fused {fused:.4} not >= attention {attention:.4} + 0.02"
    );
    assert!(
        refined >= attention + 0.02,
        "fused+refined {refined:.4} not >= attention {attention:.4} + 0.02"
    );
    assert!(refined >= 0.50, "fused+refined {refined:.4} below 0.50");
    println!("ACCEPTANCE 07 pipeline-ordering: PASS");
}

#[test]
fn c08_pooling_ordering() {
    let base = default_model_config();
    let run = |label: &str, pooling: Pooling, lambda: f64| -> f64 {
        let mut cfg = base.clone();
        cfg.pooling = pooling;
        cfg.gwrp_lambda = lambda;
        let result = trained(label, &cfg);
        seed_miou(&result, &cfg, SeedVariant::Kind(MapKind::Refined))
    };
    let gmp = run("gmp", Pooling::Gmp, base.gwrp_lambda);
    let gap = run("gap", Pooling::Gap, base.gwrp_lambda);
    let g090 = if base.pooling == Pooling::Gwrp && base.gwrp_lambda == 0.9 {
        seed_miou(
            &trained("default", &base),
            &base,
            SeedVariant::Kind(MapKind::Refined),
        )
    } else {
        run("gwrp-0.9", Pooling::Gwrp, 0.9)
    };
    let g096 = run("gwrp-0.96", Pooling::Gwrp, 0.96);
    let g0996 = run("gwrp-0.996", Pooling::Gwrp, 0.996);
    let best = g090.max(g096).max(g0996);
    println!(
        "ACCEPTANCE 08 pooling-ordering: gmp={gmp:.4} gap={gap:.4} gwrp(0.9)={g090:.4} gwrp(0.96)={g096:.4} gwrp(0.996)={g0996:.4}"
    );
    assert!(gmp <= gap + 1e-9, "GMP {gmp:.4} above GAP {gap:.4}");
    assert!(gap <= best + 1e-9, "GAP {gap:.4} above best GWRP {best:.4}");
    assert!(
        best >= gap + 0.01,
        "best GWRP {best:.4} not >= GAP {gap:.4} + 1 point"
    );
    println!("ACCEPTANCE 08 pooling-ordering: PASS");
}

#[test]
fn c09_cct_effect() {
    let base = default_model_config();
    let with_cct = seed_miou(
        &trained("default", &base),
        &base,
        SeedVariant::Kind(MapKind::Refined),
    );
    let mut no_cct_cfg = base.clone();
    no_cct_cfg.gamma = 0.0;
    let without_cct = seed_miou(
        &trained("gamma0", &no_cct_cfg),
        &no_cct_cfg,
        SeedVariant::Kind(MapKind::Refined),
    );
    println!("ACCEPTANCE 09 cct-effect: gamma=1 {with_cct:.4} vs gamma=0 {without_cct:.4}");
    assert!(
        with_cct >= without_cct + 0.01,
        "CCT run {with_cct:.4} not >= no-CCT run {without_cct:.4} + 1 point"
    );
    println!("ACCEPTANCE 09 cct-effect: PASS");
}

#[test]
fn c10_cli_determinism() {
    let spec_text = "num_samples=48\nimage_size=64\nnum_classes=3\nmin_objects=1\nmax_objects=2\nmin_size=9\nmax_size=14\nnoise=0.2\nseed=7\n";
    let run_once = |root: &std::path::Path| {
        std::fs::create_dir_all(root).unwrap();
        let spec = root.join("spec.cfg");
        std::fs::write(&spec, spec_text).unwrap();
        let data = root.join("data");
        run_gen(&GenArgs {
            spec,
            out: data.clone(),
        })
        .expect("gen");
        let ckpt = root.join("ckpt");
        run_train(&TrainArgs {
            data: data.clone(),
            config: None,
            seed: 11,
            epochs: 3,
            batch_size: 8,
            lr: 1e-3,
            flip: false,
            out: ckpt.clone(),
        })
        .expect("train");
        let maps = root.join("maps");
        run_maps(&MapsArgs {
            checkpoint: ckpt.clone(),
            data: data.clone(),
            kind: "all".to_string(),
            k: None,
            iterations: None,
            class_filter: "gt".to_string(),
            limit: Some(6),
            out: maps,
        })
        .expect("maps");
        run_eval(&EvalArgs {
            checkpoint: ckpt,
            data,
            kind: "refined".to_string(),
            tau: 0.35,
            k: None,
            iterations: None,
            class_filter: "gt".to_string(),
            report: root.join("report.csv"),
        })
        .expect("eval");
    };
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_once(&a);
    run_once(&b);

    // every produced artifact must be byte-identical
    let mut compared = 0usize;
    let mut stack = vec![(a.clone(), b.clone())];
    while let Some((pa, pb)) = stack.pop() {
        for entry in std::fs::read_dir(&pa).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name();
            let (fa, fb) = (pa.join(&name), pb.join(&name));
            if entry.file_type().unwrap().is_dir() {
                stack.push((fa, fb));
            } else {
                let ba = std::fs::read(&fa).unwrap();
                let bb = std::fs::read(&fb).unwrap_or_else(|_| {
                    panic!("artifact {} missing in second run", fb.display())
                });
                assert_eq!(ba, bb, "artifact {} differs between runs", fa.display());
                compared += 1;
            }
        }
    }
    assert!(compared > 10, "expected artifacts, compared only {compared}");
    println!("ACCEPTANCE 10 determinism: PASS ({compared} artifacts byte-identical)");
}
