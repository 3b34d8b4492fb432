//! Subcommand implementations. Every run is deterministic for a fixed
//! seed; all derived randomness uses fixed offsets from the one `--seed`.

use std::fs;
use std::path::{Path, PathBuf};

use mct_core::checkpoint;
use mct_core::config::{ModelConfig, Pooling};
use mct_core::data::{generate, Dataset, DatasetSpec};
use mct_core::encoder::Params;
use mct_core::gradcheck::{full_loss_check, op_suite, DEFAULT_H, GRAD_TOL};
use mct_core::maps::{upsample_bilinear, write_pgm, MapKind};
use mct_core::mct1;
use mct_core::metrics::seed_prediction;
use mct_core::pipeline::{
    cct_sweep_csv, compute_maps, evaluate_variant, evaluate_variants, k_sweep_csv,
    sweep_cct_depth, sweep_k, ClassFilter, EvalOptions, MapOptions, SeedVariant,
};
use mct_core::tensor::Tensor;
use mct_core::train::{loss_curve_csv, train, TrainConfig};
use mct_core::MctError;

use crate::{CliError, CliResult};

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!(
            "{what} directory not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn parse_kind(s: &str) -> CliResult<MapKind> {
    match s {
        "attention" => Ok(MapKind::MctAttention),
        "patchcam" => Ok(MapKind::PatchCam),
        "fused" => Ok(MapKind::Fused),
        "refined" => Ok(MapKind::Refined),
        other => Err(CliError::Usage(format!(
            "unknown kind '{other}' (expected attention|patchcam|fused|refined|all)"
        ))),
    }
}

// ---- gen -------------------------------------------------------------

pub struct GenArgs {
    pub spec: PathBuf,
    pub out: PathBuf,
}

pub fn run_gen(args: &GenArgs) -> CliResult<()> {
    require_file(&args.spec, "dataset spec")?;
    let text = fs::read_to_string(&args.spec).map_err(MctError::from)?;
    let spec = DatasetSpec::from_kv(&text)?;
    let dataset = generate(&spec)?;
    dataset.save(&args.out)?;
    println!(
        "gen: wrote {} samples ({}x{}, {} classes) to {}",
        spec.num_samples,
        spec.image_size,
        spec.image_size,
        spec.num_classes,
        args.out.display()
    );
    Ok(())
}

// ---- train -----------------------------------------------------------

pub struct TrainArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub flip: bool,
    pub out: PathBuf,
}

/// Loads the model config, or derives one from the dataset when no file is
/// given (desk defaults with the dataset's class count and image size).
fn model_config_for(dataset: &Dataset, config: &Option<PathBuf>) -> CliResult<ModelConfig> {
    match config {
        Some(path) => {
            require_file(path, "config")?;
            let text = fs::read_to_string(path).map_err(MctError::from)?;
            Ok(ModelConfig::from_kv(&text)?)
        }
        None => {
            let mut cfg = ModelConfig::desk_default();
            cfg.num_classes = dataset.spec.num_classes;
            cfg.image_size = dataset.spec.image_size;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

pub fn run_train(args: &TrainArgs) -> CliResult<()> {
    require_dir(&args.data, "dataset")?;
    let dataset = Dataset::load(&args.data)?;
    let cfg = model_config_for(&dataset, &args.config)?;
    let tc = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        flip: args.flip,
        ..TrainConfig::default()
    };
    let result = train(&dataset, &cfg, &tc)?;
    checkpoint::save(&args.out, &cfg, &result.params)?;
    fs::write(args.out.join("loss.csv"), loss_curve_csv(&result.curve)).map_err(MctError::from)?;
    let last = result.curve.last().expect("epochs >= 1");
    println!(
        "train: {} epochs, final losses total={:.4} class={:.4} patch={:.4} cct={:.4} -> {}",
        args.epochs,
        last.total,
        last.cls_class,
        last.cls_patch,
        last.cct,
        args.out.display()
    );
    Ok(())
}

// ---- maps ------------------------------------------------------------

pub struct MapsArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub kind: String,
    pub k: Option<usize>,
    pub iterations: Option<usize>,
    pub class_filter: String,
    pub limit: Option<usize>,
    pub out: PathBuf,
}

pub fn run_maps(args: &MapsArgs) -> CliResult<()> {
    require_dir(&args.checkpoint, "checkpoint")?;
    require_dir(&args.data, "dataset")?;
    let (cfg, params) = checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let kinds: Vec<MapKind> = if args.kind == "all" {
        vec![
            MapKind::MctAttention,
            MapKind::PatchCam,
            MapKind::Fused,
            MapKind::Refined,
        ]
    } else {
        vec![parse_kind(&args.kind)?]
    };
    let opts = MapOptions {
        k: args.k.unwrap_or(cfg.fuse_layers),
        iterations: args.iterations.unwrap_or(cfg.refine_iterations),
        filter: ClassFilter::parse(&args.class_filter)?,
    };
    fs::create_dir_all(&args.out).map_err(MctError::from)?;
    let n = args.limit.unwrap_or(dataset.samples.len()).min(dataset.samples.len());
    let c = cfg.num_classes;
    let grid = cfg.grid;
    let mut stacked: Vec<Vec<f64>> = kinds.iter().map(|_| Vec::new()).collect();
    for (i, sample) in dataset.samples.iter().take(n).enumerate() {
        let bundle = compute_maps(&params, &cfg, &sample.image, Some(&sample.labels), &opts)?;
        for (ki, kind) in kinds.iter().enumerate() {
            let maps = bundle.by_kind(*kind);
            stacked[ki].extend_from_slice(maps.maps.data());
            for ci in 0..c {
                let plane = Tensor::new(
                    vec![grid, grid],
                    maps.maps.data()[ci * grid * grid..(ci + 1) * grid * grid].to_vec(),
                )?;
                write_pgm(
                    args.out.join(format!("s{i:04}_{}_c{ci}.pgm", kind.as_str())),
                    &plane,
                )?;
            }
        }
    }
    for (ki, kind) in kinds.iter().enumerate() {
        let t = Tensor::new(vec![n, c, grid, grid], stacked[ki].clone())?;
        mct1::write_file(args.out.join(format!("maps_{}.mct1", kind.as_str())), &t)?;
    }
    println!(
        "maps: wrote {} kinds x {} samples x {} classes to {}",
        kinds.len(),
        n,
        c,
        args.out.display()
    );
    Ok(())
}

// ---- eval ------------------------------------------------------------

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub kind: String,
    pub tau: f64,
    pub k: Option<usize>,
    pub iterations: Option<usize>,
    pub class_filter: String,
    pub report: PathBuf,
}

pub fn run_eval(args: &EvalArgs) -> CliResult<()> {
    require_dir(&args.checkpoint, "checkpoint")?;
    require_dir(&args.data, "dataset")?;
    let (cfg, params) = checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let kind = parse_kind(&args.kind)?;
    let opts = EvalOptions {
        kind,
        k: args.k.unwrap_or(cfg.fuse_layers),
        iterations: args.iterations.unwrap_or(cfg.refine_iterations),
        tau: args.tau,
        filter: ClassFilter::parse(&args.class_filter)?,
    };
    let report = evaluate_variant(&params, &cfg, &dataset, &opts, &SeedVariant::Kind(kind))?;
    if let Some(parent) = args.report.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(MctError::from)?;
        }
    }
    fs::write(&args.report, report.to_csv()).map_err(MctError::from)?;
    print!("{}", report.to_table());
    Ok(())
}

// ---- ablate ----------------------------------------------------------

pub struct AblateArgs {
    pub study: String,
    pub data: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub config: Option<PathBuf>,
    pub tau: f64,
    pub out: PathBuf,
}

pub fn run_ablate(args: &AblateArgs) -> CliResult<()> {
    require_dir(&args.data, "dataset")?;
    let dataset = Dataset::load(&args.data)?;
    let base = model_config_for(&dataset, &args.config)?;
    let tc = TrainConfig {
        epochs: args.epochs,
        seed: args.seed,
        ..TrainConfig::default()
    };
    fs::create_dir_all(&args.out).map_err(MctError::from)?;

    match args.study.as_str() {
        "pooling" => {
            let variants: Vec<(&str, Pooling, f64)> = vec![
                ("gmp", Pooling::Gmp, base.gwrp_lambda),
                ("gap", Pooling::Gap, base.gwrp_lambda),
                ("gwrp", Pooling::Gwrp, 0.9),
                ("gwrp", Pooling::Gwrp, 0.96),
                ("gwrp", Pooling::Gwrp, 0.996),
            ];
            let mut csv = String::from("pooling,lambda,miou\n");
            for (name, pooling, lambda) in variants {
                let mut cfg = base.clone();
                cfg.pooling = pooling;
                cfg.gwrp_lambda = lambda;
                let result = train(&dataset, &cfg, &tc)?;
                let opts = EvalOptions {
                    tau: args.tau,
                    ..EvalOptions::from_config(&cfg)
                };
                let report = evaluate_variant(
                    &result.params,
                    &cfg,
                    &dataset,
                    &opts,
                    &SeedVariant::Kind(MapKind::Refined),
                )?;
                println!("ablate pooling: {name} lambda={lambda} mIoU={:.4}", report.miou);
                csv.push_str(&format!("{name},{lambda},{:.6}\n", report.miou));
            }
            fs::write(args.out.join("pooling.csv"), csv).map_err(MctError::from)?;
        }
        "cct-depth" => {
            let rows = sweep_cct_depth(&base, &dataset, &tc, args.tau)?;
            for (t, miou) in &rows {
                println!("ablate cct-depth: T={t} mIoU={miou:.4}");
            }
            fs::write(args.out.join("cct_depth.csv"), cct_sweep_csv(&rows))
                .map_err(MctError::from)?;
        }
        "k-sweep" => {
            let result = train(&dataset, &base, &tc)?;
            let rows = sweep_k(&result.params, &base, &dataset, args.tau)?;
            for r in &rows {
                println!(
                    "ablate k-sweep: K={} FP={:.4} FN={:.4} mIoU={:.4}",
                    r.k, r.fp, r.fn_rate, r.miou
                );
            }
            fs::write(args.out.join("k_sweep.csv"), k_sweep_csv(&rows)).map_err(MctError::from)?;
        }
        "pipeline" => {
            let result = train(&dataset, &base, &tc)?;
            let rows = pipeline_study(&result.params, &base, &dataset, args.tau)?;
            let mut csv = String::from("variant,miou\n");
            for (name, miou) in &rows {
                println!("ablate pipeline: {name} mIoU={miou:.4}");
                csv.push_str(&format!("{name},{miou:.6}\n"));
            }
            fs::write(args.out.join("pipeline.csv"), csv).map_err(MctError::from)?;
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown study '{other}' (expected pooling|cct-depth|k-sweep|pipeline)"
            )));
        }
    }
    Ok(())
}

/// The four-variant map study: attention alone, plus affinity refinement,
/// plus PatchCAM fusion, plus both.
pub fn pipeline_study(
    params: &Params,
    cfg: &ModelConfig,
    dataset: &Dataset,
    tau: f64,
) -> CliResult<Vec<(String, f64)>> {
    let opts = EvalOptions {
        tau,
        ..EvalOptions::from_config(cfg)
    };
    let names = [
        "attention",
        "attention+affinity",
        "attention+patchcam",
        "attention+patchcam+affinity",
    ];
    let variants = [
        SeedVariant::Kind(MapKind::MctAttention),
        SeedVariant::RefinedAttention,
        SeedVariant::Kind(MapKind::Fused),
        SeedVariant::Kind(MapKind::Refined),
    ];
    let reports = evaluate_variants(params, cfg, dataset, &opts, &variants)?;
    Ok(names
        .iter()
        .zip(reports)
        .map(|(name, r)| (name.to_string(), r.miou))
        .collect())
}

// ---- gradcheck -------------------------------------------------------

pub struct GradcheckArgs {
    pub config: Option<PathBuf>,
    pub seed: u64,
    /// Coordinates probed per parameter tensor in the full-loss check.
    pub samples: usize,
}

pub fn run_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let cfg = match &args.config {
        Some(path) => {
            require_file(path, "config")?;
            let text = fs::read_to_string(path).map_err(MctError::from)?;
            ModelConfig::from_kv(&text)?
        }
        None => ModelConfig::desk_default(),
    };
    let mut failed = false;
    for (name, report) in op_suite(args.seed)? {
        let ok = report.max_rel_err < GRAD_TOL;
        failed |= !ok;
        println!(
            "gradcheck {name}: max rel err {:.3e} over {} coords ({})",
            report.max_rel_err,
            report.coords_checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let report = full_loss_check(&cfg, args.seed, Some(args.samples))?;
    let ok = report.max_rel_err < GRAD_TOL;
    failed |= !ok;
    println!(
        "gradcheck total_loss: max rel err {:.3e} at {} over {} coords, h={DEFAULT_H} ({})",
        report.max_rel_err,
        report.worst,
        report.coords_checked,
        if ok { "ok" } else { "FAIL" }
    );
    if failed {
        return Err(CliError::Core(MctError::numerical(format!(
            "gradient check failed: max rel err {:.3e} >= {GRAD_TOL}",
            report.max_rel_err
        ))));
    }
    Ok(())
}

// ---- shared helpers for tests ----------------------------------------

/// Upsampled, filtered seed maps and the hard prediction for one sample;
/// mirrors what `eval` does per image.
pub fn seeds_for_sample(
    params: &Params,
    cfg: &ModelConfig,
    image: &Tensor,
    labels: &[u8],
    tau: f64,
) -> CliResult<Vec<u8>> {
    let opts = MapOptions::from_config(cfg);
    let bundle = compute_maps(params, cfg, image, Some(labels), &opts)?;
    let maps = bundle.by_kind(MapKind::Refined);
    let up = upsample_bilinear(&maps.filtered_maps(), cfg.image_size, cfg.image_size)?;
    Ok(seed_prediction(&up, &maps.class_filter, tau))
}
