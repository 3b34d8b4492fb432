//! End-to-end seed extraction and evaluation: run the encoder on a dataset,
//! build every map kind, compare against pixel ground truth, and drive the
//! layer-fusion and CCT-depth sweeps.

use crate::config::ModelConfig;
use crate::encoder::{forward, GraphParams, Mode, Params};
use crate::error::{MctError, Result};
use crate::graph::Graph;
use crate::heads::cam_feature;
use crate::maps::{
    extract_affinity, extract_class_to_patch, fuse_attention, fuse_maps, patch_cam, refine,
    upsample_bilinear, LocalizationMaps, MapKind, PatchAffinity,
};
use crate::metrics::{seed_prediction, ConfusionAccum, MetricReport, SweepAccum};
use crate::tensor::{sigmoid, Tensor};
use crate::train::{train, TrainConfig};

/// Which classes count as present when turning maps into seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassFilter {
    /// Ground-truth image labels (the seed-evaluation protocol).
    GroundTruth,
    /// Classes whose class-token score passes sigmoid >= 0.5.
    Predicted,
    /// All classes.
    None,
}

impl ClassFilter {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassFilter::GroundTruth => "gt",
            ClassFilter::Predicted => "pred",
            ClassFilter::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(ClassFilter::GroundTruth),
            "pred" => Ok(ClassFilter::Predicted),
            "none" => Ok(ClassFilter::None),
            other => Err(MctError::config(format!("unknown class filter '{other}'"))),
        }
    }
}

/// Every map kind for one image, plus the affinity used for refinement.
pub struct MapBundle {
    pub attention: LocalizationMaps,
    pub patch_cam: LocalizationMaps,
    pub fused: LocalizationMaps,
    pub refined_attention: LocalizationMaps,
    pub refined_fused: LocalizationMaps,
    pub affinity: PatchAffinity,
}

impl MapBundle {
    /// The map a CLI `--kind` name refers to; `refined` means the refined
    /// fusion (the full pipeline output).
    pub fn by_kind(&self, kind: MapKind) -> &LocalizationMaps {
        match kind {
            MapKind::MctAttention => &self.attention,
            MapKind::PatchCam => &self.patch_cam,
            MapKind::Fused => &self.fused,
            MapKind::Refined => &self.refined_fused,
        }
    }
}

pub struct MapOptions {
    pub k: usize,
    pub iterations: usize,
    pub filter: ClassFilter,
}

impl MapOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        MapOptions {
            k: cfg.fuse_layers,
            iterations: cfg.refine_iterations,
            filter: ClassFilter::GroundTruth,
        }
    }
}

/// Runs one image through the encoder and builds all localization maps.
/// `labels` feeds the ground-truth filter; pass None with other filters.
pub fn compute_maps(
    params: &Params,
    cfg: &ModelConfig,
    image: &Tensor,
    labels: Option<&[u8]>,
    opts: &MapOptions,
) -> Result<MapBundle> {
    let g = Graph::new();
    let gp = GraphParams::from_params(&g, params);
    let fwd = forward(&g, &gp, image, cfg, &Mode::Eval)?;

    let filter: Vec<bool> = match opts.filter {
        ClassFilter::GroundTruth => {
            let labels = labels.ok_or_else(|| {
                MctError::config("ground-truth class filter needs labels".to_string())
            })?;
            labels.iter().map(|&l| l == 1).collect()
        }
        ClassFilter::Predicted => {
            let cls_tokens = g.slice_rows(fwd.tokens_out, 0, cfg.num_classes)?;
            let scores = g.mean_rows(cls_tokens)?;
            g.value(scores)
                .data()
                .iter()
                .map(|&s| sigmoid(s) >= 0.5)
                .collect()
        }
        ClassFilter::None => vec![true; cfg.num_classes],
    };

    let fused_attn = fuse_attention(&fwd.attention, opts.k)?;
    let attention = extract_class_to_patch(&fused_attn, cfg.num_classes, cfg.grid)?
        .with_filter(filter.clone());

    let affinity_src = if cfg.affinity_all_layers {
        fuse_attention(&fwd.attention, cfg.layers)?
    } else {
        fused_attn
    };
    let affinity = extract_affinity(&affinity_src, cfg.num_classes, cfg.affinity_raw)?;

    let patch_tokens = g.slice_rows(fwd.tokens_out, cfg.num_classes, cfg.seq_len())?;
    let f = cam_feature(&g, patch_tokens, &gp, cfg)?;
    let pcam = patch_cam(&g.value(f))?.with_filter(filter.clone());

    let fused = fuse_maps(&attention, &pcam)?;
    let refined_attention = refine(&attention, &affinity, opts.iterations)?;
    let refined_fused = refine(&fused, &affinity, opts.iterations)?;

    Ok(MapBundle {
        attention,
        patch_cam: pcam,
        fused,
        refined_attention,
        refined_fused,
        affinity,
    })
}

pub struct EvalOptions {
    pub kind: MapKind,
    pub k: usize,
    pub iterations: usize,
    pub tau: f64,
    pub filter: ClassFilter,
}

impl EvalOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        EvalOptions {
            kind: MapKind::Refined,
            k: cfg.fuse_layers,
            iterations: cfg.refine_iterations,
            tau: 0.35,
            filter: ClassFilter::GroundTruth,
        }
    }
}

/// Select a map variant for evaluation; see [`MapBundle::by_kind`] for the
/// kind naming, with the refined-attention variant reachable separately.
#[derive(Clone, Copy, Debug)]
pub enum SeedVariant {
    Kind(MapKind),
    RefinedAttention,
}

fn seed_maps<'a>(bundle: &'a MapBundle, variant: &SeedVariant) -> &'a LocalizationMaps {
    match variant {
        SeedVariant::Kind(kind) => bundle.by_kind(*kind),
        SeedVariant::RefinedAttention => &bundle.refined_attention,
    }
}

/// Evaluates seeds of several variants over a whole dataset with a single
/// encoder pass per image.
pub fn evaluate_variants(
    params: &Params,
    cfg: &ModelConfig,
    dataset: &crate::data::Dataset,
    opts: &EvalOptions,
    variants: &[SeedVariant],
) -> Result<Vec<MetricReport>> {
    if dataset.spec.num_classes != cfg.num_classes {
        return Err(MctError::config(format!(
            "dataset classes {} != config classes {}",
            dataset.spec.num_classes, cfg.num_classes
        )));
    }
    let map_opts = MapOptions {
        k: opts.k,
        iterations: opts.iterations,
        filter: opts.filter,
    };
    let s = dataset.spec.image_size;
    let mut confs: Vec<ConfusionAccum> = variants
        .iter()
        .map(|_| ConfusionAccum::new(cfg.num_classes))
        .collect();
    let mut sweeps: Vec<SweepAccum> = variants
        .iter()
        .map(|_| SweepAccum::new(cfg.num_classes))
        .collect();
    for sample in &dataset.samples {
        let bundle = compute_maps(params, cfg, &sample.image, Some(&sample.labels), &map_opts)?;
        for (vi, variant) in variants.iter().enumerate() {
            let maps = seed_maps(&bundle, variant);
            let up = upsample_bilinear(&maps.filtered_maps(), s, s)?;
            let pred = seed_prediction(&up, &maps.class_filter, opts.tau);
            confs[vi].add_image(&pred, &sample.mask)?;
            sweeps[vi].add_image(&up, &sample.mask)?;
        }
    }
    Ok(variants
        .iter()
        .zip(confs.iter().zip(sweeps.iter()))
        .map(|(variant, (conf, sweep))| {
            let kind_name = match variant {
                SeedVariant::Kind(k) => k.as_str().to_string(),
                SeedVariant::RefinedAttention => "refined_attention".to_string(),
            };
            MetricReport::from_accums(conf, sweep, opts.tau, &kind_name, dataset.samples.len())
        })
        .collect())
}

/// Evaluates seeds of one variant over a whole dataset.
pub fn evaluate_variant(
    params: &Params,
    cfg: &ModelConfig,
    dataset: &crate::data::Dataset,
    opts: &EvalOptions,
    variant: &SeedVariant,
) -> Result<MetricReport> {
    Ok(evaluate_variants(params, cfg, dataset, opts, &[*variant])?
        .into_iter()
        .next()
        .expect("one variant in, one report out"))
}

pub fn evaluate_seeds(
    params: &Params,
    cfg: &ModelConfig,
    dataset: &crate::data::Dataset,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    evaluate_variant(params, cfg, dataset, opts, &SeedVariant::Kind(opts.kind))
}

/// One row of the layer-fusion sweep.
pub struct KSweepRow {
    pub k: usize,
    pub fp: f64,
    pub fn_rate: f64,
    pub miou: f64,
}

/// Evaluates attention-kind seeds for every K in 1..=L.
pub fn sweep_k(
    params: &Params,
    cfg: &ModelConfig,
    dataset: &crate::data::Dataset,
    tau: f64,
) -> Result<Vec<KSweepRow>> {
    let mut rows = Vec::with_capacity(cfg.layers);
    for k in 1..=cfg.layers {
        let opts = EvalOptions {
            kind: MapKind::MctAttention,
            k,
            iterations: cfg.refine_iterations,
            tau,
            filter: ClassFilter::GroundTruth,
        };
        let report = evaluate_seeds(params, cfg, dataset, &opts)?;
        rows.push(KSweepRow {
            k,
            fp: report.fp_rate,
            fn_rate: report.fn_rate,
            miou: report.miou,
        });
    }
    Ok(rows)
}

pub fn k_sweep_csv(rows: &[KSweepRow]) -> String {
    let mut s = String::from("k,fp,fn,miou\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.k, r.fp, r.fn_rate, r.miou));
    }
    s
}

/// Trains one model per CCT depth T in 0..=L (same seed and data) and
/// evaluates the refined fused seeds.
pub fn sweep_cct_depth(
    cfg: &ModelConfig,
    dataset: &crate::data::Dataset,
    tc: &TrainConfig,
    tau: f64,
) -> Result<Vec<(usize, f64)>> {
    let mut rows = Vec::with_capacity(cfg.layers + 1);
    for t in 0..=cfg.layers {
        let mut variant = cfg.clone();
        variant.cct_depth = t;
        if t == 0 {
            variant.gamma = 0.0;
        }
        let result = train(dataset, &variant, tc)?;
        let opts = EvalOptions {
            tau,
            ..EvalOptions::from_config(&variant)
        };
        let report = evaluate_seeds(&result.params, &variant, dataset, &opts)?;
        rows.push((t, report.miou));
    }
    Ok(rows)
}

pub fn cct_sweep_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("t,miou\n");
    for (t, miou) in rows {
        s.push_str(&format!("{},{:.6}\n", t, miou));
    }
    s
}
