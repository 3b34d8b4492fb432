//! Model configuration and its flat `key=value` text representation.

use std::fmt;

use crate::error::{MctError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Gap,
    Gmp,
    Gwrp,
}

impl Pooling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::Gap => "gap",
            Pooling::Gmp => "gmp",
            Pooling::Gwrp => "gwrp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Pooling::Gap),
            "gmp" => Ok(Pooling::Gmp),
            "gwrp" => Ok(Pooling::Gwrp),
            other => Err(MctError::config(format!("unknown pooling '{other}'"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// C: number of classes / class tokens.
    pub num_classes: usize,
    /// N: patch grid side; M = N^2 patch tokens.
    pub grid: usize,
    /// D: embedding dimension, divisible by heads.
    pub embed_dim: usize,
    /// L: encoder layers.
    pub layers: usize,
    /// H: attention heads.
    pub heads: usize,
    /// Input image side in pixels, divisible by grid.
    pub image_size: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    pub gwrp_lambda: f64,
    /// K: number of top layers fused for attention maps.
    pub fuse_layers: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub attn_dropout: f64,
    /// Scale attention logits by sqrt(D) instead of sqrt(D/H).
    pub scale_full_dim: bool,
    /// Number of top layers whose output class tokens enter the contrastive
    /// regularizer (0 disables it).
    pub cct_depth: usize,
    /// CAM-head convolution kernel side (odd).
    pub conv_kernel: usize,
    /// Skip the row renormalization of the sliced patch affinity.
    pub affinity_raw: bool,
    /// Extract the affinity from an all-layer fusion instead of the top-K one.
    pub affinity_all_layers: bool,
    pub refine_iterations: usize,
}

impl ModelConfig {
    /// Desk-scale default: C=5, N=8 (M=64), D=64, H=4, L=4, 64x64 images.
    pub fn desk_default() -> Self {
        ModelConfig {
            num_classes: 5,
            grid: 8,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            image_size: 64,
            mlp_ratio: 4.0,
            pooling: Pooling::Gwrp,
            gwrp_lambda: 0.9,
            fuse_layers: 3,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            attn_dropout: 0.0,
            scale_full_dim: false,
            cct_depth: 4,
            conv_kernel: 3,
            affinity_raw: false,
            affinity_all_layers: false,
            refine_iterations: 1,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn seq_len(&self) -> usize {
        self.num_classes + self.num_patches()
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let e = |msg: String| Err(MctError::Config(msg));
        if self.num_classes < 2 {
            return e(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.grid < 2 {
            return e(format!("grid must be >= 2, got {}", self.grid));
        }
        if self.layers < 2 {
            return e(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.heads < 1 {
            return e(format!("heads must be >= 1, got {}", self.heads));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return e(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.image_size == 0 || self.image_size % self.grid != 0 {
            return e(format!(
                "image_size {} must be divisible by grid {}",
                self.image_size, self.grid
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return e(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        if !(0.0..=1.0).contains(&self.gwrp_lambda) {
            return e(format!("gwrp_lambda must lie in [0,1], got {}", self.gwrp_lambda));
        }
        if self.fuse_layers < 1 || self.fuse_layers > self.layers {
            return e(format!(
                "fuse_layers {} must lie in [1, layers={}]",
                self.fuse_layers, self.layers
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return e(format!(
                "loss weights must be >= 0, got alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            ));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return e(format!("attn_dropout must lie in [0,1), got {}", self.attn_dropout));
        }
        if self.cct_depth > self.layers {
            return e(format!(
                "cct_depth {} must not exceed layers {}",
                self.cct_depth, self.layers
            ));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return e(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        Ok(())
    }

    /// Flat `key=value` lines, one per field, in fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("num_classes", self.num_classes.to_string());
        kv("grid", self.grid.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("image_size", self.image_size.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("pooling", self.pooling.to_string());
        kv("gwrp_lambda", self.gwrp_lambda.to_string());
        kv("fuse_layers", self.fuse_layers.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("gamma", self.gamma.to_string());
        kv("attn_dropout", self.attn_dropout.to_string());
        kv("scale_full_dim", self.scale_full_dim.to_string());
        kv("cct_depth", self.cct_depth.to_string());
        kv("conv_kernel", self.conv_kernel.to_string());
        kv("affinity_raw", self.affinity_raw.to_string());
        kv("affinity_all_layers", self.affinity_all_layers.to_string());
        kv("refine_iterations", self.refine_iterations.to_string());
        s
    }

    /// Parses `key=value` lines over the desk defaults. Unknown keys are
    /// rejected; blank lines and `#` comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk_default();
        for (k, v) in parse_kv_lines(text)? {
            match k.as_str() {
                "num_classes" => cfg.num_classes = parse_num(&k, &v)?,
                "grid" => cfg.grid = parse_num(&k, &v)?,
                "embed_dim" => cfg.embed_dim = parse_num(&k, &v)?,
                "layers" => cfg.layers = parse_num(&k, &v)?,
                "heads" => cfg.heads = parse_num(&k, &v)?,
                "image_size" => cfg.image_size = parse_num(&k, &v)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_float(&k, &v)?,
                "pooling" => cfg.pooling = Pooling::parse(&v)?,
                "gwrp_lambda" => cfg.gwrp_lambda = parse_float(&k, &v)?,
                "fuse_layers" => cfg.fuse_layers = parse_num(&k, &v)?,
                "alpha" => cfg.alpha = parse_float(&k, &v)?,
                "beta" => cfg.beta = parse_float(&k, &v)?,
                "gamma" => cfg.gamma = parse_float(&k, &v)?,
                "attn_dropout" => cfg.attn_dropout = parse_float(&k, &v)?,
                "scale_full_dim" => cfg.scale_full_dim = parse_bool(&k, &v)?,
                "cct_depth" => cfg.cct_depth = parse_num(&k, &v)?,
                "conv_kernel" => cfg.conv_kernel = parse_num(&k, &v)?,
                "affinity_raw" => cfg.affinity_raw = parse_bool(&k, &v)?,
                "affinity_all_layers" => cfg.affinity_all_layers = parse_bool(&k, &v)?,
                "refine_iterations" => cfg.refine_iterations = parse_num(&k, &v)?,
                other => {
                    return Err(MctError::format(format!("unknown config key '{other}'")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MctError::format(format!(
                "line {} is not key=value: '{line}'",
                ln + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num(k: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| MctError::format(format!("key '{k}': expected integer, got '{v}'")))
}

pub(crate) fn parse_float(k: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| MctError::format(format!("key '{k}': expected number, got '{v}'")))
}

pub(crate) fn parse_bool(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MctError::format(format!(
            "key '{k}': expected true/false, got '{v}'"
        ))),
    }
}

pub(crate) fn parse_u64(k: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| MctError::format(format!("key '{k}': expected integer, got '{v}'")))
}
