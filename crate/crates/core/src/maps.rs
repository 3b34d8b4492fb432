//! Inference-time localization maps: fuse attention over heads and top-K
//! layers, slice class-to-patch and patch-to-patch blocks, build PatchCAM,
//! fuse map types, refine with patch affinity, and upsample for evaluation.
//!
//! Every stage outputs values in [0,1]; all operations here are pure.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::encoder::AttentionStack;
use crate::error::{MctError, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    MctAttention,
    PatchCam,
    Fused,
    Refined,
}

impl MapKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MapKind::MctAttention => "attention",
            MapKind::PatchCam => "patchcam",
            MapKind::Fused => "fused",
            MapKind::Refined => "refined",
        }
    }
}

/// Per-class spatial score maps (C x N x N) with provenance and the set of
/// classes considered present. Values lie in [0,1].
#[derive(Clone)]
pub struct LocalizationMaps {
    pub maps: Tensor,
    pub kind: MapKind,
    pub class_filter: Vec<bool>,
}

impl LocalizationMaps {
    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.maps.shape()[1]
    }

    /// Maps with filtered-out classes zeroed, as used for evaluation.
    pub fn filtered_maps(&self) -> Tensor {
        let (c, h, w) = (self.maps.shape()[0], self.maps.shape()[1], self.maps.shape()[2]);
        let d = self.maps.data();
        Tensor::from_fn(&[c, h, w], |i| {
            if self.class_filter[i / (h * w)] {
                d[i]
            } else {
                0.0
            }
        })
    }

    pub fn with_filter(mut self, filter: Vec<bool>) -> Self {
        self.class_filter = filter;
        self
    }
}

/// Patch-to-patch affinity (M x M); rows sum to 1 after renormalization
/// (the raw variant keeps the sliced softmax mass).
#[derive(Clone)]
pub struct PatchAffinity {
    pub a: Tensor,
}

/// Per-class min-max normalization to [0,1]; a constant map becomes zeros.
pub fn minmax_per_class(maps: &Tensor) -> Tensor {
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let hw = h * w;
    let d = maps.data();
    let mut out = vec![0.0; c * hw];
    for ci in 0..c {
        let slice = &d[ci * hw..(ci + 1) * hw];
        let mn = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx > mn {
            let inv = 1.0 / (mx - mn);
            for (o, &v) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(slice) {
                *o = (v - mn) * inv;
            }
        }
        // degenerate constant map stays all-zero
    }
    Tensor::new(vec![c, h, w], out).expect("same shape")
}

/// Head-mean within each layer, then mean over the top K layers.
/// The means commute; the order is fixed for determinism.
pub fn fuse_attention(stack: &AttentionStack, k: usize) -> Result<Tensor> {
    let l = stack.num_layers();
    if k < 1 || k > l {
        return Err(MctError::config(format!(
            "fuse_attention K={k} out of range [1,{l}]"
        )));
    }
    let t = stack.maps[0][0].shape()[0];
    let mut acc = vec![0.0; t * t];
    for layer in &stack.maps[l - k..] {
        let hn = layer.len() as f64;
        for head in layer {
            for (a, &v) in acc.iter_mut().zip(head.data()) {
                *a += v / hn;
            }
        }
    }
    let inv = 1.0 / k as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Tensor::new(vec![t, t], acc)
}

/// Raw class-to-patch block: rows [0,C), columns [C, C+M).
pub fn slice_class_to_patch(fused: &Tensor, num_classes: usize) -> Result<Tensor> {
    let t = fused.shape()[0];
    let rows = tensor::slice_rows(fused, 0, num_classes)?;
    tensor::slice_cols(&rows, num_classes, t)
}

/// Raw patch-to-patch block: rows and columns [C, C+M).
pub fn slice_patch_block(fused: &Tensor, num_classes: usize) -> Result<Tensor> {
    let t = fused.shape()[0];
    let rows = tensor::slice_rows(fused, num_classes, t)?;
    tensor::slice_cols(&rows, num_classes, t)
}

/// Class-specific localization maps from fused attention: slice the
/// class-to-patch block, fold each row onto the patch grid, then min-max
/// normalize per class.
pub fn extract_class_to_patch(fused: &Tensor, num_classes: usize, grid: usize) -> Result<LocalizationMaps> {
    let block = slice_class_to_patch(fused, num_classes)?;
    if block.cols() != grid * grid {
        return Err(MctError::shape(format!(
            "class-to-patch block has {} patches, expected {}x{}",
            block.cols(),
            grid,
            grid
        )));
    }
    let spatial = block.reshape(&[num_classes, grid, grid])?;
    Ok(LocalizationMaps {
        maps: minmax_per_class(&spatial),
        kind: MapKind::MctAttention,
        class_filter: vec![true; num_classes],
    })
}

/// Patch affinity from fused attention. Slicing drops the class-token mass,
/// so rows are renormalized to sum 1 unless `raw` keeps the literal block.
pub fn extract_affinity(fused: &Tensor, num_classes: usize, raw: bool) -> Result<PatchAffinity> {
    let block = slice_patch_block(fused, num_classes)?;
    if raw {
        return Ok(PatchAffinity { a: block });
    }
    let m = block.rows();
    let d = block.data();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        let row = &d[i * m..(i + 1) * m];
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = v / sum;
            }
        }
    }
    Ok(PatchAffinity {
        a: Tensor::new(vec![m, m], out)?,
    })
}

/// Affinity-weighted aggregation: refined(c, i, j) = sum_kl A[(i,j),(k,l)] * map(c, k, l),
/// applied `iterations` times.
pub fn refine(maps: &LocalizationMaps, aff: &PatchAffinity, iterations: usize) -> Result<LocalizationMaps> {
    let c = maps.num_classes();
    let n = maps.grid();
    let m = n * n;
    if aff.a.shape() != [m, m] {
        return Err(MctError::shape(format!(
            "affinity {:?} does not match {c}x{n}x{n} maps",
            aff.a.shape()
        )));
    }
    let at = tensor::transpose(&aff.a)?;
    let mut flat = maps.maps.reshape(&[c, m])?;
    for _ in 0..iterations {
        flat = tensor::matmul(&flat, &at)?;
    }
    Ok(LocalizationMaps {
        maps: flat.reshape(&[c, n, n])?,
        kind: MapKind::Refined,
        class_filter: maps.class_filter.clone(),
    })
}

/// PatchCAM maps: ReLU on the CAM feature maps, then per-class min-max.
pub fn patch_cam(f: &Tensor) -> Result<LocalizationMaps> {
    if f.rank() != 3 {
        return Err(MctError::shape(format!(
            "patch_cam expects C x N x N feature maps, got {:?}",
            f.shape()
        )));
    }
    let relu = f.map(|v| v.max(0.0));
    Ok(LocalizationMaps {
        maps: minmax_per_class(&relu),
        kind: MapKind::PatchCam,
        class_filter: vec![true; f.shape()[0]],
    })
}

/// Element-wise product of attention and PatchCAM maps, renormalized
/// per class.
pub fn fuse_maps(mct: &LocalizationMaps, pcam: &LocalizationMaps) -> Result<LocalizationMaps> {
    if mct.kind != MapKind::MctAttention || pcam.kind != MapKind::PatchCam {
        return Err(MctError::config(format!(
            "fuse_maps expects attention x patchcam, got {} x {}",
            mct.kind.as_str(),
            pcam.kind.as_str()
        )));
    }
    let prod = mct.maps.mul(&pcam.maps)?;
    Ok(LocalizationMaps {
        maps: minmax_per_class(&prod),
        kind: MapKind::Fused,
        class_filter: mct.class_filter.clone(),
    })
}

/// Bilinear upsampling (align-corners = false) of (C x h x w) score maps.
pub fn upsample_bilinear(maps: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    if maps.rank() != 3 {
        return Err(MctError::shape(format!(
            "upsample expects rank-3 maps, got {:?}",
            maps.shape()
        )));
    }
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    if th == h && tw == w {
        return Ok(maps.clone());
    }
    let d = maps.data();
    let mut out = vec![0.0; c * th * tw];
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for ci in 0..c {
        for oy in 0..th {
            let src_y = (oy as f64 + 0.5) * sy - 0.5;
            let y0 = src_y.floor();
            let fy = src_y - y0;
            let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
            let y1i = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..tw {
                let src_x = (ox as f64 + 0.5) * sx - 0.5;
                let x0 = src_x.floor();
                let fx = src_x - x0;
                let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
                let x1i = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
                let v00 = d[(ci * h + y0i) * w + x0i];
                let v01 = d[(ci * h + y0i) * w + x1i];
                let v10 = d[(ci * h + y1i) * w + x0i];
                let v11 = d[(ci * h + y1i) * w + x1i];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(ci * th + oy) * tw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// Writes one map plane as binary PGM (P5), values scaled x255.
pub fn write_pgm(path: impl AsRef<Path>, plane: &Tensor) -> Result<()> {
    if plane.rank() != 2 {
        return Err(MctError::shape(format!(
            "PGM export expects a 2-D plane, got {:?}",
            plane.shape()
        )));
    }
    let (h, w) = (plane.rows(), plane.cols());
    let mut buf = Vec::with_capacity(32 + h * w);
    write!(&mut buf, "P5\n{w} {h}\n255\n")?;
    for &v in plane.data() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path.as_ref(), buf)?;
    Ok(())
}
