//! Seed-quality and localization metrics: per-class IoU and mIoU with
//! FP/FN decomposition over a split, and the threshold-sweep pIoU/PxAP
//! pair for score maps.

use crate::error::{MctError, Result};
use crate::tensor::Tensor;

/// Number of thresholds in the pIoU/PxAP sweep: 0.00, 0.01, ..., 1.00.
pub const SWEEP_POINTS: usize = 101;

pub fn sweep_threshold(k: usize) -> f64 {
    k as f64 / 100.0
}

/// Hard per-pixel class assignment from score maps: argmax over present
/// classes if the best score clears `tau`, else background 0. Ties go to
/// the lowest class index.
pub fn seed_prediction(scores: &Tensor, class_filter: &[bool], tau: f64) -> Vec<u8> {
    let (c, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let d = scores.data();
    let mut pred = vec![0u8; h * w];
    for p in 0..h * w {
        let mut best = f64::NEG_INFINITY;
        let mut best_c = None;
        for ci in 0..c {
            if !class_filter[ci] {
                continue;
            }
            let v = d[ci * h * w + p];
            if v > best {
                best = v;
                best_c = Some(ci);
            }
        }
        if let Some(ci) = best_c {
            if best >= tau {
                pred[p] = ci as u8 + 1;
            }
        }
    }
    pred
}

/// Accumulates pixel confusion counts over a split. Class 0 is background;
/// foreground classes are 1..=C.
pub struct ConfusionAccum {
    classes: usize, // C+1 including background
    counts: Vec<u64>,
}

impl ConfusionAccum {
    pub fn new(num_foreground: usize) -> Self {
        let classes = num_foreground + 1;
        ConfusionAccum {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add_image(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(MctError::shape(format!(
                "pred has {} pixels, gt has {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= self.classes || g as usize >= self.classes {
                return Err(MctError::shape(format!(
                    "class value out of range: pred={p} gt={g} classes={}",
                    self.classes
                )));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    fn intersection(&self, c: usize) -> u64 {
        self.counts[c * self.classes + c]
    }

    fn pred_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.counts[g * self.classes + c]).sum()
    }

    fn gt_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.counts[c * self.classes + p]).sum()
    }

    /// Per-class IoU; None for classes absent from both pred and gt.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let inter = self.intersection(c);
                let union = self.pred_total(c) + self.gt_total(c) - inter;
                if union == 0 {
                    None
                } else {
                    Some(inter as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean over classes present somewhere in the split (background included).
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    /// Micro-averaged over the split, foreground classes only:
    /// FP = false-positive pixels / total, FN = false-negative pixels / total.
    pub fn fp_fn(&self) -> (f64, f64) {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return (0.0, 0.0);
        }
        let mut fp = 0u64;
        let mut fneg = 0u64;
        for c in 1..self.classes {
            fp += self.pred_total(c) - self.intersection(c);
            fneg += self.gt_total(c) - self.intersection(c);
        }
        (fp as f64 / total as f64, fneg as f64 / total as f64)
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class threshold-sweep counts for pIoU and PxAP: for every threshold,
/// true positives, predicted positives, and ground-truth positives.
pub struct SweepAccum {
    classes: usize,
    tp: Vec<u64>,       // classes x SWEEP_POINTS
    pred_pos: Vec<u64>, // classes x SWEEP_POINTS
    gt_pos: Vec<u64>,   // per class
}

impl SweepAccum {
    pub fn new(num_foreground: usize) -> Self {
        SweepAccum {
            classes: num_foreground,
            tp: vec![0; num_foreground * SWEEP_POINTS],
            pred_pos: vec![0; num_foreground * SWEEP_POINTS],
            gt_pos: vec![0; num_foreground],
        }
    }

    /// `scores`: (C x h x w) in [0,1]; `gt`: per-pixel class in 0..=C.
    pub fn add_image(&mut self, scores: &Tensor, gt: &[u8]) -> Result<()> {
        let (c, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
        if c != self.classes || gt.len() != h * w {
            return Err(MctError::shape(format!(
                "scores {:?} vs gt of {} pixels for {} classes",
                scores.shape(),
                gt.len(),
                self.classes
            )));
        }
        let d = scores.data();
        for ci in 0..c {
            let plane = &d[ci * h * w..(ci + 1) * h * w];
            for (p, (&s, &g)) in plane.iter().zip(gt.iter()).enumerate() {
                let _ = p;
                let is_gt = g as usize == ci + 1;
                if is_gt {
                    self.gt_pos[ci] += 1;
                }
                for k in 0..SWEEP_POINTS {
                    if s >= sweep_threshold(k) {
                        self.pred_pos[ci * SWEEP_POINTS + k] += 1;
                        if is_gt {
                            self.tp[ci * SWEEP_POINTS + k] += 1;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// pIoU per class: max over thresholds of IoU(score >= t, gt).
    /// None for classes with empty ground truth (skipped with a warning
    /// upstream).
    pub fn piou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|ci| {
                if self.gt_pos[ci] == 0 {
                    return None;
                }
                let mut best = 0.0f64;
                for k in 0..SWEEP_POINTS {
                    let tp = self.tp[ci * SWEEP_POINTS + k];
                    let union = self.pred_pos[ci * SWEEP_POINTS + k] + self.gt_pos[ci] - tp;
                    if union > 0 {
                        best = best.max(tp as f64 / union as f64);
                    }
                }
                Some(best)
            })
            .collect()
    }

    /// PxAP per class: area under the pixel precision-recall curve from the
    /// same sweep, trapezoidal over recall. Empty predictions count as
    /// precision 1; the curve is anchored at (recall 0, precision 1).
    pub fn pxap_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|ci| {
                if self.gt_pos[ci] == 0 {
                    return None;
                }
                // thresholds descending -> recall non-decreasing
                let mut points = Vec::with_capacity(SWEEP_POINTS + 1);
                points.push((0.0, 1.0));
                for k in (0..SWEEP_POINTS).rev() {
                    let tp = self.tp[ci * SWEEP_POINTS + k];
                    let pp = self.pred_pos[ci * SWEEP_POINTS + k];
                    let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
                    let recall = tp as f64 / self.gt_pos[ci] as f64;
                    points.push((recall, precision));
                }
                points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                let mut area = 0.0;
                for pair in points.windows(2) {
                    let (r0, p0) = pair[0];
                    let (r1, p1) = pair[1];
                    area += (r1 - r0) * (p0 + p1) / 2.0;
                }
                Some(area)
            })
            .collect()
    }

    /// Classes whose ground truth is empty across the split.
    pub fn skipped_classes(&self) -> Vec<usize> {
        (0..self.classes).filter(|&c| self.gt_pos[c] == 0).collect()
    }
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = values.iter().copied().flatten().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Aggregated metrics for one evaluation run.
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub piou: Option<f64>,
    pub pxap: Option<f64>,
    pub tau: f64,
    pub kind: String,
    pub num_images: usize,
    pub skipped_classes: Vec<usize>,
}

impl MetricReport {
    pub fn from_accums(
        conf: &ConfusionAccum,
        sweep: &SweepAccum,
        tau: f64,
        kind: &str,
        num_images: usize,
    ) -> MetricReport {
        let (fp, fneg) = conf.fp_fn();
        MetricReport {
            per_class_iou: conf.per_class_iou(),
            miou: conf.miou(),
            fp_rate: fp,
            fn_rate: fneg,
            piou: mean_opt(&sweep.piou_per_class()),
            pxap: mean_opt(&sweep.pxap_per_class()),
            tau,
            kind: kind.to_string(),
            num_images,
            skipped_classes: sweep.skipped_classes(),
        }
    }

    /// `metric,class,value` rows; deterministic.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,class,value\n");
        let class_name = |c: usize| {
            if c == 0 {
                "background".to_string()
            } else {
                format!("class{}", c - 1)
            }
        };
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("iou,{},{:.6}\n", class_name(c), v)),
                None => s.push_str(&format!("iou,{},absent\n", class_name(c))),
            }
        }
        s.push_str(&format!("miou,,{:.6}\n", self.miou));
        s.push_str(&format!("fp_rate,,{:.6}\n", self.fp_rate));
        s.push_str(&format!("fn_rate,,{:.6}\n", self.fn_rate));
        match self.piou {
            Some(v) => s.push_str(&format!("piou,,{:.6}\n", v)),
            None => s.push_str("piou,,absent\n"),
        }
        match self.pxap {
            Some(v) => s.push_str(&format!("pxap,,{:.6}\n", v)),
            None => s.push_str("pxap,,absent\n"),
        }
        s.push_str(&format!("tau,,{}\n", self.tau));
        s.push_str(&format!("kind,,{}\n", self.kind));
        s.push_str(&format!("images,,{}\n", self.num_images));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "seed evaluation: kind={} tau={} images={}\n",
            self.kind, self.tau, self.num_images
        ));
        s.push_str("  class        IoU\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let name = if c == 0 {
                "background".to_string()
            } else {
                format!("class{}", c - 1)
            };
            match iou {
                Some(v) => s.push_str(&format!("  {name:<11} {v:.4}\n")),
                None => s.push_str(&format!("  {name:<11} absent\n")),
            }
        }
        s.push_str(&format!("  mIoU  {:.4}\n", self.miou));
        s.push_str(&format!("  FP    {:.4}\n", self.fp_rate));
        s.push_str(&format!("  FN    {:.4}\n", self.fn_rate));
        if let Some(v) = self.piou {
            s.push_str(&format!("  pIoU  {v:.4}\n"));
        }
        if let Some(v) = self.pxap {
            s.push_str(&format!("  PxAP  {v:.4}\n"));
        }
        if !self.skipped_classes.is_empty() {
            s.push_str(&format!(
                "  warning: classes with empty ground truth skipped from pIoU/PxAP: {:?}\n",
                self.skipped_classes
            ));
        }
        s
    }
}
