//! Deterministic generator of multi-label synthetic images with exact
//! pixel ground truth: colored hard-edged shapes on a textured background.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_float, parse_kv_lines, parse_num, parse_u64};
use crate::error::{MctError, Result};
use crate::mct1;
use crate::tensor::Tensor;

/// Shape archetypes by class index; the first C are used.
pub const ARCHETYPES: [&str; 5] = ["disk", "square", "triangle", "ring", "cross"];

/// Class-specific base colors (RGB in [0,1]); instances get jittered copies.
const BASE_COLORS: [[f64; 3]; 5] = [
    [0.85, 0.18, 0.15], // disk: red
    [0.15, 0.75, 0.25], // square: green
    [0.20, 0.35, 0.90], // triangle: blue
    [0.90, 0.80, 0.15], // ring: yellow
    [0.80, 0.20, 0.80], // cross: magenta
];

/// Minimum fraction of an object's drawn pixels that must stay visible.
const MIN_SURVIVAL: f64 = 0.25;
/// Minimum background fraction per image.
const MIN_BACKGROUND: f64 = 0.30;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object half-extent range, pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Background noise amplitude and color-jitter driver, in [0,1].
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_samples: 400,
            image_size: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 2,
            min_size: 12,
            max_size: 18,
            noise: 0.30,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(MctError::Config(m));
        if self.num_samples == 0 {
            return e("num_samples must be positive".to_string());
        }
        if !(2..=5).contains(&self.num_classes) {
            return e(format!(
                "num_classes must lie in [2,5] (archetypes: {:?}), got {}",
                ARCHETYPES, self.num_classes
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return e(format!(
                "object count range [{},{}] invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > self.num_classes {
            return e(format!(
                "max_objects {} exceeds distinct classes {}",
                self.max_objects, self.num_classes
            ));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return e(format!(
                "size range [{},{}] invalid",
                self.min_size, self.max_size
            ));
        }
        if self.image_size < 2 * self.max_size + 2 {
            return e(format!(
                "image_size {} too small for max_size {}",
                self.image_size, self.max_size
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return e(format!("noise must lie in [0,1], got {}", self.noise));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "num_samples={}\nimage_size={}\nnum_classes={}\nmin_objects={}\nmax_objects={}\nmin_size={}\nmax_size={}\nnoise={}\nseed={}\n",
            self.num_samples,
            self.image_size,
            self.num_classes,
            self.min_objects,
            self.max_objects,
            self.min_size,
            self.max_size,
            self.noise,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = DatasetSpec::default();
        for (k, v) in parse_kv_lines(text)? {
            match k.as_str() {
                "num_samples" => spec.num_samples = parse_num(&k, &v)?,
                "image_size" => spec.image_size = parse_num(&k, &v)?,
                "num_classes" => spec.num_classes = parse_num(&k, &v)?,
                "min_objects" => spec.min_objects = parse_num(&k, &v)?,
                "max_objects" => spec.max_objects = parse_num(&k, &v)?,
                "min_size" => spec.min_size = parse_num(&k, &v)?,
                "max_size" => spec.max_size = parse_num(&k, &v)?,
                "noise" => spec.noise = parse_float(&k, &v)?,
                "seed" => spec.seed = parse_u64(&k, &v)?,
                other => return Err(MctError::format(format!("unknown dataset key '{other}'"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// One synthetic image with its multi-hot labels and exact pixel mask
/// (0 = background, c+1 = class c).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn label_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.labels.len()], |i| self.labels[i] as f64)
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

fn paint_shape(mask: &mut [u8], s: usize, class: usize, cy: usize, cx: usize, half: usize) {
    let (cyf, cxf, h) = (cy as f64, cx as f64, half as f64);
    let value = class as u8 + 1;
    let y0 = cy.saturating_sub(half);
    let y1 = (cy + half).min(s - 1);
    let x0 = cx.saturating_sub(half);
    let x1 = (cx + half).min(s - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cyf;
            let dx = x as f64 - cxf;
            let inside = match class {
                0 => dy * dy + dx * dx <= h * h,
                1 => dy.abs() <= h * 0.9 && dx.abs() <= h * 0.9,
                // triangle: apex at the top, base at the bottom
                2 => dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0,
                3 => {
                    let r2 = dy * dy + dx * dx;
                    r2 <= h * h && r2 >= (0.55 * h) * (0.55 * h)
                }
                4 => (dx.abs() <= 0.35 * h && dy.abs() <= h) || (dy.abs() <= 0.35 * h && dx.abs() <= h),
                _ => unreachable!("archetype bound checked by spec"),
            };
            if inside {
                mask[y * s + x] = value;
            }
        }
    }
}

struct Placement {
    class: usize,
    cy: usize,
    cx: usize,
    half: usize,
}

/// Places the chosen classes so that every object keeps at least
/// MIN_SURVIVAL of its pixels after later objects overdraw it and the
/// background keeps at least MIN_BACKGROUND of the image.
fn compose_mask(rng: &mut ChaCha8Rng, spec: &DatasetSpec, classes: &[usize]) -> Result<(Vec<u8>, Vec<Placement>)> {
    let s = spec.image_size;
    'attempt: for _ in 0..200 {
        let placements: Vec<Placement> = classes
            .iter()
            .map(|&class| {
                let half = rng.random_range(spec.min_size..=spec.max_size);
                let cy = rng.random_range(half..s - half);
                let cx = rng.random_range(half..s - half);
                Placement { class, cy, cx, half }
            })
            .collect();
        let mut mask = vec![0u8; s * s];
        let mut drawn = vec![0usize; placements.len()];
        for (i, pl) in placements.iter().enumerate() {
            let mut solo = vec![0u8; s * s];
            paint_shape(&mut solo, s, pl.class, pl.cy, pl.cx, pl.half);
            drawn[i] = solo.iter().filter(|&&v| v != 0).count();
            paint_shape(&mut mask, s, pl.class, pl.cy, pl.cx, pl.half);
        }
        // survival check: later-drawn wins, earlier must keep >= 25%
        for (i, pl) in placements.iter().enumerate() {
            let visible = mask.iter().filter(|&&v| v == pl.class as u8 + 1).count();
            if drawn[i] == 0 || (visible as f64) < MIN_SURVIVAL * drawn[i] as f64 {
                continue 'attempt;
            }
        }
        let bg = mask.iter().filter(|&&v| v == 0).count();
        if (bg as f64) < MIN_BACKGROUND * (s * s) as f64 {
            continue 'attempt;
        }
        return Ok((mask, placements));
    }
    Err(MctError::config(format!(
        "could not place {} objects of size [{},{}] on a {}px image",
        classes.len(),
        spec.min_size,
        spec.max_size,
        spec.image_size
    )))
}

fn generate_sample(spec: &DatasetSpec, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index));
    let s = spec.image_size;
    let c = spec.num_classes;

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut all: Vec<usize> = (0..c).collect();
    all.shuffle(&mut rng);
    let classes: Vec<usize> = all[..count].to_vec();

    let (mask, placements) = compose_mask(&mut rng, spec, &classes)?;

    // textured background: grey base, gentle gradient, per-pixel noise
    let base = 0.38 + rng.random::<f64>() * 0.18;
    let gx = (rng.random::<f64>() - 0.5) * 0.12;
    let gy = (rng.random::<f64>() - 0.5) * 0.12;
    let mut image = vec![0.0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let shade = base + gx * (x as f64 / s as f64 - 0.5) + gy * (y as f64 / s as f64 - 0.5);
            for ch in 0..3 {
                let n = (rng.random::<f64>() - 0.5) * 2.0 * spec.noise;
                image[(ch * s + y) * s + x] = (shade + n).clamp(0.0, 1.0);
            }
        }
    }

    // per-instance color jitter; at high noise, color stops being a clean cue
    let jitter_amp = 0.05 + 0.5 * spec.noise;
    let mut colors = vec![[0.0; 3]; placements.len()];
    for (i, pl) in placements.iter().enumerate() {
        let base = BASE_COLORS[pl.class];
        for ch in 0..3 {
            let j = (rng.random::<f64>() - 0.5) * 2.0 * jitter_amp;
            colors[i][ch] = (base[ch] + j).clamp(0.0, 1.0);
        }
    }
    // color by final mask ownership so hard edges stay exact
    let mut class_color = vec![[0.0; 3]; c];
    for (i, pl) in placements.iter().enumerate() {
        class_color[pl.class] = colors[i];
    }
    // object interiors carry the same per-pixel noise amplitude as the
    // background, so a single patch is an unreliable class cue
    for y in 0..s {
        for x in 0..s {
            let v = mask[y * s + x];
            if v != 0 {
                let col = class_color[v as usize - 1];
                for ch in 0..3 {
                    let n = (rng.random::<f64>() - 0.5) * 2.0 * spec.noise;
                    image[(ch * s + y) * s + x] = (col[ch] + n).clamp(0.0, 1.0);
                }
            }
        }
    }

    let mut labels = vec![0u8; c];
    for &v in &mask {
        if v != 0 {
            labels[v as usize - 1] = 1;
        }
    }

    Ok(Sample {
        image: Tensor::new(vec![3, s, s], image)?,
        labels,
        mask,
    })
}

/// Deterministic per seed; sample i uses the derived seed `seed + i`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.num_samples as u64)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    /// Writes `images.mct1`, `labels.mct1`, `masks.mct1`, `manifest.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let n = self.samples.len();
        let s = self.spec.image_size;
        let c = self.spec.num_classes;

        let mut images = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n * c);
        let mut masks = Vec::with_capacity(n * s * s);
        for sample in &self.samples {
            images.extend_from_slice(sample.image.data());
            labels.extend(sample.labels.iter().map(|&v| v as f64));
            masks.extend(sample.mask.iter().map(|&v| v as f64));
        }
        mct1::write_file(dir.join("images.mct1"), &Tensor::new(vec![n, 3, s, s], images)?)?;
        mct1::write_file(dir.join("labels.mct1"), &Tensor::new(vec![n, c], labels)?)?;
        mct1::write_file(dir.join("masks.mct1"), &Tensor::new(vec![n, s, s], masks)?)?;
        fs::write(dir.join("manifest.txt"), self.spec.to_kv())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let manifest = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| {
            MctError::format(format!("cannot read {}: {e}", dir.join("manifest.txt").display()))
        })?;
        let spec = DatasetSpec::from_kv(&manifest)?;
        let images = mct1::read_file(dir.join("images.mct1"))?;
        let labels = mct1::read_file(dir.join("labels.mct1"))?;
        let masks = mct1::read_file(dir.join("masks.mct1"))?;

        let n = spec.num_samples;
        let s = spec.image_size;
        let c = spec.num_classes;
        if images.shape() != [n, 3, s, s] || labels.shape() != [n, c] || masks.shape() != [n, s, s] {
            return Err(MctError::format(format!(
                "dataset tensor shapes {:?}/{:?}/{:?} disagree with manifest",
                images.shape(),
                labels.shape(),
                masks.shape()
            )));
        }

        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let img =
                Tensor::new(vec![3, s, s], images.data()[i * 3 * s * s..(i + 1) * 3 * s * s].to_vec())?;
            let lab: Vec<u8> = labels.data()[i * c..(i + 1) * c]
                .iter()
                .map(|&v| v as u8)
                .collect();
            let mask: Vec<u8> = masks.data()[i * s * s..(i + 1) * s * s]
                .iter()
                .map(|&v| v as u8)
                .collect();
            for &v in &mask {
                if v as usize > c {
                    return Err(MctError::format(format!(
                        "mask value {v} exceeds class count {c}"
                    )));
                }
            }
            // labels[c] = 1 iff mask contains c+1
            for (ci, &l) in lab.iter().enumerate() {
                let present = mask.iter().any(|&v| v as usize == ci + 1);
                if (l == 1) != present {
                    return Err(MctError::format(format!(
                        "sample {i}: label/mask inconsistency for class {ci}"
                    )));
                }
            }
            samples.push(Sample {
                image: img,
                labels: lab,
                mask,
            });
        }
        Ok(Dataset { spec, samples })
    }
}
