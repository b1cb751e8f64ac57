//! Synthetic 2-D segmentation tasks and the Dice metric/loss.
//!
//! Every sample is a pure function of `(spec, index)`: a per-sample RNG is
//! seeded with `mix_seed(spec.seed, index)` and consumed in a fixed,
//! documented order, so datasets are reproducible and generation
//! parallelizes trivially.
//!
//! Per-sample draw order:
//! 1. `n_shapes = range_usize(1, 4)`;
//! 2. per shape: `kind = range_usize(0, K-1)` (0 disc, 1 rectangle,
//!    2 ring, limited to the K foreground classes), then the kind's
//!    geometry draws in the order coded below, then the two boundary
//!    wobble harmonics (`k1`, `phi1`, `k2`, `phi2`), then the intensity
//!    multiplier `uniform(0.9, 1.1)`;
//! 3. per pixel in row-major order: one `normal()` noise draw.
//!
//! Foreground class `c` paints intensity `contrast * (0.4 + 0.6 * c / K)`
//! (scaled by the per-shape multiplier) over a zero background, so class
//! identity is carried by intensity steps that `noise_std` can blur;
//! `boundary_jitter` wobbles shape outlines by up to that fraction of the
//! shape's characteristic radius. Later shapes overwrite earlier ones.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::engine::{self as eng, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, PortableRng};

/// Smoothing constant of the soft-Dice loss (numerator and denominator).
pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub image_size: usize,
    /// Background plus K foreground classes (disc, rectangle, ring); K <= 3.
    pub num_classes: usize,
    pub contrast: f64,
    pub noise_std: f64,
    pub boundary_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            image_size: 64,
            num_classes: 4,
            contrast: 1.0,
            noise_std: 0.35,
            boundary_jitter: 0.35,
            seed: 17,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Dataset("image_size must be >= 8".into()));
        }
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::Dataset(
                "num_classes must be in [2, 4] (background + up to 3 shape kinds)".into(),
            ));
        }
        if self.contrast <= 0.0 {
            return Err(Error::Dataset("contrast must be > 0".into()));
        }
        if self.noise_std < 0.0 || self.boundary_jitter < 0.0 {
            return Err(Error::Dataset("noise and jitter must be >= 0".into()));
        }
        Ok(())
    }

    pub fn foreground_classes(&self) -> usize {
        self.num_classes - 1
    }
}

/// One image/mask pair. Image layout `[1, size, size]`, mask `[size, size]`.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub image: Vec<f32>,
    pub mask: Vec<u32>,
    pub size: usize,
}

impl LabeledSample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.image.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(vec![1, 1, self.size, self.size], data)
            .expect("sample buffers are consistent")
    }
}

enum ShapeKind {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hx: f64, hy: f64, angle: f64 },
    Ring { cx: f64, cy: f64, r_out: f64, r_in: f64 },
}

struct Shape {
    kind: ShapeKind,
    class: u32,
    intensity: f64,
    wobble: (f64, f64, f64, f64), // k1, phi1, k2, phi2
    wobble_amp: f64,
}

impl Shape {
    /// Signed distance to the unjittered boundary (negative inside).
    fn sdf(&self, px: f64, py: f64) -> f64 {
        match self.kind {
            ShapeKind::Disc { cx, cy, r } => ((px - cx).hypot(py - cy)) - r,
            ShapeKind::Rect { cx, cy, hx, hy, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = px - cx;
                let dy = py - cy;
                let rx = c * dx + s * dy;
                let ry = -s * dx + c * dy;
                (rx.abs() - hx).max(ry.abs() - hy)
            }
            ShapeKind::Ring { cx, cy, r_out, r_in } => {
                let d = (px - cx).hypot(py - cy);
                (r_in - d).max(d - r_out)
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Disc { cx, cy, .. }
            | ShapeKind::Rect { cx, cy, .. }
            | ShapeKind::Ring { cx, cy, .. } => (cx, cy),
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center();
        let theta = (py - cy).atan2(px - cx);
        let (k1, phi1, k2, phi2) = self.wobble;
        let w = ((k1 * theta + phi1).sin() + (k2 * theta + phi2).sin()) * 0.5;
        self.sdf(px, py) < self.wobble_amp * w
    }
}

fn draw_shape(rng: &mut PortableRng, spec: &SyntheticTaskSpec) -> Shape {
    let s = spec.image_size as f64;
    let k = spec.foreground_classes();
    let kind_idx = rng.range_usize(0, k - 1);
    let cx = rng.uniform(0.18, 0.82) * s;
    let cy = rng.uniform(0.18, 0.82) * s;
    let (kind, char_size) = match kind_idx {
        0 => {
            let r = rng.uniform(0.08, 0.22) * s;
            (ShapeKind::Disc { cx, cy, r }, r)
        }
        1 => {
            let hx = rng.uniform(0.07, 0.20) * s;
            let hy = rng.uniform(0.07, 0.20) * s;
            let angle = rng.uniform(0.0, PI);
            (ShapeKind::Rect { cx, cy, hx, hy, angle }, hx.min(hy))
        }
        _ => {
            let r_out = rng.uniform(0.10, 0.24) * s;
            let thickness = rng.uniform(0.30, 0.55) * r_out;
            (
                ShapeKind::Ring { cx, cy, r_out, r_in: r_out - thickness },
                thickness,
            )
        }
    };
    let k1 = rng.range_usize(2, 5) as f64;
    let phi1 = rng.uniform(0.0, 2.0 * PI);
    let k2 = rng.range_usize(3, 7) as f64;
    let phi2 = rng.uniform(0.0, 2.0 * PI);
    let class = (kind_idx + 1) as u32;
    let base = spec.contrast * (0.4 + 0.6 * class as f64 / k as f64);
    let intensity = base * rng.uniform(0.9, 1.1);
    Shape {
        kind,
        class,
        intensity,
        wobble: (k1, phi1, k2, phi2),
        wobble_amp: spec.boundary_jitter * char_size,
    }
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &SyntheticTaskSpec, index: usize) -> LabeledSample {
    let mut rng = PortableRng::seed_from_u64(mix_seed(spec.seed, index as u64));
    let size = spec.image_size;
    let n_shapes = rng.range_usize(1, 4);
    let shapes: Vec<Shape> = (0..n_shapes).map(|_| draw_shape(&mut rng, spec)).collect();

    let mut image = vec![0f32; size * size];
    let mut mask = vec![0u32; size * size];
    for shape in &shapes {
        for y in 0..size {
            for x in 0..size {
                // Pixel centers.
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                if shape.contains(px, py) {
                    let i = y * size + x;
                    mask[i] = shape.class;
                    image[i] = shape.intensity as f32;
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v += (spec.noise_std * rng.normal()) as f32;
    }
    LabeledSample { image, mask, size }
}

/// Generates samples `offset .. offset + n` (split ranges are disjoint
/// index ranges of one underlying sequence).
pub fn generate_range(spec: &SyntheticTaskSpec, offset: usize, n: usize) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Dataset("cannot generate an empty dataset".into()));
    }
    Ok((offset..offset + n)
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect())
}

/// Generates the first `n` samples.
pub fn generate_dataset(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<LabeledSample>> {
    generate_range(spec, 0, n)
}

// ---------------------------------------------------------------------------
// Dice

/// How classes empty in both prediction and ground truth enter the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsentClassPolicy {
    /// Excluded from the mean (the default convention here).
    Exclude,
    /// Scored as a perfect 1.0.
    ScoreOne,
}

#[derive(Clone, Debug)]
pub struct DiceScore {
    /// Per foreground class (index 0 is class 1); `None` when the class is
    /// absent from both masks under the `Exclude` policy.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the included foreground classes; `None` if none remain.
    pub mean_foreground: Option<f64>,
}

/// Hard Dice between two integer masks.
pub fn dice_score(
    pred: &[u32],
    truth: &[u32],
    num_classes: usize,
    policy: AbsentClassPolicy,
) -> Result<DiceScore> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "dice_score: {} vs {} pixels",
            pred.len(),
            truth.len()
        )));
    }
    let fg = num_classes.saturating_sub(1);
    let mut inter = vec![0usize; fg];
    let mut pred_n = vec![0usize; fg];
    let mut true_n = vec![0usize; fg];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if p as usize >= num_classes || t as usize >= num_classes {
            return Err(Error::Shape(format!(
                "mask value out of range for {num_classes} classes"
            )));
        }
        if p > 0 {
            pred_n[p as usize - 1] += 1;
        }
        if t > 0 {
            true_n[t as usize - 1] += 1;
        }
        if p == t && p > 0 {
            inter[p as usize - 1] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(fg);
    for c in 0..fg {
        let denom = pred_n[c] + true_n[c];
        if denom == 0 {
            per_class.push(match policy {
                AbsentClassPolicy::Exclude => None,
                AbsentClassPolicy::ScoreOne => Some(1.0),
            });
        } else {
            per_class.push(Some(2.0 * inter[c] as f64 / denom as f64));
        }
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_foreground = if included.is_empty() {
        None
    } else {
        Some(included.iter().sum::<f64>() / included.len() as f64)
    };
    Ok(DiceScore {
        per_class,
        mean_foreground,
    })
}

/// Argmax over the channel axis, one mask per batch element.
pub fn argmax_masks<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Vec<u32>>> {
    let [b, c, h, w] = logits.shape4()?;
    let hw = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let base = bi * c * hw;
        let mut mask = vec![0u32; hw];
        for (p, m) in mask.iter_mut().enumerate() {
            let mut best = data[base + p];
            let mut best_c = 0u32;
            for ci in 1..c {
                let v = data[base + ci * hw + p];
                if v > best {
                    best = v;
                    best_c = ci as u32;
                }
            }
            *m = best_c;
        }
        out.push(mask);
    }
    Ok(out)
}

/// Argmax of a single-sample `[1, c, h, w]` logits tensor.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u32>> {
    let [b, ..] = logits.shape4()?;
    if b != 1 {
        return Err(Error::Shape("argmax_mask expects a single sample".into()));
    }
    Ok(argmax_masks(logits)?.pop().expect("one mask for one sample"))
}

/// Equally weighted soft-Dice plus cross-entropy, both on softmaxed
/// logits. Differentiable; the trainer's objective.
pub fn dice_ce_loss<T: Scalar>(logits: &Tensor<T>, mask: &Arc<Vec<u32>>) -> Result<Tensor<T>> {
    let ce = eng::cross_entropy_with_softmax(logits, mask)?;
    let dice = eng::soft_dice_with_softmax(logits, mask, DICE_SMOOTH)?;
    eng::add(&ce, &dice)
}

// ---------------------------------------------------------------------------
// Dataset cache
//
// One file per split: "RCYD1" magic line, a spec-echo line, a count line,
// then per sample the raw little-endian f32 image followed by one byte
// per mask pixel.

pub const DATASET_MAGIC: &str = "RCYD1";

fn spec_echo(spec: &SyntheticTaskSpec) -> String {
    format!(
        "image_size={} num_classes={} contrast={} noise_std={} boundary_jitter={} seed={}",
        spec.image_size,
        spec.num_classes,
        spec.contrast,
        spec.noise_std,
        spec.boundary_jitter,
        spec.seed
    )
}

pub fn save_split(
    spec: &SyntheticTaskSpec,
    split: &str,
    offset: usize,
    samples: &[LabeledSample],
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    writeln!(w, "{DATASET_MAGIC}").map_err(io_err)?;
    writeln!(w, "spec {}", spec_echo(spec)).map_err(io_err)?;
    writeln!(w, "split {split} offset={offset} count={}", samples.len()).map_err(io_err)?;
    for s in samples {
        for &v in &s.image {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        for &m in &s.mask {
            w.write_all(&[m as u8]).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn load_split(path: &Path, expected_spec: &SyntheticTaskSpec) -> Result<Vec<LabeledSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io_err)?;
    if line.trim_end() != DATASET_MAGIC {
        return Err(Error::Dataset(format!("bad magic in {}", path.display())));
    }
    line.clear();
    r.read_line(&mut line).map_err(io_err)?;
    let echo = line.trim_end();
    let want = format!("spec {}", spec_echo(expected_spec));
    if echo != want {
        return Err(Error::Dataset(format!(
            "cached dataset spec mismatch in {}: {echo:?} vs {want:?}",
            path.display()
        )));
    }
    line.clear();
    r.read_line(&mut line).map_err(io_err)?;
    let count: usize = line
        .trim_end()
        .rsplit_once("count=")
        .and_then(|(_, c)| c.parse().ok())
        .ok_or_else(|| Error::Dataset(format!("bad split header: {line:?}")))?;
    let size = expected_spec.image_size;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut img_bytes = vec![0u8; size * size * 4];
        r.read_exact(&mut img_bytes).map_err(io_err)?;
        let image: Vec<f32> = img_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut mask_bytes = vec![0u8; size * size];
        r.read_exact(&mut mask_bytes).map_err(io_err)?;
        let mask: Vec<u32> = mask_bytes.iter().map(|&b| b as u32).collect();
        samples.push(LabeledSample { image, mask, size });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticTaskSpec::default();
        let a = generate_sample(&spec, 3);
        let b = generate_sample(&spec, 3);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let c = generate_sample(&spec, 4);
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn masks_are_valid_and_images_finite() {
        let spec = SyntheticTaskSpec::default();
        for i in 0..16 {
            let s = generate_sample(&spec, i);
            assert!(s.mask.iter().all(|&m| (m as usize) < spec.num_classes));
            assert!(s.image.iter().all(|v| v.is_finite()));
            // Every sample has at least one foreground pixel.
            assert!(s.mask.iter().any(|&m| m > 0), "sample {i} is empty");
        }
    }

    #[test]
    fn two_class_single_disc_has_two_values() {
        let spec = SyntheticTaskSpec {
            num_classes: 2,
            noise_std: 0.0,
            boundary_jitter: 0.0,
            ..Default::default()
        };
        for i in 0..8 {
            let s = generate_sample(&spec, i);
            let mut values: Vec<u32> = s.mask.clone();
            values.sort_unstable();
            values.dedup();
            assert_eq!(values, vec![0, 1], "sample {i}");
        }
    }

    #[test]
    fn noise_free_masks_recoverable_by_thresholding() {
        let spec = SyntheticTaskSpec {
            num_classes: 2,
            contrast: 1.0,
            noise_std: 0.0,
            boundary_jitter: 0.0,
            ..Default::default()
        };
        // With one foreground class the intensity is contrast * 1.0 exactly
        // (up to the 0.9..1.1 multiplier), so thresholding at half recovers
        // the mask.
        for i in 0..8 {
            let s = generate_sample(&spec, i);
            let recovered: Vec<u32> = s.image.iter().map(|&v| (v > 0.5) as u32).collect();
            assert_eq!(recovered, s.mask);
        }
    }

    #[test]
    fn dice_examples() {
        // Perfect overlap with all classes present.
        let m = vec![0, 1, 2, 3, 1, 2, 3, 0];
        let d = dice_score(&m, &m, 4, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(d.mean_foreground, Some(1.0));

        // Disjoint single-class masks.
        let a = vec![1, 1, 0, 0];
        let b = vec![0, 0, 1, 1];
        let d = dice_score(&a, &b, 2, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(d.mean_foreground, Some(0.0));

        // 2 true pixels, 4 predicted, 2 overlapping: 2*2/(4+2).
        let truth = vec![0, 1, 1, 0, 0, 0];
        let pred = vec![1, 1, 1, 1, 0, 0];
        let d = dice_score(&pred, &truth, 2, AbsentClassPolicy::Exclude).unwrap();
        let got = d.mean_foreground.unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        let mut rng = crate::rng::PortableRng::seed_from_u64(5);
        for _ in 0..20 {
            let a: Vec<u32> = (0..64).map(|_| rng.bounded(3) as u32).collect();
            let b: Vec<u32> = (0..64).map(|_| rng.bounded(3) as u32).collect();
            let ab = dice_score(&a, &b, 3, AbsentClassPolicy::Exclude).unwrap();
            let ba = dice_score(&b, &a, 3, AbsentClassPolicy::Exclude).unwrap();
            assert_eq!(ab.mean_foreground, ba.mean_foreground);
            if let Some(m) = ab.mean_foreground {
                assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn absent_class_conventions() {
        let empty = vec![0u32; 8];
        let excl = dice_score(&empty, &empty, 3, AbsentClassPolicy::Exclude).unwrap();
        assert_eq!(excl.mean_foreground, None);
        assert!(excl.per_class.iter().all(|c| c.is_none()));
        let one = dice_score(&empty, &empty, 3, AbsentClassPolicy::ScoreOne).unwrap();
        assert_eq!(one.mean_foreground, Some(1.0));
    }

    #[test]
    fn strong_correct_logits_give_near_zero_loss() {
        let mask: Arc<Vec<u32>> = Arc::new(vec![0, 1, 1, 0]);
        let mut logits = vec![0f32; 2 * 4];
        for (p, &m) in mask.iter().enumerate() {
            logits[m as usize * 4 + p] = 20.0;
        }
        let t = Tensor::from_vec(vec![1, 2, 2, 2], logits).unwrap();
        let loss = dice_ce_loss(&t, &mask).unwrap().item();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn loss_decreases_towards_true_class() {
        // Single pixel, moving probability mass toward the true class.
        let mask: Arc<Vec<u32>> = Arc::new(vec![1]);
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let z = step as f32 * 0.5;
            let t = Tensor::from_vec(vec![1, 2, 1, 1], vec![0.0, z]).unwrap();
            let loss = dice_ce_loss(&t, &mask).unwrap().item() as f64;
            assert!(loss < prev, "loss must fall along the ray");
            prev = loss;
        }
    }

    #[test]
    fn split_roundtrip() {
        let spec = SyntheticTaskSpec::default();
        let samples = generate_range(&spec, 5, 3).unwrap();
        let dir = std::env::temp_dir().join("rcyn_split_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("val.rcyd");
        save_split(&spec, "val", 5, &samples, &path).unwrap();
        let loaded = load_split(&path, &spec).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
        // Mismatched spec echo is rejected.
        let other = SyntheticTaskSpec {
            seed: 18,
            ..spec.clone()
        };
        assert!(load_split(&path, &other).is_err());
        std::fs::remove_file(&path).ok();
    }
}
