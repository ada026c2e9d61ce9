//! Deterministic two-shape segmentation tasks.
//!
//! Each image holds one ellipse and one rectangle on a noisy background. The
//! mask marks whichever class the task names as the target, so the model has
//! to tell the classes apart rather than segment "anything bright".

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task configuration: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("could not place non-overlapping shapes after {0} attempts")]
    Placement(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Ellipse,
    Rectangle,
}

impl ShapeClass {
    pub fn other(self) -> Self {
        match self {
            ShapeClass::Ellipse => ShapeClass::Rectangle,
            ShapeClass::Rectangle => ShapeClass::Ellipse,
        }
    }

    /// Mean foreground intensity of the class.
    fn intensity(self) -> f64 {
        match self {
            ShapeClass::Ellipse => 0.9,
            ShapeClass::Rectangle => 0.55,
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Rectangle => "rectangle",
        })
    }
}

impl FromStr for ShapeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ellipse" => Ok(ShapeClass::Ellipse),
            "rectangle" => Ok(ShapeClass::Rectangle),
            other => Err(format!("unknown shape class {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub image_size: usize,
    pub target_class: ShapeClass,
    pub noise_std: f64,
    /// Fraction of the image area covered by each shape, drawn uniformly.
    pub shape_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            target_class: ShapeClass::Ellipse,
            noise_std: 0.05,
            shape_scale_range: (0.03, 0.20),
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn distractor_class(&self) -> ShapeClass {
        self.target_class.other()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.shape_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.25) {
            return Err(DataError::Config(format!(
                "shape_scale_range must satisfy 0 < min <= max <= 0.25, got ({lo}, {hi})"
            )));
        }
        if self.image_size < 16 {
            return Err(DataError::Config(format!(
                "image_size {} is too small, need at least 16",
                self.image_size
            )));
        }
        let min_pixels = lo * (self.image_size * self.image_size) as f64;
        if min_pixels < 9.0 {
            return Err(DataError::Config(format!(
                "image_size {} too small for shape_scale_range: smallest shape covers {min_pixels:.1} pixels",
                self.image_size
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(DataError::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Axis-aligned shape; `half_w`/`half_h` are semi-axes for ellipses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.half_w;
        let dy = (y - self.cy) / self.half_h;
        match self.class {
            ShapeClass::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeClass::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }

    /// Binary raster sampled at pixel centres.
    pub fn rasterize(&self, size: usize) -> Tensor {
        let mut data = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    data[y * size + x] = 1.0;
                }
            }
        }
        Tensor::new(vec![size, size], data).expect("square raster")
    }

    fn bbox_overlaps(&self, other: &Shape, margin: f64) -> bool {
        (self.cx - other.cx).abs() < self.half_w + other.half_w + margin
            && (self.cy - other.cy).abs() < self.half_h + other.half_h + margin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub target: Shape,
    pub distractor: Shape,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

fn sample_shape(rng: &mut ChaCha8Rng, class: ShapeClass, spec: &TaskSpec) -> Shape {
    let size = spec.image_size as f64;
    let (lo, hi) = spec.shape_scale_range;
    let fraction = rng.gen_range(lo..=hi);
    let aspect: f64 = rng.gen_range(0.6..=1.6);
    let area = fraction * size * size;
    // Ellipse area is π·a·b, rectangle area is 4·a·b.
    let ab = match class {
        ShapeClass::Ellipse => area / std::f64::consts::PI,
        ShapeClass::Rectangle => area / 4.0,
    };
    let half_w = (ab * aspect).sqrt();
    let half_h = ab / half_w;
    let cx = rng.gen_range(half_w..=size - half_w);
    let cy = rng.gen_range(half_h..=size - half_h);
    Shape {
        class,
        cx,
        cy,
        half_w,
        half_h,
    }
}

/// `n` samples, deterministic in `(spec, n)`.
pub fn generate(spec: &TaskSpec, n: usize) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let size = spec.image_size;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        // Geometry is drawn per class in fixed order, so swapping the target
        // class keeps the scene and flips only which shape is masked.
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let ellipse = sample_shape(&mut rng, ShapeClass::Ellipse, spec);
            let rect = sample_shape(&mut rng, ShapeClass::Rectangle, spec);
            if !ellipse.bbox_overlaps(&rect, 1.0) {
                placed = Some((ellipse, rect));
                break;
            }
        }
        let (ellipse, rect) = placed.ok_or(DataError::Placement(MAX_PLACEMENT_ATTEMPTS))?;
        let (target, distractor) = match spec.target_class {
            ShapeClass::Ellipse => (ellipse, rect),
            ShapeClass::Rectangle => (rect, ellipse),
        };

        let mut pixels = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let base = if ellipse.contains(px, py) {
                    ShapeClass::Ellipse.intensity()
                } else if rect.contains(px, py) {
                    ShapeClass::Rectangle.intensity()
                } else {
                    0.1
                };
                let jitter = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                pixels[y * size + x] = (base + jitter).clamp(0.0, 1.0);
            }
        }
        out.push(Sample {
            image: Tensor::new(vec![size, size], pixels).expect("square image"),
            mask: target.rasterize(size),
            target,
            distractor,
        });
    }
    Ok(out)
}

/// Disjoint `D1` / `D2` halves of the training set plus a held-out test set.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub d1: Vec<Sample>,
    pub d2: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Original positions of the `d1`, `d2` and `test` members.
    pub membership: [Vec<usize>; 3],
}

impl DataSplit {
    pub fn n_train(&self) -> usize {
        self.d1.len() + self.d2.len()
    }
}

/// Seeded shuffle; the first `n_train` go to `D1`/`D2` in equal halves and the
/// remainder forms the test set.
pub fn split(samples: Vec<Sample>, n_train: usize, seed: u64) -> Result<DataSplit, DataError> {
    if n_train == 0 || !n_train.is_multiple_of(2) {
        return Err(DataError::Split(format!(
            "n_train must be positive and even, got {n_train}"
        )));
    }
    if n_train >= samples.len() {
        return Err(DataError::Split(format!(
            "n_train {n_train} leaves no test samples out of {}",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = n_train / 2;
    let d1_ids = order[..half].to_vec();
    let d2_ids = order[half..n_train].to_vec();
    let test_ids = order[n_train..].to_vec();

    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<Sample> {
        ids.iter()
            .map(|&i| slots[i].take().expect("unique index"))
            .collect()
    };
    let d1 = take(&d1_ids);
    let d2 = take(&d2_ids);
    let test = take(&test_ids);
    Ok(DataSplit {
        d1,
        d2,
        test,
        membership: [d1_ids, d2_ids, test_ids],
    })
}

/// Writes `sample_NNN.pgm` (8-bit image) and `sample_NNN.pbm` (mask) pairs.
pub fn export_pnm(samples: &[Sample], dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
        let mut pgm = std::fs::File::create(dir.join(format!("sample_{i:03}.pgm")))?;
        writeln!(pgm, "P2\n{w} {h}\n255")?;
        for row in s.image.data().chunks(w) {
            let line: Vec<String> = row
                .iter()
                .map(|v| ((v * 255.0).round() as u8).to_string())
                .collect();
            writeln!(pgm, "{}", line.join(" "))?;
        }
        let mut pbm = std::fs::File::create(dir.join(format!("sample_{i:03}.pbm")))?;
        writeln!(pbm, "P1\n{w} {h}")?;
        for row in s.mask.data().chunks(w) {
            let line: Vec<&str> = row
                .iter()
                .map(|&v| if v > 0.5 { "1" } else { "0" })
                .collect();
            writeln!(pbm, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::dice_score;

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec {
            seed: 7,
            ..TaskSpec::default()
        };
        let a = generate(&spec, 4).unwrap();
        let b = generate(&spec, 4).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bit_eq(&y.image) && x.mask.bit_eq(&y.mask));
        }
    }

    #[test]
    fn masks_are_target_rasters_with_bounded_area() {
        let samples = generate(&TaskSpec::default(), 100).unwrap();
        for s in &samples {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.mask.bit_eq(&s.target.rasterize(32)));
            let frac = s.mask.sum() / 1024.0;
            assert!((0.02..=0.30).contains(&frac), "foreground fraction {frac}");
            let other = s.distractor.rasterize(32);
            assert_eq!(s.mask.dot(&other), 0.0, "shapes overlap");
            assert!(other.sum() > 0.0);
        }
    }

    #[test]
    fn all_background_predictor_scores_low() {
        let samples = generate(&TaskSpec::default(), 100).unwrap();
        let empty = Tensor::zeros(&[32, 32]);
        let mean: f64 = samples
            .iter()
            .map(|s| dice_score(&empty, &s.mask).unwrap())
            .sum::<f64>()
            / 100.0;
        assert!(mean < 0.1);
    }

    #[test]
    fn swapping_target_flips_the_mask() {
        let ell = TaskSpec {
            seed: 3,
            ..TaskSpec::default()
        };
        let rect = TaskSpec {
            target_class: ShapeClass::Rectangle,
            ..ell.clone()
        };
        for (a, b) in generate(&ell, 10)
            .unwrap()
            .iter()
            .zip(&generate(&rect, 10).unwrap())
        {
            assert!(a.image.bit_eq(&b.image));
            assert_eq!(a.mask.dot(&b.mask), 0.0);
            assert!(a.mask.bit_eq(&b.distractor.rasterize(32)));
            assert!(b.mask.bit_eq(&a.distractor.rasterize(32)));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let tiny = TaskSpec {
            image_size: 8,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&tiny, 1), Err(DataError::Config(_))));
        let tiny_shapes = TaskSpec {
            shape_scale_range: (0.001, 0.2),
            ..TaskSpec::default()
        };
        assert!(generate(&tiny_shapes, 1).is_err());
        assert!(generate(&TaskSpec::default(), 0).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        for n_train in [4, 8] {
            let samples = generate(&TaskSpec::default(), n_train + 20).unwrap();
            let s = split(samples, n_train, 1).unwrap();
            assert_eq!(s.d1.len(), n_train / 2);
            assert_eq!(s.d2.len(), n_train / 2);
            assert_eq!(s.test.len(), 20);
            let mut all: Vec<usize> = s.membership.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n_train + 20).collect::<Vec<_>>());
        }
        let a = split(generate(&TaskSpec::default(), 30).unwrap(), 4, 9).unwrap();
        let b = split(generate(&TaskSpec::default(), 30).unwrap(), 4, 9).unwrap();
        assert_eq!(a.membership, b.membership);
    }

    #[test]
    fn split_rejects_odd_or_oversized() {
        let samples = generate(&TaskSpec::default(), 10).unwrap();
        assert!(matches!(
            split(samples.clone(), 3, 0),
            Err(DataError::Split(_))
        ));
        assert!(split(samples, 10, 0).is_err());
    }

    #[test]
    fn pnm_export() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&TaskSpec::default(), 2).unwrap();
        export_pnm(&samples, dir.path()).unwrap();
        let pgm = std::fs::read_to_string(dir.path().join("sample_001.pgm")).unwrap();
        assert!(pgm.starts_with("P2\n32 32\n255\n"));
        assert_eq!(pgm.lines().count(), 3 + 32);
        let pbm = std::fs::read_to_string(dir.path().join("sample_000.pbm")).unwrap();
        let ones = pbm
            .lines()
            .skip(2)
            .flat_map(|l| l.split(' '))
            .filter(|&v| v == "1")
            .count();
        assert_eq!(ones as f64, samples[0].mask.sum());
    }
}
