//! Synthetic binary tasks with a seeded nonlinear labeling function, three
//! class-balanced splits and the soft-label noise protocol.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probdist::ProbVector;
use crate::rng::{derive_seed, standard_normal, stream};

/// Fraction of true soft labels the teacher scale places in `(0.25, 0.75)`.
pub const SOFT_FRACTION: f64 = 0.2;
const CALIBRATION_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherNonlinearity {
    /// `w·x + v·(x⊙x - 1)`.
    #[default]
    QuadraticFeatures,
    /// Product of two random projections.
    SignProduct,
    /// Distance from a random center, minus its median.
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub teacher_nonlinearity: TeacherNonlinearity,
    pub samples_per_split: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            input_dim: 20,
            teacher_nonlinearity: TeacherNonlinearity::QuadraticFeatures,
            samples_per_split: 4000,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.teacher_nonlinearity == TeacherNonlinearity::SignProduct && self.input_dim < 2 {
            return Err(Error::Config(
                "sign-product teacher needs input_dim >= 2".into(),
            ));
        }
        if self.samples_per_split == 0 || !self.samples_per_split.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "samples_per_split must be positive and even, got {}",
                self.samples_per_split
            )));
        }
        Ok(())
    }
}

/// The labeling function `G*(x) = sigmoid(scale · score(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub nonlinearity: TeacherNonlinearity,
    pub input_dim: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub offset: f64,
    pub scale: f64,
}

impl Teacher {
    /// Draws the teacher for `spec` and calibrates its scale.
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.input_dim;
        let mut rng = stream(derive_seed(spec.seed, 1));
        let u: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let mut teacher = Teacher {
            nonlinearity: spec.teacher_nonlinearity,
            input_dim: d,
            u,
            v,
            offset: 0.0,
            scale: 1.0,
        };
        let mut rng = stream(derive_seed(spec.seed, 2));
        let mut scores: Vec<f64> = (0..CALIBRATION_SAMPLES)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
                teacher.raw_score(&x)
            })
            .collect();
        if teacher.nonlinearity == TeacherNonlinearity::Radial {
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            teacher.offset = sorted[sorted.len() / 2];
            scores.iter_mut().for_each(|s| *s -= teacher.offset);
        }
        let mut magnitudes: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
        magnitudes.sort_by(f64::total_cmp);
        let q = magnitudes[(SOFT_FRACTION * CALIBRATION_SAMPLES as f64) as usize];
        if !(q > 0.0) {
            return Err(Error::Numeric("degenerate teacher score".into()));
        }
        // sigmoid(s) lies in (0.25, 0.75) exactly when |s| < ln 3.
        teacher.scale = 3f64.ln() / q;
        Ok(teacher)
    }

    fn raw_score(&self, x: &[f64]) -> f64 {
        match self.nonlinearity {
            TeacherNonlinearity::QuadraticFeatures => {
                let norm = (dot(&self.u, &self.u) + 2.0 * dot(&self.v, &self.v)).sqrt();
                let quad: f64 = self
                    .v
                    .iter()
                    .zip(x)
                    .map(|(v, xi)| v * (xi * xi - 1.0))
                    .sum();
                (dot(&self.u, x) + quad) / norm
            }
            TeacherNonlinearity::SignProduct => {
                let a = dot(&self.u, x) / dot(&self.u, &self.u).sqrt();
                let b = dot(&self.v, x) / dot(&self.v, &self.v).sqrt();
                a * b
            }
            TeacherNonlinearity::Radial => {
                let center_scale = 0.5 / (self.input_dim as f64).sqrt();
                let r2: f64 = x
                    .iter()
                    .zip(&self.u)
                    .map(|(xi, c)| (xi - center_scale * c).powi(2))
                    .sum();
                (r2 - self.input_dim as f64) / (2.0 * self.input_dim as f64).sqrt()
            }
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        crate::error::ensure_len(self.input_dim, x.len())?;
        Ok(self.scale * (self.raw_score(x) - self.offset))
    }

    pub fn label(&self, x: &[f64]) -> Result<ProbVector> {
        let p = sigmoid(self.score(x)?);
        Ok(ProbVector::from_raw(vec![1.0 - p, p]))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: ProbVector,
}

impl Sample {
    /// Hardened true class at threshold 0.5.
    pub fn class(&self) -> usize {
        usize::from(self.y.positive() > 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub ground_truth_set: Vec<Sample>,
    pub weak_supervision_set: Vec<Sample>,
    pub test_set: Vec<Sample>,
}

impl DataSplit {
    pub fn input_dim(&self) -> usize {
        self.test_set
            .first()
            .or_else(|| self.ground_truth_set.first())
            .map_or(0, |s| s.x.len())
    }
}

/// Draws the three splits and the labeling function for `spec`.
///
/// Points are rejection-sampled into per-class pools until each holds
/// `3n/2`; every split takes `n/2` from each pool and is then shuffled.
pub fn generate_task(spec: &TaskSpec) -> Result<(DataSplit, Teacher)> {
    let teacher = Teacher::new(spec)?;
    let n = spec.samples_per_split;
    let per_class = 3 * n / 2;
    let mut rng = stream(derive_seed(spec.seed, 3));
    let mut pools: [Vec<Sample>; 2] =
        [Vec::with_capacity(per_class), Vec::with_capacity(per_class)];
    while pools[0].len() < per_class || pools[1].len() < per_class {
        let x: Vec<f64> = (0..spec.input_dim)
            .map(|_| standard_normal(&mut rng))
            .collect();
        let y = teacher.label(&x)?;
        let sample = Sample { x, y };
        let c = sample.class();
        if pools[c].len() < per_class {
            pools[c].push(sample);
        }
    }
    let [neg, pos] = pools;
    let mut neg = neg.into_iter();
    let mut pos = pos.into_iter();
    let mut take = |tag: u64| {
        let mut set: Vec<Sample> = neg
            .by_ref()
            .take(n / 2)
            .chain(pos.by_ref().take(n / 2))
            .collect();
        set.shuffle(&mut stream(derive_seed(spec.seed, tag)));
        set
    };
    let split = DataSplit {
        ground_truth_set: take(10),
        weak_supervision_set: take(11),
        test_set: take(12),
    };
    Ok((split, teacher))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySupervision {
    pub labels: Vec<ProbVector>,
    pub noise_level: f64,
    /// Sorted indices whose labels were replaced by their complement.
    pub flipped_indices: Vec<usize>,
}

/// Replaces a seeded uniform subset of exactly `round(level · n)` labels by
/// their complements.
pub fn inject_noise(labels: &[ProbVector], level: f64, seed: u64) -> Result<NoisySupervision> {
    if !(0.0..=0.5).contains(&level) {
        return Err(Error::Config(format!(
            "noise level must lie in [0, 0.5], got {level}"
        )));
    }
    if let Some(p) = labels.iter().find(|p| p.k() != 2) {
        return Err(Error::Unsupported(format!(
            "label noise needs binary labels, got k = {}",
            p.k()
        )));
    }
    let count = (level * labels.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut stream(seed));
    let mut flipped = order[..count].to_vec();
    flipped.sort_unstable();
    let mut out = labels.to_vec();
    for &i in &flipped {
        out[i] = out[i].complement()?;
    }
    Ok(NoisySupervision {
        labels: out,
        noise_level: level,
        flipped_indices: flipped,
    })
}

/// Column names: `x0 .. x{d-1}, y0, y1`.
pub fn csv_header(input_dim: usize) -> Vec<String> {
    (0..input_dim)
        .map(|i| format!("x{i}"))
        .chain(["y0".to_string(), "y1".to_string()])
        .collect()
}

/// Writes samples as CSV, floats in shortest round-trip form.
pub fn write_samples_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(csv_header(d))?;
    for s in samples {
        crate::error::ensure_len(d, s.x.len())?;
        let row: Vec<String> =
            s.x.iter()
                .chain(s.y.as_slice())
                .map(|v| v.to_string())
                .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples written by [`write_samples_csv`] or any file with the same
/// column layout (features, then the two label probabilities).
pub fn read_samples_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let width = r.headers()?.len();
    if width < 3 {
        return Err(Error::InvalidInput(format!(
            "{}: expected feature columns followed by y0, y1",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| {
                Error::InvalidInput(format!("{} row {}: {e}", path.display(), line + 1))
            })?;
        if values[..width - 2].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{} row {}: non-finite feature",
                path.display(),
                line + 1
            )));
        }
        let y = ProbVector::new(values[width - 2..].to_vec())?;
        out.push(Sample {
            x: values[..width - 2].to_vec(),
            y,
        });
    }
    Ok(out)
}

pub const SPLIT_FILES: [&str; 3] = ["ground_truth.csv", "weak_supervision.csv", "test.csv"];

pub fn write_split_csv(dir: &Path, split: &DataSplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, set) in SPLIT_FILES.iter().zip([
        &split.ground_truth_set,
        &split.weak_supervision_set,
        &split.test_set,
    ]) {
        write_samples_csv(&dir.join(name), set)?;
    }
    Ok(())
}

pub fn read_split_csv(dir: &Path) -> Result<DataSplit> {
    let mut sets = Vec::with_capacity(3);
    for name in SPLIT_FILES {
        sets.push(read_samples_csv(&dir.join(name))?);
    }
    let test_set = sets.pop().unwrap_or_default();
    let weak_supervision_set = sets.pop().unwrap_or_default();
    let ground_truth_set = sets.pop().unwrap_or_default();
    let d = ground_truth_set.first().map_or(0, |s| s.x.len());
    for s in ground_truth_set
        .iter()
        .chain(&weak_supervision_set)
        .chain(&test_set)
    {
        crate::error::ensure_len(d, s.x.len())?;
    }
    Ok(DataSplit {
        ground_truth_set,
        weak_supervision_set,
        test_set,
    })
}
