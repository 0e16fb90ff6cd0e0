use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, index, normal, stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `y = clip(w* . x, +-clip) + noise` with `w* ~ N(0, I/D)`.
    GaussianTeacher,
    /// `y ~ N(0, 1)` independent of `x`.
    RandomLabels,
}

/// Synthetic regression task with inputs `x ~ N(0, I_D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub dataset_size: usize,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_clip() -> f64 {
    3.0
}

impl TaskSpec {
    pub fn gaussian_teacher(input_dim: usize) -> Self {
        Self { kind: TaskKind::GaussianTeacher, input_dim, dataset_size: 4096, label_noise: 0.1, clip: default_clip() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.dataset_size == 0 {
            return Err(Error::Config("task needs a positive input dimension and dataset size".into()));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite() && self.clip > 0.0) {
            return Err(Error::Config(format!("label noise {} / clip {} out of range", self.label_noise, self.clip)));
        }
        Ok(())
    }
}

/// A materialized dataset; a function of `(spec, seed)` only, so every width
/// in a ladder sees the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `D x S`
    pub x: Matrix<f64>,
    pub y: Vec<f64>,
    seed: u64,
}

impl Dataset {
    pub fn generate(spec: &TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (d, s) = (spec.input_dim, spec.dataset_size);
        let mut rng = stream(derive_seed(seed, &[tag("task-x")]));
        let x = Matrix::from_fn(d, s, |_, _| normal(&mut rng));
        let mut rng = stream(derive_seed(seed, &[tag("task-y")]));
        let y = match spec.kind {
            TaskKind::GaussianTeacher => {
                let scale = 1.0 / (d as f64).sqrt();
                let teacher: Vec<f64> = (0..d).map(|_| normal(&mut rng) * scale).collect();
                let clean = x.dot_columns(&teacher);
                clean.into_iter().map(|v| v.clamp(-spec.clip, spec.clip) + spec.label_noise * normal(&mut rng)).collect()
            }
            TaskKind::RandomLabels => (0..s).map(|_| normal(&mut rng)).collect(),
        };
        Ok(Self { x, y, seed })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Matrix<f64>, Vec<f64>) {
        let x = Matrix::from_fn(self.x.rows(), idx.len(), |r, c| self.x[(r, idx[c])]);
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    /// Minibatch for training step `step`, drawn with replacement.
    pub fn batch(&self, step: usize, size: usize) -> (Matrix<f64>, Vec<f64>) {
        let mut rng = stream(derive_seed(self.seed, &[tag("batch"), step as u64]));
        let idx: Vec<usize> = (0..size).map(|_| index(&mut rng, self.len())).collect();
        self.gather(&idx)
    }

    /// Fixed batch on which every probe is evaluated.
    pub fn probe_batch(&self, size: usize) -> (Matrix<f64>, Vec<f64>) {
        let idx: Vec<usize> = (0..size).map(|i| i % self.len()).collect();
        self.gather(&idx)
    }
}
