use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Split, TaskData};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Gaussian-mixture classification task.
///
/// Class centers lie on a sphere of radius `center_radius`; samples are
/// `center + cluster_std * N(0, I)` with a uniformly drawn class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub task_id: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub class_count: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub cluster_std: f64,
    pub center_radius: f64,
}

impl SyntheticSpec {
    pub fn new(task_id: u64, n_train: usize, n_test: usize, class_count: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            task_id,
            n_train,
            n_test,
            class_count,
            input_dim,
            seed,
            cluster_std: 0.5,
            center_radius: 3.0,
        }
    }

    pub fn generate(&self) -> Result<TaskData> {
        if self.class_count < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {}", self.class_count)));
        }
        if self.input_dim == 0 || self.n_train == 0 {
            return Err(Error::Data("synthetic task needs positive sizes".into()));
        }
        if !(self.cluster_std >= 0.0) || !(self.center_radius > 0.0) {
            return Err(Error::Data("cluster spread and radius must be non-negative".into()));
        }
        let mut center_rng = RngStream::derive(self.seed, "synthetic-centers", self.task_id);
        let centers: Vec<Vec<f64>> = (0..self.class_count)
            .map(|_| {
                let v: Vec<f64> = (0..self.input_dim).map(|_| center_rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter().map(|x| x / norm * self.center_radius).collect()
            })
            .collect();
        let draw = |label: &str, n: usize, split: Split| -> Result<Dataset> {
            let mut rng = RngStream::derive(self.seed, label, self.task_id);
            let mut data = Vec::with_capacity(n * self.input_dim);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let class = rng.random_range(0..self.class_count);
                for &c in &centers[class] {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push((c + self.cluster_std * z) as f32);
                }
                labels.push(class);
            }
            Dataset::new(
                Tensor::new(vec![n, self.input_dim], data)?,
                labels,
                self.class_count,
                split,
                self.task_id,
            )
        };
        Ok(TaskData {
            train: draw("synthetic-train", self.n_train, Split::Train)?,
            test: draw("synthetic-test", self.n_test, Split::Test)?,
        })
    }
}

/// Gaussian-mixture task with cluster spread 0.5 and center radius 3.
pub fn make_synthetic(
    task_id: u64,
    n_train: usize,
    n_test: usize,
    class_count: usize,
    input_dim: usize,
    seed: u64,
) -> Result<TaskData> {
    SyntheticSpec::new(task_id, n_train, n_test, class_count, input_dim, seed).generate()
}
