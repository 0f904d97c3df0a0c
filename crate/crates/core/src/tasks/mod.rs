//! Synthetic classification tasks, Dirichlet partitioning, toy models and evaluation.

mod data;
mod model;
mod partition;

pub use data::{apply_client_shift, make_synthetic, Dataset, SyntheticSpec};
pub use model::{
    argmax, cross_entropy, random_backbone, softmax, Architecture, Module, Prepared, SampleGrad,
    ToyModel,
};
pub use partition::{dirichlet_partition, dirichlet_partition_indices, total_variation, PartitionSpec};

use thiserror::Error;

use crate::adapters::AdapterError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("dataset must contain at least one sample")]
    EmptyDataset,
    #[error("dimensions must be at least 1")]
    ZeroDimension,
    #[error("{rows} feature rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} outside 0..{num_classes}")]
    LabelRange { label: usize, num_classes: usize },
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("dirichlet alpha must be positive and finite, got {0}")]
    DirichletAlpha(f64),
    #[error("model: {0}")]
    Model(&'static str),
    #[error("dataset format: {0}")]
    Format(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

impl PartialEq for TaskError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate(model: &ToyModel, data: &Dataset) -> Result<f64, TaskError> {
    if data.is_empty() {
        return Err(TaskError::EmptyDataset);
    }
    let predictions = model.predict(data)?;
    let correct = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Population standard deviation of per-client accuracies.
pub fn client_std(accs: &[f64]) -> f64 {
    if accs.iter().all(|a| *a == accs[0]) {
        return 0.0;
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt()
}
