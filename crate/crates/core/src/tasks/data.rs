use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::TaskError;
use crate::tensor::Matrix;

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, TaskError> {
        if labels.is_empty() {
            return Err(TaskError::EmptyDataset);
        }
        if features.rows() != labels.len() {
            return Err(TaskError::LabelCount {
                rows: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(TaskError::LabelRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, TaskError> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset::new(
            Matrix::from_vec(indices.len(), d, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Empirical label distribution.
    pub fn label_distribution(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1.0;
        }
        let n = self.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    }

    /// Adds `offset` to every feature row.
    pub fn shift_features(&mut self, offset: &[f64]) {
        let d = self.dim();
        for (i, v) in self.features.data_mut().iter_mut().enumerate() {
            *v += offset[i % d];
        }
    }

    /// Binary dump: `n, d_in, num_classes` as u64, features as f64, labels as u32, little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in [self.len(), self.dim(), self.num_classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&(*l as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset, TaskError> {
        let mut u64_buf = [0u8; 8];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut u64_buf)?;
            *h = usize::try_from(u64::from_le_bytes(u64_buf))
                .map_err(|_| TaskError::Format("header value too large"))?;
        }
        let [n, d, classes] = header;
        let len = n.checked_mul(d).ok_or(TaskError::Format("size overflow"))?;
        let mut features = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut u64_buf)?;
            features.push(f64::from_le_bytes(u64_buf));
        }
        let mut labels = Vec::with_capacity(n);
        let mut u32_buf = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut u32_buf)?;
            labels.push(u32::from_le_bytes(u32_buf) as usize);
        }
        Dataset::new(Matrix::from_vec(n, d, features)?, labels, classes)
    }
}

/// Gaussian class-conditional clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub d_in: usize,
    pub n: usize,
    /// Standard deviation of the class means around the origin.
    pub class_sep: f64,
    /// Within-class noise standard deviation.
    pub noise_std: f64,
    /// Standard deviation of the per-client feature-mean offset applied after partitioning.
    pub client_shift: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, d_in: usize, n: usize, client_shift: f64, seed: u64) -> Self {
        Self {
            num_classes,
            d_in,
            n,
            class_sep: 1.0,
            noise_std: 1.0,
            client_shift,
            seed,
        }
    }
}

/// Draws `n` samples with uniformly random labels around per-class Gaussian means.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset, TaskError> {
    if spec.n == 0 {
        return Err(TaskError::EmptyDataset);
    }
    if spec.num_classes == 0 || spec.d_in == 0 {
        return Err(TaskError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.d_in)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.class_sep * z
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|_| TaskError::Format("noise_std"))?;
    let mut data = Vec::with_capacity(spec.n * spec.d_in);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let label = rng.random_range(0..spec.num_classes);
        for m in &means[label] {
            data.push(m + noise.sample(&mut rng));
        }
        labels.push(label);
    }
    Dataset::new(
        Matrix::from_vec(spec.n, spec.d_in, data)?,
        labels,
        spec.num_classes,
    )
}

/// Adds an independent `N(0, shift²I)` mean offset to each shard, seeded per client index.
pub fn apply_client_shift(shards: &mut [Dataset], shift: f64, seed: u64) {
    if shift == 0.0 {
        return;
    }
    for (k, shard) in shards.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1)));
        let offset: Vec<f64> = (0..shard.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                shift * z
            })
            .collect();
        shard.shift_features(&offset);
    }
}
