//! Small frozen-backbone classifiers with dual LoRA adapters and analytic gradients.
//!
//! Every layer is affine: its input is augmented with a constant 1, so a backbone layer mapping
//! `d` features to `m` outputs stores an `m × (d + 1)` weight. Hidden layers use `tanh`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, TaskError};
use crate::adapters::{dual_delta, effective_weight, DualAdapter, FactorPair, FrozenLayer};
use crate::tensor::Matrix;

/// Backbone shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Single affine layer into softmax.
    Linear,
    /// Affine, tanh, affine, softmax.
    TwoLayer { hidden: usize },
}

impl Architecture {
    /// `(d_out, d_in)` of every adapted layer, bias column included.
    pub fn layer_shapes(&self, d_in: usize, num_classes: usize) -> Vec<(usize, usize)> {
        match *self {
            Architecture::Linear => vec![(num_classes, d_in + 1)],
            Architecture::TwoLayer { hidden } => {
                vec![(hidden, d_in + 1), (num_classes, hidden + 1)]
            }
        }
    }
}

/// Which adapter half a flat parameter vector refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Shared,
    Private,
}

/// Random frozen weights `N(0, 1/d_in)` for every layer of `arch`.
pub fn random_backbone<R: Rng + ?Sized>(
    arch: Architecture,
    d_in: usize,
    num_classes: usize,
    rng: &mut R,
) -> Vec<Matrix> {
    arch.layer_shapes(d_in, num_classes)
        .into_iter()
        .map(|(rows, cols)| {
            let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("valid std");
            Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        })
        .collect()
}

/// Per-sample gradient of the cross-entropy loss with respect to the adapter factors.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    pub loss: f64,
    pub shared: Vec<f64>,
    pub private: Vec<f64>,
}

/// Frozen layers with tanh between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub layers: Vec<FrozenLayer>,
}

/// Effective dense weights, computed once per optimisation step.
pub struct Prepared {
    weights: Vec<Matrix>,
}

impl ToyModel {
    pub fn new(backbone: Vec<Matrix>, adapters: Vec<DualAdapter>) -> Result<Self, TaskError> {
        if backbone.is_empty() || backbone.len() != adapters.len() {
            return Err(TaskError::Model("one adapter per backbone layer required"));
        }
        for pair in backbone.windows(2) {
            if pair[1].cols() != pair[0].rows() + 1 {
                return Err(TaskError::Model("consecutive layer widths do not chain"));
            }
        }
        let layers = backbone
            .into_iter()
            .zip(adapters)
            .map(|(w, a)| FrozenLayer::new(w, a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers })
    }

    /// Input feature count (without the bias column).
    pub fn d_in(&self) -> usize {
        self.layers[0].d_in() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").d_out()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &DualAdapter> {
        self.layers.iter().map(|l| &l.adapter)
    }

    pub fn module(&self, module: Module) -> Vec<&FactorPair> {
        self.layers
            .iter()
            .map(|l| match module {
                Module::Shared => &l.adapter.shared,
                Module::Private => &l.adapter.private,
            })
            .collect()
    }

    fn module_mut(&mut self, module: Module) -> Vec<&mut FactorPair> {
        self.layers
            .iter_mut()
            .map(|l| match module {
                Module::Shared => &mut l.adapter.shared,
                Module::Private => &mut l.adapter.private,
            })
            .collect()
    }

    pub fn num_params(&self, module: Module) -> usize {
        self.module(module).iter().map(|p| p.num_params()).sum()
    }

    /// Flattened factors of one module: for each layer, `B` then `A`, row-major.
    pub fn params(&self, module: Module) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params(module));
        for p in self.module(module) {
            out.extend_from_slice(p.b().data());
            out.extend_from_slice(p.a().data());
        }
        out
    }

    /// Inverse of [`ToyModel::params`].
    pub fn set_params(&mut self, module: Module, values: &[f64]) -> Result<(), TaskError> {
        if values.len() != self.num_params(module) {
            return Err(TaskError::Model("parameter vector length mismatch"));
        }
        let mut offset = 0;
        for p in self.module_mut(module) {
            let nb = p.b().data().len();
            p.b_mut().data_mut().copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
            let na = p.a().data().len();
            p.a_mut().data_mut().copy_from_slice(&values[offset..offset + na]);
            offset += na;
        }
        Ok(())
    }

    pub fn prepare(&self) -> Prepared {
        Prepared {
            weights: self
                .layers
                .iter()
                .map(|l| effective_weight(l).expect("layer shapes validated at construction"))
                .collect(),
        }
    }

    /// Activations fed into each layer (bias appended) and the final logits.
    fn trace(&self, prepared: &Prepared, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>), TaskError> {
        if x.len() != self.d_in() {
            return Err(TaskError::Model("input width does not match the model"));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current: Vec<f64> = x.to_vec();
        for (l, w) in prepared.weights.iter().enumerate() {
            current.push(1.0);
            let z = w.matvec(&current)?;
            inputs.push(current);
            current = if l + 1 < prepared.weights.len() {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z
            };
        }
        Ok((inputs, current))
    }

    pub fn forward_prepared(&self, prepared: &Prepared, x: &[f64]) -> Result<Vec<f64>, TaskError> {
        self.trace(prepared, x).map(|(_, logits)| logits)
    }

    /// Logits for one input row.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, TaskError> {
        self.forward_prepared(&self.prepare(), x)
    }

    /// Mean cross-entropy over `data`.
    pub fn loss(&self, data: &Dataset) -> Result<f64, TaskError> {
        if data.is_empty() {
            return Err(TaskError::EmptyDataset);
        }
        let prepared = self.prepare();
        let mut total = 0.0;
        for i in 0..data.len() {
            let (x, y) = data.sample(i);
            let logits = self.forward_prepared(&prepared, x)?;
            total += cross_entropy(&logits, y);
        }
        Ok(total / data.len() as f64)
    }

    /// Loss and adapter gradients for one sample.
    pub fn sample_grad(&self, prepared: &Prepared, x: &[f64], y: usize) -> Result<SampleGrad, TaskError> {
        if y >= self.num_classes() {
            return Err(TaskError::LabelRange {
                label: y,
                num_classes: self.num_classes(),
            });
        }
        let (inputs, logits) = self.trace(prepared, x)?;
        let loss = cross_entropy(&logits, y);

        // dL/dz for every layer, last first.
        let mut out_grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let mut g = softmax(&logits);
        g[y] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            if l > 0 {
                let w = &prepared.weights[l];
                let back = w.matvec_transposed(&g)?;
                let h = &inputs[l];
                // Drop the bias column; tanh' = 1 - h².
                let prev: Vec<f64> = back[..w.cols() - 1]
                    .iter()
                    .zip(h)
                    .map(|(b, hv)| b * (1.0 - hv * hv))
                    .collect();
                out_grads[l] = std::mem::replace(&mut g, prev);
            } else {
                out_grads[l] = std::mem::take(&mut g);
            }
        }

        let mut shared = Vec::with_capacity(self.num_params(Module::Shared));
        let mut private = Vec::with_capacity(self.num_params(Module::Private));
        for (l, layer) in self.layers.iter().enumerate() {
            let u = &inputs[l];
            let g = &out_grads[l];
            pair_grad(&layer.adapter.shared, layer.scale, g, u, &mut shared)?;
            pair_grad(&layer.adapter.private, layer.scale, g, u, &mut private)?;
        }
        Ok(SampleGrad {
            loss,
            shared,
            private,
        })
    }

    /// Per-sample gradients for the rows of `data` at `indices`.
    pub fn grads(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<SampleGrad>, TaskError> {
        let prepared = self.prepare();
        indices
            .iter()
            .map(|&i| {
                let (x, y) = data.sample(i);
                self.sample_grad(&prepared, x, y)
            })
            .collect()
    }

    /// Predicted class per row of `data`.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>, TaskError> {
        let prepared = self.prepare();
        (0..data.len())
            .map(|i| {
                let logits = self.forward_prepared(&prepared, data.sample(i).0)?;
                Ok(argmax(&logits))
            })
            .collect()
    }

    /// Sum of the adapter deltas per layer.
    pub fn adapter_deltas(&self) -> Vec<Matrix> {
        self.layers
            .iter()
            .map(|l| dual_delta(&l.adapter).expect("dual adapter invariant"))
            .collect()
    }
}

/// Appends `dL/dB` then `dL/dA` for `ΔW = scale·B·A`, given `dL/dz = g` and layer input `u`.
fn pair_grad(
    pair: &FactorPair,
    scale: f64,
    g: &[f64],
    u: &[f64],
    out: &mut Vec<f64>,
) -> Result<(), TaskError> {
    let au = pair.a().matvec(u)?;
    let btg = pair.b().matvec_transposed(g)?;
    for gi in g {
        for a in &au {
            out.push(scale * gi * a);
        }
    }
    for b in &btg {
        for uj in u {
            out.push(scale * b * uj);
        }
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter_with;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Model with random backbone and random (non-zero) adapter factors everywhere.
    fn random_model(arch: Architecture, d_in: usize, classes: usize, seed: u64) -> ToyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = random_backbone(arch, d_in, classes, &mut rng);
        let adapters = arch
            .layer_shapes(d_in, classes)
            .into_iter()
            .enumerate()
            .map(|(l, (o, i))| {
                let mut a = init_adapter_with(l, o, i, 2, 3, &mut rng);
                for m in [a.shared.b_mut(), a.private.b_mut()] {
                    m.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(-0.5..0.5));
                }
                a
            })
            .collect();
        ToyModel::new(backbone, adapters).unwrap()
    }

    fn finite_difference(model: &ToyModel, module: Module, x: &[f64], y: usize) -> Vec<f64> {
        let h = 1e-5;
        let base = model.params(module);
        let mut probe = model.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] += h;
                probe.set_params(module, &p).unwrap();
                let up = cross_entropy(&probe.forward(x).unwrap(), y);
                p[i] -= 2.0 * h;
                probe.set_params(module, &p).unwrap();
                let down = cross_entropy(&probe.forward(x).unwrap(), y);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_model_is_uniform() {
        let backbone = vec![Matrix::zeros(4, 4), Matrix::zeros(3, 5)];
        let adapters = vec![
            crate::adapters::init_adapter(4, 4, 2, 2, 1),
            crate::adapters::init_adapter(3, 5, 2, 2, 2),
        ];
        let model = ToyModel::new(backbone, adapters).unwrap();
        let data = Dataset::new(Matrix::from_rows(&[[0.3, -1.0, 2.0]]), vec![1], 3).unwrap();
        let p = softmax(&model.forward(data.sample(0).0).unwrap());
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!((model.loss(&data).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, arch) in [
            (1, Architecture::Linear),
            (2, Architecture::TwoLayer { hidden: 5 }),
            (3, Architecture::TwoLayer { hidden: 3 }),
        ] {
            let model = random_model(arch, 4, 3, seed);
            let x = [0.4, -1.2, 0.7, 0.1];
            let g = model.sample_grad(&model.prepare(), &x, 2).unwrap();
            for (module, analytic) in [(Module::Shared, &g.shared), (Module::Private, &g.private)] {
                let numeric = finite_difference(&model, module, &x, 2);
                for (a, n) in analytic.iter().zip(&numeric) {
                    assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1.0), "{a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn duplicated_sample_doubles_its_contribution() {
        let model = random_model(Architecture::TwoLayer { hidden: 4 }, 3, 2, 5);
        let data = Dataset::new(Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]), vec![0, 1], 2).unwrap();
        let once = model.grads(&data, &[0, 1]).unwrap();
        let twice = model.grads(&data, &[0, 0, 1]).unwrap();
        let sum = |gs: &[SampleGrad]| -> Vec<f64> {
            let mut s = vec![0.0; gs[0].shared.len()];
            for g in gs {
                for (a, b) in s.iter_mut().zip(&g.shared) {
                    *a += b;
                }
            }
            s
        };
        let (s1, s2) = (sum(&once), sum(&twice));
        for ((a, b), g0) in s1.iter().zip(&s2).zip(&once[0].shared) {
            assert!((b - a - g0).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_never_touch_the_backbone() {
        let model = random_model(Architecture::TwoLayer { hidden: 4 }, 3, 2, 6);
        let before: Vec<Matrix> = model.layers.iter().map(|l| l.w().clone()).collect();
        let data = Dataset::new(Matrix::from_rows(&[[0.1, 0.2, 0.3]]), vec![1], 2).unwrap();
        model.grads(&data, &[0]).unwrap();
        let after: Vec<Matrix> = model.layers.iter().map(|l| l.w().clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn params_round_trip() {
        let mut model = random_model(Architecture::TwoLayer { hidden: 3 }, 2, 2, 7);
        let p = model.params(Module::Private);
        let doubled: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        model.set_params(Module::Private, &doubled).unwrap();
        assert_eq!(model.params(Module::Private), doubled);
        assert!(model.set_params(Module::Private, &doubled[1..]).is_err());
    }

    #[test]
    fn input_width_is_checked() {
        let model = random_model(Architecture::Linear, 3, 2, 8);
        assert!(model.forward(&[1.0, 2.0]).is_err());
    }
}
